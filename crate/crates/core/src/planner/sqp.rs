//! Dense SQP for the tracking MPC: linearize the RK4 dynamics and the dual
//! collision constraints about the incumbent, solve a convex inner QP with
//! penalized slacks, and accept steps through an l1-merit backtracking line
//! search.

use super::qp::{self, QpProblem};
use super::{MpcSolution, ObstacleStep, PlannerParams, SolveStatus};
use crate::decision::{Maneuver, Reference};
use crate::models::{ev_derivative, ev_step_rk4, EvControl, EvState, VehicleGeometry};
use nalgebra::{DMatrix, DVector, Matrix5, Matrix5x2, Vector2};
use std::time::Instant;

/// Jacobians of the continuous dynamics at one state.
fn continuous_jacobians(x: &EvState, u: &EvControl, geom: &VehicleGeometry) -> (Matrix5<f64>, Matrix5x2<f64>) {
    let wheelbase = geom.wheelbase();
    let rear_ratio = geom.l_r / wheelbase;
    let mut fx = Matrix5::zeros();
    fx[(0, 3)] = 1.0;
    fx[(1, 2)] = x.v;
    fx[(1, 3)] = x.phi + rear_ratio * u.delta;
    fx[(2, 3)] = u.delta / wheelbase;
    fx[(3, 4)] = 1.0;
    let mut fu = Matrix5x2::zeros();
    fu[(1, 0)] = x.v * rear_ratio;
    fu[(2, 0)] = x.v / wheelbase;
    fu[(4, 1)] = 1.0;
    (fx, fu)
}

/// Exact Jacobians of one RK4 step, by chaining the stage derivatives.
fn rk4_jacobians(
    x: &EvState,
    u: &EvControl,
    geom: &VehicleGeometry,
    t: f64,
) -> (Matrix5<f64>, Matrix5x2<f64>) {
    let shift = |base: &EvState, k: &[f64; 5], s: f64| {
        let mut arr = base.to_array();
        for i in 0..5 {
            arr[i] += s * k[i];
        }
        EvState::from_array(arr)
    };
    let k1 = ev_derivative(x, u, geom);
    let x2 = shift(x, &k1, 0.5 * t);
    let k2 = ev_derivative(&x2, u, geom);
    let x3 = shift(x, &k2, 0.5 * t);
    let k3 = ev_derivative(&x3, u, geom);
    let x4 = shift(x, &k3, t);

    let (fx1, fu1) = continuous_jacobians(x, u, geom);
    let (fx2, fu2) = continuous_jacobians(&x2, u, geom);
    let (fx3, fu3) = continuous_jacobians(&x3, u, geom);
    let (fx4, fu4) = continuous_jacobians(&x4, u, geom);

    let eye = Matrix5::identity();
    let kx1 = fx1;
    let kx2 = fx2 * (eye + 0.5 * t * kx1);
    let kx3 = fx3 * (eye + 0.5 * t * kx2);
    let kx4 = fx4 * (eye + t * kx3);
    let a = eye + (t / 6.0) * (kx1 + 2.0 * kx2 + 2.0 * kx3 + kx4);

    let ku1 = fu1;
    let ku2 = fx2 * (0.5 * t * ku1) + fu2;
    let ku3 = fx3 * (0.5 * t * ku2) + fu3;
    let ku4 = fx4 * (t * ku3) + fu4;
    let b = (t / 6.0) * (ku1 + 2.0 * ku2 + 2.0 * ku3 + ku4);
    (a, b)
}

/// Sensitivity block `d state_i / d controls`, 5 x (2 n_p).
type Sensitivity = nalgebra::OMatrix<f64, nalgebra::Const<5>, nalgebra::Dyn>;

struct Rollout {
    states: Vec<EvState>,
    sens: Vec<Sensitivity>,
}

fn rollout_with_sensitivities(
    x0: &EvState,
    controls: &[EvControl],
    geom: &VehicleGeometry,
    t: f64,
) -> Rollout {
    let n_p = controls.len();
    let nu = 2 * n_p;
    let mut states = Vec::with_capacity(n_p);
    let mut sens: Vec<Sensitivity> = Vec::with_capacity(n_p);
    let mut x = *x0;
    for (i, u) in controls.iter().enumerate() {
        let (a, b) = rk4_jacobians(&x, u, geom, t);
        let mut s = if i == 0 {
            Sensitivity::zeros_generic(nalgebra::Const::<5>, nalgebra::Dyn(nu))
        } else {
            &a * &sens[i - 1]
        };
        for r in 0..5 {
            s[(r, 2 * i)] += b[(r, 0)];
            s[(r, 2 * i + 1)] += b[(r, 1)];
        }
        x = ev_step_rk4(&x, u, geom, t);
        states.push(x);
        sens.push(s);
    }
    Rollout { states, sens }
}

fn rollout_states(x0: &EvState, controls: &[EvControl], geom: &VehicleGeometry, t: f64) -> Vec<EvState> {
    let mut states = Vec::with_capacity(controls.len());
    let mut x = *x0;
    for u in controls {
        x = ev_step_rk4(&x, u, geom, t);
        states.push(x);
    }
    states
}

fn objective(controls: &[EvControl], states: &[EvState], reference: &Reference, params: &PlannerParams) -> f64 {
    let mut j = 0.0;
    for u in controls {
        j += params.q1 * u.delta * u.delta + params.q2 * u.eta * u.eta;
    }
    let last = states.last().expect("nonempty horizon");
    let e_py = last.p_y - reference.p_y_ref;
    let e_v = last.v - reference.v_x_ref;
    j + params.q3[0] * e_py * e_py + params.q3[1] * e_v * e_v
}

/// Summed l1 constraint violation of an incumbent, in the variables the
/// solver actually carries (collision in dual form).
fn merit_violation(
    controls: &[EvControl],
    states: &[EvState],
    lambdas: &[Vec<[f64; 4]>],
    obstacles: &[Vec<ObstacleStep>],
    vt1_cap: Option<f64>,
    params: &PlannerParams,
) -> f64 {
    let mut v = 0.0;
    let half_w = params.geometry.half_width();
    let py_min = half_w;
    let py_max = 2.0 * params.lane_width - half_w;
    for (i, x) in states.iter().enumerate() {
        v += (params.u_lower[0] - x.v).max(0.0) + (x.v - params.u_upper[0]).max(0.0);
        v += (params.u_lower[1] - x.a).max(0.0) + (x.a - params.u_upper[1]).max(0.0);
        let d = controls[i].delta;
        v += (params.u_lower[2] - d).max(0.0) + (d - params.u_upper[2]).max(0.0);
        v += (py_min - x.p_y).max(0.0) + (x.p_y - py_max).max(0.0);
        if let Some(cap) = vt1_cap {
            v += (x.p_x - cap).max(0.0);
        }
        let p = Vector2::new(x.p_x, x.p_y);
        for (s, seq) in obstacles.iter().enumerate() {
            let obs = &seq[i];
            let lam = &lambdas[s][i];
            let mut value = 0.0;
            let mut w = Vector2::zeros();
            for k in 0..obs.facet_count() {
                let gap = obs.normals[k].dot(&p) - obs.offsets[k];
                value += gap * lam[k];
                w += obs.normals[k] * lam[k];
                v += (-lam[k]).max(0.0);
            }
            v += (params.d_min - value).max(0.0);
            v += (w.norm() - 1.0).max(0.0);
        }
    }
    v
}

/// Worst single violation measured the way the verifier does: distances via
/// the dual closed form, independent of the solver's multipliers.
fn worst_true_violation(
    controls: &[EvControl],
    states: &[EvState],
    obstacles: &[Vec<ObstacleStep>],
    vt1_cap: Option<f64>,
    params: &PlannerParams,
) -> f64 {
    let mut worst: f64 = 0.0;
    let half_w = params.geometry.half_width();
    let py_min = half_w;
    let py_max = 2.0 * params.lane_width - half_w;
    for (i, x) in states.iter().enumerate() {
        worst = worst
            .max(params.u_lower[0] - x.v)
            .max(x.v - params.u_upper[0])
            .max(params.u_lower[1] - x.a)
            .max(x.a - params.u_upper[1])
            .max(params.u_lower[2] - controls[i].delta)
            .max(controls[i].delta - params.u_upper[2])
            .max(py_min - x.p_y)
            .max(x.p_y - py_max);
        if let Some(cap) = vt1_cap {
            worst = worst.max(x.p_x - cap);
        }
        let p = Vector2::new(x.p_x, x.p_y);
        for seq in obstacles {
            let d = super::dual_distance(&p, &seq[i]);
            worst = worst.max(params.d_min - d);
        }
    }
    worst
}

/// Solve the tracking MPC from `x0` toward `reference` against per-obstacle
/// inflated occupancy sequences. `warm` shifts the previous solution one step
/// and repeats the last control.
pub fn solve_mpc(
    x0: &EvState,
    reference: &Reference,
    obstacles: &[Vec<ObstacleStep>],
    params: &PlannerParams,
    warm: Option<&MpcSolution>,
) -> MpcSolution {
    let start = Instant::now();
    let n_p = params.n_p;
    assert!(n_p >= 1);
    for seq in obstacles {
        assert!(
            seq.len() >= n_p,
            "obstacle sequences must cover the planning horizon"
        );
        for step in &seq[..n_p] {
            assert_eq!(step.facet_count(), 4, "inflated occupancies are boxes");
        }
    }
    let n_obs = obstacles.len();
    let nu = 2 * n_p;
    let geom = &params.geometry;
    let settings = &params.sqp;
    let vt1_cap = match reference.maneuver {
        Maneuver::Vt1 => Some(params.p_x_ter - geom.half_length()),
        Maneuver::Vt2 => None,
    };

    // Incumbent controls.
    let mut controls: Vec<EvControl> = match warm {
        Some(prev) if settings.warm_start && prev.controls.len() == n_p => {
            let mut shifted: Vec<EvControl> = (0..n_p)
                .map(|i| prev.controls[(i + 1).min(n_p - 1)])
                .collect();
            for u in &mut shifted {
                u.delta = u.delta.clamp(params.u_lower[2], params.u_upper[2]);
            }
            // Keep the appended tail from pushing acceleration out of bounds.
            if let Some(last_state) = prev.states.last() {
                let last = shifted.last_mut().expect("n_p >= 1");
                let lo = (params.u_lower[1] - last_state.a) / params.t;
                let hi = (params.u_upper[1] - last_state.a) / params.t;
                last.eta = last.eta.clamp(lo, hi);
            }
            shifted
        }
        _ => {
            // Cold start: coast, unless coasting runs through an obstacle, in
            // which case start from a braking profile so the incumbent spends
            // less of the horizon inside the keep-out set.
            let coast = vec![EvControl::default(); n_p];
            let states = rollout_states(x0, &coast, geom, params.t);
            let penetrates = states.iter().enumerate().any(|(i, x)| {
                let p = Vector2::new(x.p_x, x.p_y);
                obstacles
                    .iter()
                    .any(|seq| super::dual_distance(&p, &seq[i]) < params.d_min)
            });
            if penetrates {
                let mut brake = Vec::with_capacity(n_p);
                let mut x = *x0;
                for _ in 0..n_p {
                    let eta_brake = (params.u_lower[1] - x.a) / params.t;
                    let eta_floor = 2.0 * (-x.v - params.t * x.a) / (params.t * params.t);
                    let u = EvControl {
                        delta: 0.0,
                        eta: eta_brake.max(eta_floor).min(settings.trust_jerk),
                    };
                    x = ev_step_rk4(&x, &u, geom, params.t);
                    brake.push(u);
                }
                brake
            } else {
                coast
            }
        }
    };

    // Incumbent multipliers: shifted, or seeded from the dual distance at the
    // initial rollout.
    let mut lambdas: Vec<Vec<[f64; 4]>> = match warm {
        Some(prev)
            if settings.warm_start
                && prev.duals.len() == n_obs
                && prev.duals.iter().all(|d| d.len() == n_p) =>
        {
            (0..n_obs)
                .map(|s| {
                    (0..n_p)
                        .map(|i| prev.duals[s][(i + 1).min(n_p - 1)])
                        .collect()
                })
                .collect()
        }
        _ => {
            let states = rollout_states(x0, &controls, geom, params.t);
            (0..n_obs)
                .map(|s| {
                    states
                        .iter()
                        .enumerate()
                        .map(|(i, x)| {
                            let p = Vector2::new(x.p_x, x.p_y);
                            let obs = &obstacles[s][i];
                            let (d, lam) = super::dual_distance_with_multiplier(&p, obs);
                            if d > 0.0 {
                                return [lam[0], lam[1], lam[2], lam[3]];
                            }
                            // Inside the obstacle every multiplier vanishes and
                            // the collision row loses its position gradient;
                            // seed the nearest facet instead so the trajectory
                            // gets pushed out through it.
                            let mut seeded = [0.0; 4];
                            let mut best = f64::NEG_INFINITY;
                            let mut arg = 0;
                            for k in 0..4 {
                                let gap = obs.normals[k].dot(&p) - obs.offsets[k];
                                if gap > best {
                                    best = gap;
                                    arg = k;
                                }
                            }
                            seeded[arg] = 1.0;
                            seeded
                        })
                        .collect()
                })
                .collect()
        }
    };

    // Variable layout: controls, multipliers, then slack groups.
    let nl = 4 * n_obs * n_p;
    let lam_idx = |s: usize, i: usize, k: usize| nu + 4 * (s * n_p + i) + k;
    let sv_base = nu + nl;
    let sdr_base = sv_base + n_p;
    let scap_base = sdr_base + n_p;
    let scol_base = scap_base + if vt1_cap.is_some() { n_p } else { 0 };
    let n_vars = scol_base + n_obs * n_p;
    let scol_idx = |s: usize, i: usize| scol_base + s * n_p + i;

    let half_w = geom.half_width();
    let py_min = half_w;
    let py_max = 2.0 * params.lane_width - half_w;

    let mut merit_trace = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    let mut line_search_failures = 0;

    let mut rollout = rollout_with_sensitivities(x0, &controls, geom, params.t);
    let mut merit = objective(&controls, &rollout.states, reference, params)
        + settings.merit_penalty
            * merit_violation(&controls, &rollout.states, &lambdas, obstacles, vt1_cap, params);

    for iter in 0..settings.max_iterations {
        iterations = iter + 1;
        let states = &rollout.states;
        let sens = &rollout.sens;

        // Quadratic model of the objective (Gauss-Newton on the terminal
        // deviation; the input costs are exactly quadratic).
        let mut hessian = DMatrix::<f64>::zeros(n_vars, n_vars);
        let mut gradient = DVector::<f64>::zeros(n_vars);
        for i in 0..n_p {
            hessian[(2 * i, 2 * i)] = 2.0 * params.q1 + 1e-9;
            hessian[(2 * i + 1, 2 * i + 1)] = 2.0 * params.q2 + 1e-9;
            gradient[2 * i] = 2.0 * params.q1 * controls[i].delta;
            gradient[2 * i + 1] = 2.0 * params.q2 * controls[i].eta;
        }
        let last_sens = &sens[n_p - 1];
        let e_py = states[n_p - 1].p_y - reference.p_y_ref;
        let e_v = states[n_p - 1].v - reference.v_x_ref;
        for a in 0..nu {
            let ja_py = last_sens[(1, a)];
            let ja_v = last_sens[(3, a)];
            gradient[a] += 2.0 * params.q3[0] * e_py * ja_py + 2.0 * params.q3[1] * e_v * ja_v;
            for b in a..nu {
                let add = 2.0 * params.q3[0] * ja_py * last_sens[(1, b)]
                    + 2.0 * params.q3[1] * ja_v * last_sens[(3, b)];
                hessian[(a, b)] += add;
                if b != a {
                    hessian[(b, a)] += add;
                }
            }
        }
        for idx in nu..(nu + nl) {
            hessian[(idx, idx)] = 1e-6;
        }
        for idx in (nu + nl)..n_vars {
            hessian[(idx, idx)] = 1e-9;
            gradient[idx] = settings.slack_penalty;
        }
        let obj_grad_u: Vec<f64> = (0..nu).map(|a| gradient[a]).collect();

        // Constraint rows G d <= h.
        let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
        let mut rhs: Vec<f64> = Vec::new();
        let mut push = |row: Vec<(usize, f64)>, h: f64| {
            rows.push(row);
            rhs.push(h);
        };
        let sens_row = |i: usize, r: usize| -> Vec<(usize, f64)> {
            let s = &sens[i];
            (0..nu)
                .filter_map(|a| {
                    let v = s[(r, a)];
                    (v.abs() > 1e-13).then_some((a, v))
                })
                .collect()
        };

        for i in 0..n_p {
            // Velocity pair, one shared slack.
            let vr = sens_row(i, 3);
            let mut up = vr.clone();
            up.push((sv_base + i, -1.0));
            push(up, params.u_upper[0] - states[i].v);
            let mut lo: Vec<(usize, f64)> = vr.iter().map(|&(j, v)| (j, -v)).collect();
            lo.push((sv_base + i, -1.0));
            push(lo, states[i].v - params.u_lower[0]);

            // Acceleration pair (exactly linear in the jerk inputs).
            let ar = sens_row(i, 4);
            push(ar.clone(), params.u_upper[1] - states[i].a);
            push(ar.iter().map(|&(j, v)| (j, -v)).collect(), states[i].a - params.u_lower[1]);

            // Steering bounds and trust regions on the control step.
            push(vec![(2 * i, 1.0)], params.u_upper[2] - controls[i].delta);
            push(vec![(2 * i, -1.0)], controls[i].delta - params.u_lower[2]);
            push(vec![(2 * i, 1.0)], settings.trust_steer);
            push(vec![(2 * i, -1.0)], settings.trust_steer);
            push(vec![(2 * i + 1, 1.0)], settings.trust_jerk);
            push(vec![(2 * i + 1, -1.0)], settings.trust_jerk);

            // Drivable corridor, one shared slack.
            let pyr = sens_row(i, 1);
            let mut up = pyr.clone();
            up.push((sdr_base + i, -1.0));
            push(up, py_max - states[i].p_y);
            let mut lo: Vec<(usize, f64)> = pyr.iter().map(|&(j, v)| (j, -v)).collect();
            lo.push((sdr_base + i, -1.0));
            push(lo, states[i].p_y - py_min);

            // Lane-1 terminal cap while the maneuver stays in lane 1.
            if let Some(cap) = vt1_cap {
                let mut row = sens_row(i, 0);
                row.push((scap_base + i, -1.0));
                push(row, cap - states[i].p_x);
            }

            let p = Vector2::new(states[i].p_x, states[i].p_y);
            let px_row = sens_row(i, 0);
            let py_row = sens_row(i, 1);
            for (s, seq) in obstacles.iter().enumerate() {
                let obs = &seq[i];
                let lam = &lambdas[s][i];
                let mut w = Vector2::zeros();
                let mut value = 0.0;
                let mut gaps = [0.0; 4];
                for k in 0..4 {
                    gaps[k] = obs.normals[k].dot(&p) - obs.offsets[k];
                    value += gaps[k] * lam[k];
                    w += obs.normals[k] * lam[k];
                }
                // Collision row: d_min - (H p - h)' lam <= slack, linearized.
                let mut row: Vec<(usize, f64)> = Vec::with_capacity(nu + 5);
                for &(j, v) in &px_row {
                    row.push((j, -w.x * v));
                }
                for &(j, v) in &py_row {
                    let coeff = -w.y * v;
                    if let Some(entry) = row.iter_mut().find(|(c, _)| *c == j) {
                        entry.1 += coeff;
                    } else {
                        row.push((j, coeff));
                    }
                }
                for k in 0..4 {
                    row.push((lam_idx(s, i, k), -gaps[k]));
                }
                row.push((scol_idx(s, i), -1.0));
                push(row, value - params.d_min);

                // Cone row ||H' lam|| <= 1 about the incumbent direction.
                let wn = w.norm();
                if wn > 1e-9 {
                    let wh = w / wn;
                    let row: Vec<(usize, f64)> = (0..4)
                        .map(|k| (lam_idx(s, i, k), obs.normals[k].dot(&wh)))
                        .collect();
                    push(row, 1.0 - wn);
                }
                // Multiplier nonnegativity plus the step safeguard.
                for k in 0..4 {
                    push(vec![(lam_idx(s, i, k), -1.0)], lam[k]);
                    push(vec![(lam_idx(s, i, k), 1.0)], settings.trust_lambda);
                    push(vec![(lam_idx(s, i, k), -1.0)], settings.trust_lambda);
                }
            }
        }
        // Slack nonnegativity.
        for idx in (nu + nl)..n_vars {
            push(vec![(idx, -1.0)], 0.0);
        }

        let qp_sol = qp::solve(&QpProblem {
            hessian,
            gradient,
            rows,
            rhs,
        });
        let d = qp_sol.x;
        if std::env::var_os("SQP_DEBUG").is_some() {
            eprintln!(
                "iter {iter}: qp converged={} iters={} |d|={:.3e} merit={:.6e}",
                qp_sol.converged,
                qp_sol.iterations,
                d.amax(),
                merit
            );
        }

        let step_inf = (0..(nu + nl)).map(|j| d[j].abs()).fold(0.0, f64::max);
        let scale = controls
            .iter()
            .map(|u| u.delta.abs().max(u.eta.abs()))
            .fold(1.0, f64::max);
        if step_inf <= settings.kkt_tolerance * scale {
            converged = true;
            merit_trace.push(merit);
            break;
        }

        // Directional derivative bound for the l1 merit.
        let current_violation =
            merit_violation(&controls, &rollout.states, &lambdas, obstacles, vt1_cap, params);
        let descent: f64 = obj_grad_u
            .iter()
            .enumerate()
            .map(|(j, g)| g * d[j])
            .sum::<f64>()
            - settings.merit_penalty * current_violation;

        let mut alpha = 1.0_f64;
        let mut accepted = false;
        for _ in 0..30 {
            let trial_controls: Vec<EvControl> = controls
                .iter()
                .enumerate()
                .map(|(i, u)| EvControl {
                    delta: u.delta + alpha * d[2 * i],
                    eta: u.eta + alpha * d[2 * i + 1],
                })
                .collect();
            let trial_lambdas: Vec<Vec<[f64; 4]>> = (0..n_obs)
                .map(|s| {
                    (0..n_p)
                        .map(|i| {
                            let mut lam = lambdas[s][i];
                            for k in 0..4 {
                                lam[k] = (lam[k] + alpha * d[lam_idx(s, i, k)]).max(0.0);
                            }
                            lam
                        })
                        .collect()
                })
                .collect();
            let trial_states = rollout_states(x0, &trial_controls, geom, params.t);
            let trial_merit = objective(&trial_controls, &trial_states, reference, params)
                + settings.merit_penalty
                    * merit_violation(
                        &trial_controls,
                        &trial_states,
                        &trial_lambdas,
                        obstacles,
                        vt1_cap,
                        params,
                    );
            if trial_merit <= merit + 1e-4 * alpha * descent.min(0.0) && trial_merit <= merit + 1e-12
            {
                controls = trial_controls;
                lambdas = trial_lambdas;
                merit = trial_merit;
                accepted = true;
                break;
            }
            alpha *= settings.backtrack_factor;
        }

        if !accepted {
            line_search_failures += 1;
            if line_search_failures >= 2 {
                merit_trace.push(merit);
                break;
            }
        } else {
            line_search_failures = 0;
            merit_trace.push(merit);
        }

        rollout = rollout_with_sensitivities(x0, &controls, geom, params.t);

        if accepted && alpha * step_inf <= settings.kkt_tolerance * scale {
            converged = true;
            break;
        }
    }

    let states = rollout.states;
    let final_objective = objective(&controls, &states, reference, params);
    let worst = worst_true_violation(&controls, &states, obstacles, vt1_cap, params);
    let status = if worst > 1e-4 {
        SolveStatus::InfeasibleRelaxed
    } else if converged && worst <= 1e-6 {
        SolveStatus::Optimal
    } else {
        SolveStatus::MaxIter
    };

    MpcSolution {
        controls,
        states,
        duals: lambdas,
        status,
        objective: final_objective,
        solve_time: start.elapsed().as_secs_f64(),
        iterations,
        merit_trace,
    }
}
