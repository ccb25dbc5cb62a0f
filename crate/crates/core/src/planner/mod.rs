//! Nonlinear MPC trajectory planner: tracks the decision reference subject to
//! the ego dynamics, input/state bounds, the drivable area, and collision
//! avoidance in dual (multiplier) form against predicted occupancies.
//!
//! The solver is an in-house dense SQP with an l1-merit backtracking line
//! search and penalized collision slacks; correctness is anchored by the
//! independent checker [`verify_solution`] and the closed-form
//! [`dual_distance`], not by any particular iterate sequence.

mod qp;
mod sqp;

pub use sqp::solve_mpc;

use crate::estimator::{AccelBounds, OccupancyPrediction};
use crate::models::{EvControl, EvState, SvState, VehicleGeometry};
use crate::polytope::Polytope2;
use crate::sim::PlannerKind;
use nalgebra::{Vector2, Vector3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlannerError {
    #[error("solution has no controls")]
    EmptyHorizon,
    #[error("obstacle sequence shorter than the planning horizon")]
    ShortObstacleSequence,
}

/// SQP iteration controls. Trust radii bound the per-iteration steps of each
/// decision-variable group so linearizations stay honest.
#[derive(Debug, Clone, PartialEq)]
pub struct SqpSettings {
    pub max_iterations: usize,
    pub kkt_tolerance: f64,
    pub merit_penalty: f64,
    pub backtrack_factor: f64,
    pub slack_penalty: f64,
    pub warm_start: bool,
    pub trust_steer: f64,
    pub trust_jerk: f64,
    /// Safeguarding bound on multiplier steps; keeps the bilinear collision
    /// rows honest, in particular while a predicted state still sits inside
    /// an obstacle.
    pub trust_lambda: f64,
}

impl Default for SqpSettings {
    fn default() -> Self {
        Self {
            max_iterations: 40,
            kkt_tolerance: 1e-7,
            merit_penalty: 1e4,
            backtrack_factor: 0.5,
            slack_penalty: 1e4,
            warm_start: true,
            trust_steer: 0.05,
            trust_jerk: 60.0,
            trust_lambda: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlannerParams {
    pub n_p: usize,
    /// Steering and jerk input weights.
    pub q1: f64,
    pub q2: f64,
    /// Terminal deviation weights on (lateral position, velocity).
    pub q3: Vector2<f64>,
    /// Bounds on (velocity, acceleration, steering).
    pub u_lower: Vector3<f64>,
    pub u_upper: Vector3<f64>,
    /// Collision keep-out distance.
    pub d_min: f64,
    pub lane_width: f64,
    pub p_x_ter: f64,
    pub t: f64,
    pub geometry: VehicleGeometry,
    pub sqp: SqpSettings,
}

/// One prediction step of an inflated obstacle `{occupancy (+) ego footprint}`
/// as a normalized halfspace system.
#[derive(Debug, Clone)]
pub struct ObstacleStep {
    pub normals: Vec<Vector2<f64>>,
    pub offsets: Vec<f64>,
}

impl ObstacleStep {
    pub fn facet_count(&self) -> usize {
        self.normals.len()
    }

    /// Facet values `H p - h`.
    fn facet_gaps(&self, p: &Vector2<f64>) -> Vec<f64> {
        self.normals
            .iter()
            .zip(&self.offsets)
            .map(|(n, c)| n.dot(p) - c)
            .collect()
    }
}

/// Minkowski-inflate an occupancy by the ego footprint (axis-aligned box at
/// the origin, heading ignored) and emit its normalized halfspace form.
pub fn inflate_obstacle(occ: &Polytope2, geom: &VehicleGeometry) -> ObstacleStep {
    let footprint = Polytope2::from_box(
        &Vector2::zeros(),
        &Vector2::new(geom.half_length(), geom.half_width()),
    )
    .expect("nonnegative footprint");
    let inflated = occ.minkowski_sum(&footprint);
    let h = inflated.hrep();
    ObstacleStep {
        normals: h.normals.clone(),
        offsets: h.offsets.clone(),
    }
}

/// Distance from a point to an inflated obstacle in dual form: maximize
/// `(H p - h)' lam` over `lam >= 0`, `||H' lam|| <= 1`. Equals the Euclidean
/// distance outside and exactly zero inside.
///
/// The optimum needs at most two active facets in the plane, so it is found
/// in closed form over singles and pairs. Also returns the maximizing
/// multiplier (all zeros inside), which doubles as a collision-dual warm
/// start.
pub fn dual_distance_with_multiplier(p: &Vector2<f64>, obs: &ObstacleStep) -> (f64, Vec<f64>) {
    let m = obs.facet_count();
    let gaps = obs.facet_gaps(p);
    let mut best = 0.0_f64;
    let mut best_lam = vec![0.0; m];
    // Single facets: lam_j = 1 achieves the facet gap.
    for j in 0..m {
        if gaps[j] > best {
            best = gaps[j];
            best_lam = vec![0.0; m];
            best_lam[j] = 1.0;
        }
    }
    // Facet pairs: corner optimum sqrt(c' M^-1 c) when the weights stay
    // nonnegative, with M the Gram matrix of the two unit normals.
    for j in 0..m {
        for k in (j + 1)..m {
            let dot = obs.normals[j].dot(&obs.normals[k]);
            let det = 1.0 - dot * dot;
            if det < 1e-12 {
                continue;
            }
            let (cj, ck) = (gaps[j], gaps[k]);
            let tj = (cj - dot * ck) / det;
            let tk = (ck - dot * cj) / det;
            if tj < 0.0 || tk < 0.0 {
                continue;
            }
            let quad = cj * tj + ck * tk;
            if quad <= 0.0 {
                continue;
            }
            let value = quad.sqrt();
            if value > best {
                best = value;
                best_lam = vec![0.0; m];
                best_lam[j] = tj / value;
                best_lam[k] = tk / value;
            }
        }
    }
    (best, best_lam)
}

pub fn dual_distance(p: &Vector2<f64>, obs: &ObstacleStep) -> f64 {
    dual_distance_with_multiplier(p, obs).0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    MaxIter,
    InfeasibleRelaxed,
}

impl SolveStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::MaxIter => "max_iter",
            SolveStatus::InfeasibleRelaxed => "infeasible_relaxed",
        }
    }
}

#[derive(Debug, Clone)]
pub struct MpcSolution {
    pub controls: Vec<EvControl>,
    pub states: Vec<EvState>,
    /// Collision multipliers per obstacle per step.
    pub duals: Vec<Vec<[f64; 4]>>,
    pub status: SolveStatus,
    pub objective: f64,
    pub solve_time: f64,
    pub iterations: usize,
    /// Accepted l1-merit values, one per SQP iteration.
    pub merit_trace: Vec<f64>,
}

/// Per-family worst constraint violations of a candidate solution, measured
/// by re-simulating the controls and using [`dual_distance`] as the distance
/// oracle.
#[derive(Debug, Clone, Default)]
pub struct ViolationReport {
    pub dynamics: f64,
    pub velocity: f64,
    pub acceleration: f64,
    pub steering: f64,
    pub drivable: f64,
    pub terminal: f64,
    pub collision: f64,
}

impl ViolationReport {
    pub fn worst(&self) -> f64 {
        self.dynamics
            .max(self.velocity)
            .max(self.acceleration)
            .max(self.steering)
            .max(self.drivable)
            .max(self.terminal)
            .max(self.collision)
    }
}

/// Independent checker: re-simulate the control sequence and evaluate every
/// constraint family of the MPC problem.
pub fn verify_solution(
    sol: &MpcSolution,
    x0: &EvState,
    reference_maneuver_is_vt1: bool,
    obstacles: &[Vec<ObstacleStep>],
    params: &PlannerParams,
) -> Result<ViolationReport, PlannerError> {
    if sol.controls.is_empty() {
        return Err(PlannerError::EmptyHorizon);
    }
    let n_p = sol.controls.len();
    for seq in obstacles {
        if seq.len() < n_p {
            return Err(PlannerError::ShortObstacleSequence);
        }
    }
    let mut report = ViolationReport::default();
    let mut x = *x0;
    for (i, u) in sol.controls.iter().enumerate() {
        x = crate::models::ev_step_rk4(&x, u, &params.geometry, params.t);
        if i < sol.states.len() {
            let stored = sol.states[i].to_array();
            let resim = x.to_array();
            for k in 0..5 {
                report.dynamics = report.dynamics.max((stored[k] - resim[k]).abs());
            }
        }
        report.velocity = report
            .velocity
            .max(params.u_lower[0] - x.v)
            .max(x.v - params.u_upper[0]);
        report.acceleration = report
            .acceleration
            .max(params.u_lower[1] - x.a)
            .max(x.a - params.u_upper[1]);
        report.steering = report
            .steering
            .max(params.u_lower[2] - u.delta)
            .max(u.delta - params.u_upper[2]);
        let half_w = params.geometry.half_width();
        report.drivable = report
            .drivable
            .max(half_w - x.p_y)
            .max(x.p_y - (2.0 * params.lane_width - half_w));
        if reference_maneuver_is_vt1 {
            report.terminal = report
                .terminal
                .max(x.p_x - (params.p_x_ter - params.geometry.half_length()));
        }
        let p = Vector2::new(x.p_x, x.p_y);
        for seq in obstacles {
            let d = dual_distance(&p, &seq[i]);
            report.collision = report.collision.max(params.d_min - d);
        }
    }
    report.velocity = report.velocity.max(0.0);
    report.acceleration = report.acceleration.max(0.0);
    report.steering = report.steering.max(0.0);
    report.drivable = report.drivable.max(0.0);
    report.terminal = report.terminal.max(0.0);
    report.collision = report.collision.max(0.0);
    Ok(report)
}

/// Input-set substitution hook shared by the planner variants: the proposed
/// planner predicts with the estimated bounds, the robust baseline with the
/// friction-limited worst case, the deterministic baseline with the zero
/// singleton.
pub fn occupancy_for_planner(
    kind: PlannerKind,
    sv: &SvState,
    estimated: &AccelBounds,
    worst_case: &AccelBounds,
    n: usize,
    v_adm: f64,
    t: f64,
    geom: &VehicleGeometry,
    lateral_center: f64,
) -> OccupancyPrediction {
    let bounds = match kind {
        PlannerKind::Proposed => *estimated,
        PlannerKind::Rmpc => *worst_case,
        PlannerKind::Dmpc => AccelBounds::singleton(0.0),
    };
    OccupancyPrediction::predict(sv, &bounds, n, v_adm, t, geom, lateral_center)
}
