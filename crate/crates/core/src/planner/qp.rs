//! Dense convex QP solver for the SQP subproblems:
//!
//! ```text
//!     minimize    1/2 x' P x + q' x
//!     subject to  G x <= h
//! ```
//!
//! with `P` positive definite (the caller regularizes). Infeasible-start
//! primal-dual interior point with Mehrotra predictor-corrector steps; the
//! constraint matrix is stored as sparse rows because most rows (bounds,
//! trust regions, multiplier nonnegativity) touch one or two variables.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone)]
pub struct QpProblem {
    /// Symmetric positive-definite cost matrix.
    pub hessian: DMatrix<f64>,
    pub gradient: DVector<f64>,
    /// Sparse rows of `G`.
    pub rows: Vec<Vec<(usize, f64)>>,
    /// Right-hand side `h`.
    pub rhs: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
}

const MAX_ITERATIONS: usize = 60;
const GAP_TOL: f64 = 1e-10;
const RESIDUAL_TOL: f64 = 1e-8;

pub fn solve(problem: &QpProblem) -> QpSolution {
    let n = problem.gradient.len();
    let m = problem.rows.len();
    debug_assert_eq!(problem.hessian.nrows(), n);
    debug_assert_eq!(problem.rhs.len(), m);
    if m == 0 {
        // Unconstrained: single Newton solve.
        let mut h = problem.hessian.clone();
        let x = if cholesky_in_place(&mut h) {
            let mut rhs = -problem.gradient.clone();
            chol_solve(&h, &mut rhs);
            rhs
        } else {
            DVector::zeros(n)
        };
        return QpSolution {
            x,
            converged: true,
            iterations: 0,
        };
    }

    // Normalize the objective scale (argmin-invariant) so penalty-sized
    // gradients do not wreck the starting point's dual residual.
    let obj_scale = 1.0 / problem.gradient.amax().max(1.0);
    let hessian = &problem.hessian * obj_scale;
    let gradient = &problem.gradient * obj_scale;
    let rows = &problem.rows;
    let rhs_all = &problem.rhs;

    let mut x = DVector::<f64>::zeros(n);
    let mut s = DVector::<f64>::zeros(m);
    let mut w = DVector::<f64>::zeros(m);
    for i in 0..m {
        s[i] = rhs_all[i].max(1.0);
        w[i] = 1.0;
    }

    let row_dot =
        |row: &[(usize, f64)], v: &DVector<f64>| -> f64 { row.iter().map(|&(j, a)| a * v[j]).sum() };

    let mut factor = DMatrix::<f64>::zeros(n, n);
    let mut best_x = x.clone();
    let mut best_score = f64::INFINITY;
    let mut stalls = 0usize;

    for iter in 0..MAX_ITERATIONS {
        // Residuals.
        let mut r_dual = &hessian * &x + &gradient;
        for (i, row) in rows.iter().enumerate() {
            for &(j, a) in row {
                r_dual[j] += a * w[i];
            }
        }
        let mut r_prim = DVector::<f64>::zeros(m);
        for (i, row) in rows.iter().enumerate() {
            r_prim[i] = row_dot(row, &x) + s[i] - rhs_all[i];
        }
        let mu = s.dot(&w) / m as f64;

        let rd_norm = r_dual.amax();
        let rp_norm = r_prim.amax();
        if std::env::var_os("QP_DEBUG").is_some() {
            eprintln!("qp iter {iter}: mu={mu:.3e} rp={rp_norm:.3e} rd={rd_norm:.3e}");
        }
        if mu < GAP_TOL && rp_norm < RESIDUAL_TOL && rd_norm < RESIDUAL_TOL * (1.0 + gradient.amax())
        {
            return QpSolution {
                x,
                converged: true,
                iterations: iter,
            };
        }
        let score = mu + rp_norm + rd_norm;
        if score < best_score {
            best_score = score;
            best_x.copy_from(&x);
        }

        // Normal matrix M = P + G' D G with D = diag(w/s).
        let refill = |factor: &mut DMatrix<f64>, jitter: f64| {
            factor.copy_from(&hessian);
            for (i, row) in rows.iter().enumerate() {
                let d = (w[i] / s[i]).clamp(1e-12, 1e14);
                for &(j, a) in row {
                    for &(k, b) in row {
                        if k >= j {
                            factor[(j, k)] += d * a * b;
                        }
                    }
                }
            }
            for j in 0..n {
                factor[(j, j)] += jitter;
                for k in (j + 1)..n {
                    factor[(k, j)] = factor[(j, k)];
                }
            }
        };
        refill(&mut factor, 0.0);
        let mut jitter = 0.0;
        while !cholesky_in_place(&mut factor) {
            jitter = if jitter == 0.0 { 1e-10 } else { jitter * 100.0 };
            if jitter > 1.0 {
                return QpSolution {
                    x: best_x,
                    converged: false,
                    iterations: iter,
                };
            }
            refill(&mut factor, jitter);
        }

        // Reduced Newton solve for a given complementarity target:
        //   w ds + s dw = target - s.w
        //   ds = -r_prim - G dx
        //   (P + G' D G) dx = -r_dual - G'[D r_prim + (target - s.w)/s]
        let solve_direction =
            |target: &DVector<f64>| -> (DVector<f64>, DVector<f64>, DVector<f64>) {
                let mut rhs = -r_dual.clone();
                for (i, row) in rows.iter().enumerate() {
                    let coeff = (w[i] / s[i]) * r_prim[i] + (target[i] - s[i] * w[i]) / s[i];
                    for &(j, a) in row {
                        rhs[j] -= a * coeff;
                    }
                }
                chol_solve(&factor, &mut rhs);
                let dx = rhs;
                let mut dw = DVector::<f64>::zeros(m);
                let mut ds = DVector::<f64>::zeros(m);
                for (i, row) in rows.iter().enumerate() {
                    let gdx = row_dot(row, &dx);
                    dw[i] = (w[i] / s[i]) * (gdx + r_prim[i]) + (target[i] - s[i] * w[i]) / s[i];
                    ds[i] = -r_prim[i] - gdx;
                }
                (dx, ds, dw)
            };

        // Affine (predictor) direction.
        let zero_target = DVector::<f64>::zeros(m);
        let (_dx_aff, ds_aff, dw_aff) = solve_direction(&zero_target);
        let alpha_aff = step_length(&s, &ds_aff).min(step_length(&w, &dw_aff));
        let mu_aff = (0..m)
            .map(|i| (s[i] + alpha_aff * ds_aff[i]) * (w[i] + alpha_aff * dw_aff[i]))
            .sum::<f64>()
            / m as f64;
        let sigma = (mu_aff / mu).powi(3).clamp(1e-8, 1.0);

        // Corrector.
        let mut target = DVector::<f64>::zeros(m);
        for i in 0..m {
            target[i] = sigma * mu - ds_aff[i] * dw_aff[i];
        }
        let (dx, ds, dw) = solve_direction(&target);
        let alpha = (0.995 * step_length(&s, &ds).min(step_length(&w, &dw))).min(1.0);
        if alpha < 1e-11 {
            stalls += 1;
            if stalls >= 3 {
                return QpSolution {
                    x: best_x,
                    converged: false,
                    iterations: iter,
                };
            }
        } else {
            stalls = 0;
        }

        x += alpha * &dx;
        s += alpha * &ds;
        w += alpha * &dw;
    }

    QpSolution {
        x: best_x,
        converged: false,
        iterations: MAX_ITERATIONS,
    }
}

/// Largest step in [0, 1] keeping `v + alpha dv > 0`.
fn step_length(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    let mut alpha = 1.0_f64;
    for i in 0..v.len() {
        if dv[i] < 0.0 {
            alpha = alpha.min(-v[i] / dv[i]);
        }
    }
    alpha
}

/// In-place lower Cholesky on column-major storage; false if not positive
/// definite.
fn cholesky_in_place(m: &mut DMatrix<f64>) -> bool {
    let n = m.nrows();
    let data = m.as_mut_slice();
    for j in 0..n {
        let mut d = data[j * n + j];
        for k in 0..j {
            let l = data[k * n + j];
            d -= l * l;
        }
        if d <= 0.0 || !d.is_finite() {
            return false;
        }
        let d = d.sqrt();
        data[j * n + j] = d;
        for i in (j + 1)..n {
            let mut v = data[j * n + i];
            for k in 0..j {
                v -= data[k * n + i] * data[k * n + j];
            }
            data[j * n + i] = v / d;
        }
    }
    true
}

/// Solve `L L' x = b` in place given the Cholesky factor from
/// [`cholesky_in_place`].
fn chol_solve(l: &DMatrix<f64>, b: &mut DVector<f64>) {
    let n = l.nrows();
    let data = l.as_slice();
    // Forward: L y = b
    for i in 0..n {
        let mut v = b[i];
        for k in 0..i {
            v -= data[k * n + i] * b[k];
        }
        b[i] = v / data[i * n + i];
    }
    // Backward: L' x = y
    for i in (0..n).rev() {
        let mut v = b[i];
        for k in (i + 1)..n {
            v -= data[i * n + k] * b[k];
        }
        b[i] = v / data[i * n + i];
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{rngs::StdRng, Rng, SeedableRng};

    fn dense_row(v: &[f64]) -> Vec<(usize, f64)> {
        v.iter()
            .enumerate()
            .filter(|(_, &a)| a != 0.0)
            .map(|(j, &a)| (j, a))
            .collect()
    }

    #[test]
    fn unconstrained_newton() {
        let p = QpProblem {
            hessian: DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 4.0])),
            gradient: DVector::from_vec(vec![-2.0, -8.0]),
            rows: vec![],
            rhs: vec![],
        };
        let sol = solve(&p);
        assert_relative_eq!(sol.x[0], 1.0, epsilon = 1e-9);
        assert_relative_eq!(sol.x[1], 2.0, epsilon = 1e-9);
    }

    #[test]
    fn active_bound() {
        // min (x-1)^2 s.t. x <= 0  ->  x = 0
        let p = QpProblem {
            hessian: DMatrix::from_element(1, 1, 2.0),
            gradient: DVector::from_vec(vec![-2.0]),
            rows: vec![vec![(0, 1.0)]],
            rhs: vec![0.0],
        };
        let sol = solve(&p);
        assert!(sol.converged);
        assert_relative_eq!(sol.x[0], 0.0, epsilon = 1e-7);
    }

    #[test]
    fn known_two_dim() {
        // min 1/2 (x^2 + y^2) + x  s.t.  x + 2y >= 1: optimum (-0.6, 0.8).
        let p = QpProblem {
            hessian: DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1.0])),
            gradient: DVector::from_vec(vec![1.0, 0.0]),
            rows: vec![dense_row(&[-1.0, -2.0])],
            rhs: vec![-1.0],
        };
        let sol = solve(&p);
        assert!(sol.converged);
        assert_relative_eq!(sol.x[0], -0.6, epsilon = 1e-6);
        assert_relative_eq!(sol.x[1], 0.8, epsilon = 1e-6);
    }

    #[test]
    fn infeasible_start_recovers() {
        // Constraint violated at x = 0: x >= 3 (written -x <= -3).
        let p = QpProblem {
            hessian: DMatrix::from_element(1, 1, 2.0),
            gradient: DVector::from_vec(vec![0.0]),
            rows: vec![vec![(0, -1.0)]],
            rhs: vec![-3.0],
        };
        let sol = solve(&p);
        assert!(sol.converged);
        assert_relative_eq!(sol.x[0], 3.0, epsilon = 1e-6);
    }

    #[test]
    fn penalty_scaled_slack_problem() {
        // Shape of the SQP subproblems: tiny curvature on a slack variable
        // with a large linear penalty, plus its nonnegativity row. The
        // solution drives the slack to the constraint residual.
        // min 0.5 u^2 + 1e4 s  s.t.  -u - s <= -2,  -s <= 0
        let mut h = DMatrix::zeros(2, 2);
        h[(0, 0)] = 1.0;
        h[(1, 1)] = 1e-9;
        let p = QpProblem {
            hessian: h,
            gradient: DVector::from_vec(vec![0.0, 1e4]),
            rows: vec![vec![(0, -1.0), (1, -1.0)], vec![(1, -1.0)]],
            rhs: vec![-2.0, 0.0],
        };
        let sol = solve(&p);
        assert!(sol.converged);
        assert_relative_eq!(sol.x[0], 2.0, epsilon = 1e-5);
        assert!(sol.x[1].abs() < 1e-6);
    }

    #[test]
    fn random_qps_satisfy_kkt() {
        let mut rng = StdRng::seed_from_u64(99);
        for _ in 0..50 {
            let n = rng.gen_range(2..8);
            let m = rng.gen_range(1..12);
            // P = A'A + I
            let a = DMatrix::<f64>::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let hessian = &a.transpose() * &a + DMatrix::<f64>::identity(n, n);
            let gradient = DVector::<f64>::from_fn(n, |_, _| rng.gen_range(-2.0..2.0));
            let mut rows = Vec::new();
            let mut rhs = Vec::new();
            for _ in 0..m {
                let row: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                rows.push(dense_row(&row));
                rhs.push(rng.gen_range(0.1..2.0));
            }
            let p = QpProblem {
                hessian,
                gradient,
                rows,
                rhs,
            };
            let sol = solve(&p);
            assert!(sol.converged);
            // Primal feasibility.
            for (row, &h) in p.rows.iter().zip(&p.rhs) {
                let v: f64 = row.iter().map(|&(j, a)| a * sol.x[j]).sum();
                assert!(v <= h + 1e-6, "violation {v} > {h}");
            }
            // Stationarity: P x + q + G' w = 0 for some w >= 0 supported on
            // active rows; verify by least squares over the active set.
            let grad = &p.hessian * &sol.x + &p.gradient;
            let active: Vec<usize> = (0..p.rows.len())
                .filter(|&i| {
                    let v: f64 = p.rows[i].iter().map(|&(j, a)| a * sol.x[j]).sum();
                    (v - p.rhs[i]).abs() < 1e-5
                })
                .collect();
            if active.is_empty() {
                assert!(
                    grad.amax() < 1e-5,
                    "unconstrained stationarity {}",
                    grad.amax()
                );
            } else {
                let at = DMatrix::<f64>::from_fn(grad.len(), active.len(), |r, c| {
                    p.rows[active[c]]
                        .iter()
                        .find(|&&(j, _)| j == r)
                        .map(|&(_, a)| a)
                        .unwrap_or(0.0)
                });
                let sol_w = at.clone().svd(true, true).solve(&(-&grad), 1e-12).unwrap();
                let residual = (&at * &sol_w + &grad).amax();
                assert!(residual < 1e-4, "stationarity residual {residual}");
            }
        }
    }
}
