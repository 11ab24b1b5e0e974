//! Damped least squares (Levenberg-Marquardt) with box projection.
//!
//! Minimizes `½‖r(x)‖²`. Each iteration solves
//! `(JᵀJ + λ·diag(JᵀJ)) δ = −Jᵀr`, projects `x + δ` back into the feasible
//! set and accepts the step only if the cost drops, so the sequence of
//! accepted costs is non-increasing.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use super::FitConfig;

pub trait LeastSquaresProblem {
    fn num_params(&self) -> usize;

    fn num_residuals(&self) -> usize;

    fn residuals(&self, x: &[f64], out: &mut [f64]);

    /// Row `i`, column `j` holds ∂r_i/∂x_j.
    fn jacobian(&self, x: &[f64], out: &mut DMatrix<f64>);

    /// Maps `x` into the feasible set: clamps, wraps periodic parameters
    /// and folds equivalent branches onto the canonical one.
    fn project(&self, _x: &mut [f64]) {}
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// Relative cost reduction fell below `ftol`.
    CostConverged,
    /// Relative step length fell below `xtol`.
    StepConverged,
    /// Residuals vanished (exact fit).
    ZeroResidual,
    MaxIterations,
    /// Damping grew without finding a descent step.
    Stalled,
}

impl Termination {
    pub fn converged(self) -> bool {
        matches!(
            self,
            Termination::CostConverged | Termination::StepConverged | Termination::ZeroResidual
        )
    }
}

#[derive(Debug, Clone)]
pub struct Minimization {
    pub x: Vec<f64>,
    pub cost: f64,
    pub iterations: usize,
    pub termination: Termination,
    /// Cost after the initial point and after every accepted step.
    pub cost_history: Vec<f64>,
}

fn cost_of(r: &[f64]) -> f64 {
    0.5 * r.iter().map(|v| v * v).sum::<f64>()
}

// Component-wise, so a large parameter (an intensity in cps, say) cannot
// mask an unconverged small one.
fn rel_step(x_old: &[f64], x_new: &[f64], xtol: f64) -> bool {
    x_old
        .iter()
        .zip(x_new)
        .all(|(a, b)| (a - b).abs() <= xtol * a.abs().max(1.0))
}

pub fn minimize<P: LeastSquaresProblem + ?Sized>(problem: &P, x0: &[f64], cfg: &FitConfig) -> Minimization {
    let n = problem.num_params();
    let m = problem.num_residuals();
    assert_eq!(x0.len(), n, "initial point has wrong dimension");

    let mut x = x0.to_vec();
    problem.project(&mut x);
    let mut r = vec![0.0; m];
    problem.residuals(&x, &mut r);
    let mut cost = cost_of(&r);
    let mut history = vec![cost];
    let mut jac = DMatrix::zeros(m, n);
    let mut lambda = cfg.damping_init;
    let mut r_trial = vec![0.0; m];
    let mut iterations = 0;

    let termination = 'outer: loop {
        if cost == 0.0 {
            break Termination::ZeroResidual;
        }
        if iterations >= cfg.max_iters {
            break Termination::MaxIterations;
        }
        iterations += 1;

        problem.jacobian(&x, &mut jac);
        let jtj = jac.tr_mul(&jac);
        let grad = jac.tr_mul(&DVector::from_column_slice(&r));
        let diag_floor = jtj.diagonal().max() * 1e-15 + f64::MIN_POSITIVE;

        // inner loop: raise damping until a step lowers the cost
        loop {
            let mut a = jtj.clone();
            for i in 0..n {
                a[(i, i)] += lambda * jtj[(i, i)].max(diag_floor);
            }
            let step = match a.cholesky() {
                Some(ch) => ch.solve(&(-&grad)),
                None => {
                    lambda *= 10.0;
                    if lambda > 1e20 {
                        break 'outer Termination::Stalled;
                    }
                    continue;
                }
            };
            let mut x_trial: Vec<f64> = x.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            problem.project(&mut x_trial);
            problem.residuals(&x_trial, &mut r_trial);
            let cost_trial = cost_of(&r_trial);

            if cost_trial.is_finite() && cost_trial < cost {
                let small_step = rel_step(&x, &x_trial, cfg.xtol);
                let small_gain = cost - cost_trial <= cfg.ftol * cost;
                x = x_trial;
                std::mem::swap(&mut r, &mut r_trial);
                cost = cost_trial;
                history.push(cost);
                lambda = (lambda / 10.0).max(1e-15);
                if small_gain {
                    break 'outer Termination::CostConverged;
                }
                if small_step {
                    break 'outer Termination::StepConverged;
                }
                break;
            }

            // a rejected step that is already negligible means we sit at
            // the minimum to working precision
            if rel_step(&x, &x_trial, cfg.xtol) {
                break 'outer Termination::StepConverged;
            }
            lambda *= 10.0;
            if lambda > 1e20 {
                break 'outer Termination::Stalled;
            }
        }
    };

    Minimization {
        x,
        cost,
        iterations,
        termination,
        cost_history: history,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Rosenbrock;

    impl LeastSquaresProblem for Rosenbrock {
        fn num_params(&self) -> usize {
            2
        }
        fn num_residuals(&self) -> usize {
            2
        }
        fn residuals(&self, x: &[f64], out: &mut [f64]) {
            out[0] = 10.0 * (x[1] - x[0] * x[0]);
            out[1] = 1.0 - x[0];
        }
        fn jacobian(&self, x: &[f64], out: &mut DMatrix<f64>) {
            out[(0, 0)] = -20.0 * x[0];
            out[(0, 1)] = 10.0;
            out[(1, 0)] = -1.0;
            out[(1, 1)] = 0.0;
        }
    }

    struct BoxedLine;

    // y = a·t fitted to data from a = −2 with a ≥ 0
    impl LeastSquaresProblem for BoxedLine {
        fn num_params(&self) -> usize {
            1
        }
        fn num_residuals(&self) -> usize {
            3
        }
        fn residuals(&self, x: &[f64], out: &mut [f64]) {
            for (i, o) in out.iter_mut().enumerate() {
                let t = i as f64 + 1.0;
                *o = x[0] * t + 2.0 * t;
            }
        }
        fn jacobian(&self, _x: &[f64], out: &mut DMatrix<f64>) {
            for i in 0..3 {
                out[(i, 0)] = i as f64 + 1.0;
            }
        }
        fn project(&self, x: &mut [f64]) {
            x[0] = x[0].max(0.0);
        }
    }

    #[test]
    fn solves_rosenbrock() {
        let out = minimize(&Rosenbrock, &[-1.2, 1.0], &FitConfig::default());
        assert!(out.termination.converged(), "{:?}", out.termination);
        assert!((out.x[0] - 1.0).abs() < 1e-8 && (out.x[1] - 1.0).abs() < 1e-8);
        assert!(out.cost_history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn respects_box() {
        let out = minimize(&BoxedLine, &[3.0], &FitConfig::default());
        assert_eq!(out.x[0], 0.0);
        assert!(out.termination.converged());
    }

    #[test]
    fn iteration_cap() {
        let cfg = FitConfig { max_iters: 1, ..Default::default() };
        let out = minimize(&Rosenbrock, &[-1.2, 1.0], &cfg);
        assert_eq!(out.termination, Termination::MaxIterations);
        assert!(!out.termination.converged());
    }
}
