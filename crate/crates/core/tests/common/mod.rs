//! Oracles shared by the integration tests. Nothing here calls into the
//! library's model code, so agreement with it is an independent check.

#![allow(dead_code)]

use extinction::fitting::LeastSquaresProblem;
use nalgebra::DMatrix;

/// Transmission through a weakly driven two-level emitter, written out
/// term by term from the field picture.
#[allow(clippy::too_many_arguments)]
pub fn oracle_intensity(
    delta: f64,
    c: f64,
    psi: f64,
    gamma: f64,
    gamma0: f64,
    alpha: f64,
    i_e: f64,
) -> f64 {
    let l = 1.0 / (delta * delta + gamma * gamma / 4.0);
    let direct = c * c * gamma / (alpha * gamma0) * l;
    let absorptive = -c * gamma * psi.sin() * l;
    let dispersive = -2.0 * c * delta * psi.cos() * l;
    i_e * (1.0 + direct + absorptive + dispersive)
}

/// Lorentzian peak `amp·L(ν − ν₀) + background`.
pub fn oracle_fluorescence(nu: f64, nu0: f64, gamma: f64, amp: f64, background: f64) -> f64 {
    let d = nu - nu0;
    amp / (d * d + gamma * gamma / 4.0) + background
}

fn residuals_at<P: LeastSquaresProblem + ?Sized>(problem: &P, x: &[f64]) -> Vec<f64> {
    let mut r = vec![0.0; problem.num_residuals()];
    problem.residuals(x, &mut r);
    r
}

/// Central differences with one Richardson extrapolation step
/// (truncation error O(h⁴)).
pub fn fd_jacobian<P: LeastSquaresProblem + ?Sized>(problem: &P, x: &[f64]) -> DMatrix<f64> {
    let (m, n) = (problem.num_residuals(), problem.num_params());
    let mut jac = DMatrix::zeros(m, n);
    for j in 0..n {
        let h = 1e-3 * x[j].abs().max(1.0);
        let central = |h: f64| {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[j] += h;
            xm[j] -= h;
            let (rp, rm) = (residuals_at(problem, &xp), residuals_at(problem, &xm));
            rp.iter().zip(&rm).map(|(a, b)| (a - b) / (2.0 * h)).collect::<Vec<_>>()
        };
        let (d1, d2) = (central(h), central(h / 2.0));
        for i in 0..m {
            jac[(i, j)] = (4.0 * d2[i] - d1[i]) / 3.0;
        }
    }
    jac
}

pub fn analytic_jacobian<P: LeastSquaresProblem + ?Sized>(problem: &P, x: &[f64]) -> DMatrix<f64> {
    let mut jac = DMatrix::zeros(problem.num_residuals(), problem.num_params());
    problem.jacobian(x, &mut jac);
    jac
}

/// Largest column-wise relative difference ‖a_j − b_j‖ / ‖b_j‖.
pub fn max_column_error(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (0..a.ncols())
        .map(|j| {
            let diff = (a.column(j) - b.column(j)).norm();
            let scale = b.column(j).norm();
            if scale == 0.0 {
                diff
            } else {
                diff / scale
            }
        })
        .fold(0.0, f64::max)
}

pub fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Composite Simpson rule over `n` (even) intervals.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    assert!(n.is_multiple_of(2));
    let h = (b - a) / n as f64;
    let mut sum = f(a) + f(b);
    for k in 1..n {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        sum += w * f(a + k as f64 * h);
    }
    sum * h / 3.0
}
