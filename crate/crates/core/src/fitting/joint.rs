//! Simultaneous fit of transmission spectra recorded at many analyzer angles.
//!
//! Parameters: `[nu21, i_e, tip_a, tip_delta, mol_xr, mol_xi, mol_yr, mol_yi]`.
//! The tip field is the unit vector `(cos a, e^{iδ} sin a)`, which fixes the
//! common amplitude and phase. The molecular field `w` is measured in the
//! same gauge and already carries the coupling strength and phase, so at
//! analyzer angle θ
//!
//! ```text
//! I(ν; θ) = I_e [ |p_t|² + G·L·|p_w|² − 2L·Re{ conj(p_t)·p_w·(Δ − iγ/2) } ]
//! ```
//!
//! with `p = x·cos θ + y·sin θ` and G = γ/(αγ₀).

use std::collections::BTreeSet;
use std::f64::consts::PI;

use nalgebra::{DMatrix, Matrix3, Vector3};
use num_complex::Complex64;

use super::models::{argmax_by, emitter, linear_terms, smooth, ParamBound};
use super::{
    covariance_of, estimate_baseline, minimize, residual_weights, FitConfig, FitParameter,
    FitResult, LeastSquaresProblem, ModelContext,
};
use crate::error::{Error, Result};
use crate::lineshape::{wrap_phase, EmitterParams, Lineshape, ModalCoupling};
use crate::polarization::{fold_angle, project, AnalyzerScan, JonesField, PolarizationSetup};
use crate::spectrum::Spectrum;

const PARAM_NAMES: [&str; 8] = [
    "nu21", "i_e", "tip_a", "tip_delta", "mol_xr", "mol_xi", "mol_yr", "mol_yi",
];

/// Detected intensity for arbitrary (unnormalized) tip and molecular fields.
///
/// Normalizing by the tip power makes the result invariant under any common
/// complex rescaling of both fields.
pub fn joint_intensity(
    p: &EmitterParams,
    shape: &dyn Lineshape,
    i_e: f64,
    e_tip: &JonesField,
    e_mol: &JonesField,
    theta: f64,
    nu: f64,
) -> f64 {
    let pt = project(e_tip, theta);
    let pw = project(e_mol, theta);
    let d = nu - p.nu21;
    let l = shape.value(p, d);
    let cross = (pt.conj() * pw * Complex64::new(d, -0.5 * p.gamma)).re;
    i_e / e_tip.power() * (pt.norm_sqr() + p.incoherent_weight() * l * pw.norm_sqr() - 2.0 * l * cross)
}

fn tip_from(x: &[f64]) -> (Complex64, Complex64) {
    (
        Complex64::new(x[2].cos(), 0.0),
        Complex64::from_polar(x[2].sin(), x[3]),
    )
}

fn mol_from(x: &[f64]) -> (Complex64, Complex64) {
    (Complex64::new(x[4], x[5]), Complex64::new(x[6], x[7]))
}

/// Stacked residuals over every angle of an analyzer scan.
pub struct JointPolarProblem<'a> {
    thetas: &'a [f64],
    spectra: &'a [Spectrum],
    weights: Vec<Option<Vec<f64>>>,
    ctx: ModelContext,
    gamma: f64,
    offsets: Vec<usize>,
    bounds: [ParamBound; 8],
}

impl<'a> JointPolarProblem<'a> {
    pub fn new(scan: &'a AnalyzerScan, ctx: &ModelContext) -> Result<Self> {
        if scan.len() < 4 {
            return Err(Error::Degenerate(format!(
                "joint fit needs at least 4 analyzer angles, got {}",
                scan.len()
            )));
        }
        let distinct: BTreeSet<u64> = scan
            .thetas
            .iter()
            .map(|t| (fold_angle(*t) * 1e9).round() as u64)
            .collect();
        if distinct.len() < 3 {
            return Err(Error::Degenerate(format!(
                "joint fit needs at least 3 distinct analyzer angles, got {}",
                distinct.len()
            )));
        }
        let gamma = ctx
            .fixed
            .gamma
            .ok_or_else(|| Error::argument("joint fit needs a fixed gamma"))?;
        emitter(&ctx.fixed, 0.0, gamma).validate()?;
        let mut offsets = Vec::with_capacity(scan.len() + 1);
        offsets.push(0);
        for s in &scan.spectra {
            offsets.push(offsets.last().unwrap() + s.len());
        }
        Ok(Self {
            thetas: &scan.thetas,
            spectra: &scan.spectra,
            weights: scan.spectra.iter().map(residual_weights).collect(),
            ctx: *ctx,
            gamma,
            offsets,
            bounds: [
                ParamBound::Free,
                ParamBound::at_least(f64::MIN_POSITIVE),
                ParamBound::Range {
                    lower: 0.0,
                    upper: PI / 2.0,
                },
                ParamBound::Periodic { period: 2.0 * PI },
                ParamBound::Free,
                ParamBound::Free,
                ParamBound::Free,
                ParamBound::Free,
            ],
        })
    }

    pub fn emitter(&self, nu21: f64) -> EmitterParams {
        emitter(&self.ctx.fixed, nu21, self.gamma)
    }

    /// Model intensity at analyzer angle `theta` and laser frequency `nu`.
    pub fn eval(&self, theta: f64, nu: f64, x: &[f64]) -> f64 {
        let p = self.emitter(x[0]);
        let (tx, ty) = tip_from(x);
        let (wx, wy) = mol_from(x);
        let (s, c) = theta.sin_cos();
        let pt = tx * c + ty * s;
        let pw = wx * c + wy * s;
        let d = nu - x[0];
        let l = self.ctx.lineshape.value(&p, d);
        let cross = (pt.conj() * pw * Complex64::new(d, -0.5 * self.gamma)).re;
        x[1] * (pt.norm_sqr() + p.incoherent_weight() * l * pw.norm_sqr() - 2.0 * l * cross)
    }

    fn gradient(&self, theta: f64, nu: f64, x: &[f64], out: &mut [f64]) {
        let p = self.emitter(x[0]);
        let shape = self.ctx.lineshape;
        let g = p.incoherent_weight();
        let ie = x[1];
        let (tx, ty) = tip_from(x);
        let (wx, wy) = mol_from(x);
        let (s, c) = theta.sin_cos();
        let pt = tx * c + ty * s;
        let pw = wx * c + wy * s;
        let d = nu - x[0];
        let l = shape.value(&p, d);
        let dl = shape.d_delta(&p, d);
        let dd = Complex64::new(d, -0.5 * self.gamma);
        let xc = pt.conj() * pw;

        let bracket = pt.norm_sqr() + g * l * pw.norm_sqr() - 2.0 * l * (xc * dd).re;
        let d_bracket_d_delta = g * dl * pw.norm_sqr() - 2.0 * dl * (xc * dd).re - 2.0 * l * xc.re;
        out[0] = -ie * d_bracket_d_delta;
        out[1] = bracket;

        // tip angle and relative phase
        let (sa, ca) = x[2].sin_cos();
        let e_delta = Complex64::from_polar(1.0, x[3]);
        let dpt_da = Complex64::new(-sa * c, 0.0) + e_delta * (ca * s);
        let dpt_dd = Complex64::i() * e_delta * (sa * s);
        for (j, dpt) in [(2, dpt_da), (3, dpt_dd)] {
            out[j] = ie * (2.0 * (pt.conj() * dpt).re - 2.0 * l * (dpt.conj() * pw * dd).re);
        }

        // molecular field components
        let dirs = [
            Complex64::new(c, 0.0),
            Complex64::new(0.0, c),
            Complex64::new(s, 0.0),
            Complex64::new(0.0, s),
        ];
        for (k, u) in dirs.iter().enumerate() {
            out[4 + k] = ie * (2.0 * g * l * (pw.conj() * u).re - 2.0 * l * (pt.conj() * u * dd).re);
        }
    }

    /// ½Σ(w·y)², the cost of a model that predicts zero everywhere.
    fn data_scale(&self) -> f64 {
        let mut total = 0.0;
        for (k, spec) in self.spectra.iter().enumerate() {
            for (i, y) in spec.values().iter().enumerate() {
                total += (self.weight(k, i) * y).powi(2);
            }
        }
        0.5 * total
    }

    fn weight(&self, k: usize, i: usize) -> f64 {
        self.weights[k].as_ref().map_or(1.0, |w| w[i])
    }

    /// Starting points: the closed-form estimate for both tip handedness
    /// choices, plus one seeded from the supplied tip guess.
    fn starts(&self, tip_guess: &JonesField, mol_guess: &JonesField) -> Result<Vec<Vec<f64>>> {
        let nu21 = self.resonance_estimate()?;
        let p = self.emitter(nu21);
        let mut terms = Vec::with_capacity(self.thetas.len());
        for s in self.spectra {
            let (sol, _) = linear_terms(s, &p, self.ctx.lineshape)
                .ok_or_else(|| Error::Degenerate("singular per-angle estimate".into()))?;
            terms.push(sol);
        }

        // baseline(θ) = (I_e/2)(1 + S1 cos 2θ + S2 sin 2θ) for a unit tip
        let mut ata = Matrix3::zeros();
        let mut atb = Vector3::zeros();
        for (theta, t) in self.thetas.iter().zip(&terms) {
            let row = Vector3::new(1.0, (2.0 * theta).cos(), (2.0 * theta).sin());
            ata += row * row.transpose();
            atb += row * t[0];
        }
        let q = ata
            .lu()
            .solve(&atb)
            .ok_or_else(|| Error::Degenerate("analyzer angles do not resolve the tip polarization".into()))?;
        if !(q[0] > 0.0) {
            return Err(Error::Degenerate("fitted excitation intensity is not positive".into()));
        }
        let i_e = 2.0 * q[0];
        let (mut s1, mut s2) = (q[1] / q[0], q[2] / q[0]);
        let lin = s1.hypot(s2);
        if lin > 1.0 {
            s1 /= lin;
            s2 /= lin;
        }
        let s3 = (1.0 - s1 * s1 - s2 * s2).max(0.0).sqrt();
        let a = 0.5 * s1.clamp(-1.0, 1.0).acos();

        let mut tips = vec![(a, s3.atan2(s2)), (a, (-s3).atan2(s2))];
        let g = tip_guess.gauge_fixed();
        tips.push((g.ey.norm().atan2(g.ex.norm()), g.ey.arg() - g.ex.arg()));

        // the molecular guess, moved into the tip's gauge
        let lead = if tip_guess.ex.norm() > 0.0 { tip_guess.ex } else { tip_guess.ey };
        let m = mol_guess.scaled(Complex64::from_polar(1.0 / tip_guess.power().sqrt(), -lead.arg()));

        Ok(tips
            .into_iter()
            .map(|(a, delta)| {
                let mut x = vec![nu21, i_e, a, wrap_phase(delta), 0.0, 0.0, 0.0, 0.0];
                let (wx, wy) = self.solve_mol(&x, &terms).unwrap_or((m.ex, m.ey));
                x[4..8].copy_from_slice(&[wx.re, wx.im, wy.re, wy.im]);
                x
            })
            .collect())
    }

    /// Molecular field from the per-angle terms `(baseline, a, b)`.
    ///
    /// Each angle fixes Re X = b/I_e and G|p_w|² − γ·Im X = a/I_e, where
    /// X = conj(p_t)·p_w. Starting from the weak-coupling limit (|p_w|² → 0)
    /// and iterating the linear solve for `w` converges to the
    /// extinction-dominated branch.
    fn solve_mol(&self, x: &[f64], terms: &[Vector3<f64>]) -> Option<(Complex64, Complex64)> {
        let (tx, ty) = tip_from(x);
        let g = self.emitter(x[0]).incoherent_weight();
        let rows: Vec<[Complex64; 2]> = self
            .thetas
            .iter()
            .map(|theta| {
                let (s, c) = theta.sin_cos();
                let pt = (tx * c + ty * s).conj();
                [pt * c, pt * s]
            })
            .collect();
        let mut a = [[Complex64::new(0.0, 0.0); 2]; 2];
        for row in &rows {
            for i in 0..2 {
                for j in 0..2 {
                    a[i][j] += row[i].conj() * row[j];
                }
            }
        }
        let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
        if !(det.norm() > 1e-14 * (a[0][0].norm() * a[1][1].norm())) {
            return None;
        }

        let mut w = (Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0));
        for _ in 0..100 {
            let mut b = [Complex64::new(0.0, 0.0); 2];
            for ((theta, row), t) in self.thetas.iter().zip(&rows).zip(terms) {
                let (s, c) = theta.sin_cos();
                let pw = w.0 * c + w.1 * s;
                let y = Complex64::new(t[2], (g * pw.norm_sqr() - t[1] / x[1]) * x[1] / self.gamma) / x[1];
                for i in 0..2 {
                    b[i] += row[i].conj() * y;
                }
            }
            let next = (
                (a[1][1] * b[0] - a[0][1] * b[1]) / det,
                (a[0][0] * b[1] - a[1][0] * b[0]) / det,
            );
            let change = (next.0 - w.0).norm() + (next.1 - w.1).norm();
            w = next;
            if !(change > 1e-12 * (w.0.norm() + w.1.norm())) {
                break;
            }
        }
        (w.0.is_finite() && w.1.is_finite()).then_some(w)
    }

    /// Detuning of the largest relative deviation across all angles, refined
    /// by the summed linear-fit residual over a ±γ window.
    fn resonance_estimate(&self) -> Result<f64> {
        let mut best = (0.0, f64::NEG_INFINITY);
        for s in self.spectra {
            let base = estimate_baseline(s, 0.15)?;
            if base.level <= 0.0 {
                continue;
            }
            let vis: Vec<f64> = s.values().iter().map(|v| (v - base.level) / base.level).collect();
            let sm = smooth(&vis, 2);
            let i = argmax_by(&sm, f64::abs);
            if sm[i].abs() > best.1 {
                best = (s.detunings()[i], sm[i].abs());
            }
        }
        if !best.1.is_finite() {
            return Err(Error::Degenerate("no angle has a positive baseline".into()));
        }
        let mut pick = (best.0, f64::INFINITY);
        for k in -8..=8 {
            let nu21 = best.0 + k as f64 * self.gamma / 8.0;
            let p = self.emitter(nu21);
            let rss: Option<f64> = self
                .spectra
                .iter()
                .map(|s| linear_terms(s, &p, self.ctx.lineshape).map(|(_, r)| r))
                .sum();
            if let Some(rss) = rss {
                if rss < pick.1 {
                    pick = (nu21, rss);
                }
            }
        }
        Ok(pick.0)
    }
}

impl LeastSquaresProblem for JointPolarProblem<'_> {
    fn num_params(&self) -> usize {
        8
    }

    fn num_residuals(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    fn residuals(&self, x: &[f64], out: &mut [f64]) {
        for (k, (theta, spec)) in self.thetas.iter().zip(self.spectra).enumerate() {
            let off = self.offsets[k];
            for (i, (nu, y)) in spec.iter().enumerate() {
                out[off + i] = self.weight(k, i) * (self.eval(*theta, nu, x) - y);
            }
        }
    }

    fn jacobian(&self, x: &[f64], out: &mut DMatrix<f64>) {
        let mut g = [0.0; 8];
        for (k, (theta, spec)) in self.thetas.iter().zip(self.spectra).enumerate() {
            let off = self.offsets[k];
            for (i, nu) in spec.detunings().iter().enumerate() {
                self.gradient(*theta, *nu, x, &mut g);
                let w = self.weight(k, i);
                for (j, gj) in g.iter().enumerate() {
                    out[(off + i, j)] = w * gj;
                }
            }
        }
    }

    fn project(&self, x: &mut [f64]) {
        for (v, b) in x.iter_mut().zip(&self.bounds) {
            *v = b.apply(*v);
        }
    }
}

/// Global parameter set from a joint analyzer-scan fit.
#[derive(Debug, Clone)]
pub struct JointFitResult {
    pub fit: FitResult,
    pub emitter: EmitterParams,
    /// Unit power, real non-negative x component.
    pub e_tip: JonesField,
    /// Molecular field in the tip's gauge; its magnitude carries C.
    pub e_mol: JonesField,
    /// Coupling at the tip's major axis.
    pub setup: PolarizationSetup,
    pub tip_extinction_ratio: f64,
    pub mol_extinction_ratio: f64,
    /// Molecular minus tip major-axis angle, folded into [−π/2, π/2).
    pub axis_offset: f64,
}

impl JointFitResult {
    pub fn intensity(&self, theta: f64, nu: f64, shape: &dyn Lineshape) -> f64 {
        self.setup.terms_at(theta).intensity(&self.emitter, nu, shape)
    }
}

fn signed_axis_offset(a: f64, b: f64) -> f64 {
    let d = fold_angle(b - a);
    if d >= PI / 2.0 {
        d - PI
    } else {
        d
    }
}

/// Fits every spectrum of `scan` with one emitter, coupling and pair of
/// Jones vectors. `ctx.fixed.gamma` must be set.
///
/// Like a single spectrum, a scan generally admits a second exact solution
/// with a stronger molecular field; the weaker (extinction-dominated) one
/// is returned.
///
/// `e_tip` seeds one of the starting points; `e_mol` only serves as a
/// fallback when the closed-form molecular estimate is singular. Both are
/// guesses up to a common complex factor.
pub fn joint_fit_polar(
    scan: &AnalyzerScan,
    e_tip: &JonesField,
    e_mol: &JonesField,
    ctx: &ModelContext,
    cfg: &FitConfig,
) -> Result<JointFitResult> {
    cfg.validate()?;
    let problem = JointPolarProblem::new(scan, ctx)?;
    let starts = problem.starts(e_tip, e_mol)?;

    // Two exact solutions exist in general, as for a single spectrum; among
    // starts that reach the same cost keep the extinction-dominated one.
    let runs: Vec<_> = starts.iter().map(|x0| minimize(&problem, x0, cfg)).collect();
    let min_cost = runs.iter().map(|r| r.cost).fold(f64::INFINITY, f64::min);
    let tol = 1e-6 * min_cost + 1e-18 * problem.data_scale();
    let mol_power = |x: &[f64]| x[4..8].iter().map(|v| v * v).sum::<f64>();
    let best = runs
        .into_iter()
        .filter(|r| r.cost <= min_cost + tol)
        .min_by(|a, b| mol_power(&a.x).total_cmp(&mol_power(&b.x)))
        .expect("at least one start");
    let x = &best.x;
    let cov = covariance_of(&problem, x);

    let (tx, ty) = tip_from(x);
    let (wx, wy) = mol_from(x);
    let tip = JonesField::new(tx, ty)?;
    let mol = JonesField::new(wx, wy)
        .map_err(|_| Error::Degenerate("fitted molecular field vanishes".into()))?;
    let p = problem.emitter(x[0]);
    let theta_ref = tip.axis_angle();
    let ratio = project(&mol, theta_ref) / project(&tip, theta_ref);
    let base = ModalCoupling::new(ratio.norm(), ratio.arg(), x[1] * project(&tip, theta_ref).norm_sqr())?;
    let setup = PolarizationSetup::with_reference(tip, mol, base, theta_ref)?;

    let n = problem.num_residuals() as f64;
    let mut sq = 0.0;
    for (theta, spec) in scan.thetas.iter().zip(&scan.spectra) {
        for (nu, y) in spec.iter() {
            sq += (problem.eval(*theta, nu, x) - y).powi(2);
        }
    }

    let mut params: Vec<FitParameter> = PARAM_NAMES
        .iter()
        .zip(x)
        .enumerate()
        .map(|(i, (name, v))| FitParameter {
            name: name.to_string(),
            value: *v,
            std_err: Some(cov.matrix[(i, i)].max(0.0).sqrt()),
            free: true,
        })
        .collect();
    for (name, value) in [("gamma", p.gamma), ("alpha", p.alpha), ("gamma0", p.gamma0)] {
        params.push(FitParameter {
            name: name.into(),
            value,
            std_err: None,
            free: false,
        });
    }

    let mut warnings = Vec::new();
    if ctx.fixed.gamma0.is_none() {
        warnings.push("gamma0 unknown; using gamma0 = gamma for the direct-emission term".into());
    }
    if cov.singular {
        warnings.push("singular normal matrix; covariance from pseudo-inverse".into());
    }
    if !best.termination.converged() {
        warnings.push(format!("fit did not converge ({:?})", best.termination));
    }

    Ok(JointFitResult {
        fit: FitResult {
            model: "joint_polar".into(),
            params,
            covariance: cov.matrix,
            covariance_singular: cov.singular,
            residual_rms: (sq / n).sqrt(),
            chi2_reduced: cov.chi2_reduced,
            iterations: best.iterations,
            converged: best.termination.converged(),
            termination: best.termination,
            cost_history: best.cost_history,
            warnings,
        },
        emitter: p,
        tip_extinction_ratio: tip.extinction_ratio(),
        mol_extinction_ratio: mol.extinction_ratio(),
        axis_offset: signed_axis_offset(tip.axis_angle(), mol.axis_angle()),
        e_tip: tip,
        e_mol: mol,
        setup,
    })
}
