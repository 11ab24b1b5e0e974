//! Nonlinear least-squares extraction of emitter and coupling parameters.
//!
//! The fluorescence channel gives ν₂₁ and γ. With γ fixed (and α, γ₀
//! supplied), the transmission channel gives ν₂₁, C, ψ and I_e. A joint fit
//! over analyzer angles recovers the coupling together with the tip and
//! molecule Jones vectors.

mod joint;
mod lm;
mod models;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lineshape::{Lineshape, WeakField};
use crate::spectrum::Spectrum;

pub use joint::{joint_fit_polar, joint_intensity, JointFitResult, JointPolarProblem};
pub use lm::{minimize, LeastSquaresProblem, Minimization, Termination};
use models::FoldModel;
pub use models::{
    coupling_roots, fit_models, FluorescenceModel, ModelContext, ModelFactory, ParamBound, SpectralModel,
    TransmissionModel,
};

/// Default Debye-Waller factor for DBATT in p-terphenyl.
pub const DEFAULT_ALPHA: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub max_iters: usize,
    /// Relative cost-reduction tolerance.
    pub ftol: f64,
    /// Relative step tolerance.
    pub xtol: f64,
    pub damping_init: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            ftol: 1e-10,
            xtol: 1e-10,
            damping_init: 1e-3,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ftol > 0.0 && self.xtol > 0.0 && self.damping_init > 0.0) {
            return Err(Error::domain("fit tolerances and damping must be positive"));
        }
        if self.max_iters == 0 {
            return Err(Error::domain("max_iters must be at least 1"));
        }
        Ok(())
    }
}

/// Quantities held fixed in a fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedParams {
    /// Homogeneous linewidth, usually from the fluorescence channel.
    pub gamma: Option<f64>,
    pub alpha: f64,
    /// `None` means unknown; γ₀ = γ is then substituted with a warning.
    pub gamma0: Option<f64>,
    pub omega: f64,
    pub k_ratio: f64,
}

impl Default for FixedParams {
    fn default() -> Self {
        Self {
            gamma: None,
            alpha: DEFAULT_ALPHA,
            gamma0: None,
            omega: 0.0,
            k_ratio: 1.0,
        }
    }
}

impl FixedParams {
    pub fn with_gamma(gamma: f64) -> Self {
        Self {
            gamma: Some(gamma),
            ..Default::default()
        }
    }
}

/// Off-resonant level of a spectrum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Baseline {
    pub level: f64,
    /// Sample standard deviation of the wing points.
    pub std: f64,
    /// Point-to-point noise from first differences in the wings, which
    /// ignores slow trends such as dispersive tails.
    pub noise: f64,
}

/// Mean and scatter of the outermost `wing_fraction` of points on each side.
pub fn estimate_baseline(spec: &Spectrum, wing_fraction: f64) -> Result<Baseline> {
    let n = spec.len();
    if n < 10 {
        return Err(Error::argument(format!(
            "baseline needs at least 10 points, got {n}"
        )));
    }
    if !(wing_fraction > 0.0 && wing_fraction <= 0.5) {
        return Err(Error::argument(format!(
            "wing fraction {wing_fraction} outside (0, 0.5]"
        )));
    }
    let k = ((n as f64 * wing_fraction).floor() as usize).max(2);
    let v = spec.values();
    let wings: Vec<f64> = v[..k].iter().chain(&v[n - k..]).copied().collect();
    let (level, var) = crate::synth::mean_var(&wings);
    let diffs: Vec<f64> = v[..k]
        .windows(2)
        .chain(v[n - k..].windows(2))
        .map(|w| w[1] - w[0])
        .collect();
    let noise = (diffs.iter().map(|d| d * d).sum::<f64>() / diffs.len() as f64 / 2.0).sqrt();
    Ok(Baseline {
        level,
        std: var.sqrt(),
        noise,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitParameter {
    pub name: String,
    pub value: f64,
    pub std_err: Option<f64>,
    pub free: bool,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub model: String,
    pub params: Vec<FitParameter>,
    /// Covariance over the free parameters, in `params` order.
    pub covariance: DMatrix<f64>,
    /// Set when JᵀWJ was singular and a pseudo-inverse was used.
    pub covariance_singular: bool,
    /// RMS of data − model, in the spectrum's unit.
    pub residual_rms: f64,
    pub chi2_reduced: f64,
    pub iterations: usize,
    pub converged: bool,
    pub termination: Termination,
    /// Cost at the start and after each accepted step.
    pub cost_history: Vec<f64>,
    pub warnings: Vec<String>,
}

impl FitResult {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.params.iter().find(|p| p.name == name).map(|p| p.value)
    }

    pub fn std_err(&self, name: &str) -> Option<f64> {
        self.params.iter().find(|p| p.name == name).and_then(|p| p.std_err)
    }

    pub fn free_values(&self) -> Vec<f64> {
        self.params.iter().filter(|p| p.free).map(|p| p.value).collect()
    }
}

/// Inverse standard deviations used as residual weights, or `None` for
/// an unweighted fit. Zero sigmas are floored at the smallest positive one.
pub(crate) fn residual_weights(spec: &Spectrum) -> Option<Vec<f64>> {
    let sigma = spec.sigma()?;
    let floor = sigma.iter().copied().filter(|s| *s > 0.0).fold(f64::INFINITY, f64::min);
    if !floor.is_finite() {
        return None;
    }
    Some(sigma.iter().map(|s| 1.0 / s.max(floor)).collect())
}

/// Weighted residual problem for one spectrum and one model.
pub struct SpectrumProblem<'a> {
    model: &'a dyn SpectralModel,
    spec: &'a Spectrum,
    weights: Option<Vec<f64>>,
    bounds: Vec<ParamBound>,
}

impl<'a> SpectrumProblem<'a> {
    pub fn new(model: &'a dyn SpectralModel, spec: &'a Spectrum) -> Self {
        Self {
            model,
            spec,
            weights: residual_weights(spec),
            bounds: model.bounds(),
        }
    }

    pub fn unweighted(model: &'a dyn SpectralModel, spec: &'a Spectrum) -> Self {
        Self {
            weights: None,
            ..Self::new(model, spec)
        }
    }

    fn weight(&self, i: usize) -> f64 {
        self.weights.as_ref().map_or(1.0, |w| w[i])
    }
}

impl LeastSquaresProblem for SpectrumProblem<'_> {
    fn num_params(&self) -> usize {
        self.model.param_names().len()
    }

    fn num_residuals(&self) -> usize {
        self.spec.len()
    }

    fn residuals(&self, x: &[f64], out: &mut [f64]) {
        for (i, (nu, y)) in self.spec.iter().enumerate() {
            out[i] = self.weight(i) * (self.model.eval(nu, x) - y);
        }
    }

    fn jacobian(&self, x: &[f64], out: &mut DMatrix<f64>) {
        let mut g = vec![0.0; self.num_params()];
        for (i, nu) in self.spec.detunings().iter().enumerate() {
            self.model.gradient(*nu, x, &mut g);
            let w = self.weight(i);
            for (j, gj) in g.iter().enumerate() {
                out[(i, j)] = w * gj;
            }
        }
    }

    fn project(&self, x: &mut [f64]) {
        self.model.canonicalize(x);
        for (v, b) in x.iter_mut().zip(&self.bounds) {
            *v = b.apply(*v);
        }
    }
}

#[derive(Debug, Clone)]
pub struct CovarianceEstimate {
    pub matrix: DMatrix<f64>,
    pub chi2_reduced: f64,
    pub singular: bool,
}

/// `(JᵀWJ)⁻¹·χ²_red` at `params`, W from the spectrum's sigma column.
pub fn covariance_estimate(model: &dyn SpectralModel, params: &[f64], spec: &Spectrum) -> CovarianceEstimate {
    let problem = SpectrumProblem::new(model, spec);
    covariance_of(&problem, params)
}

pub(crate) fn covariance_of<P: LeastSquaresProblem + ?Sized>(problem: &P, params: &[f64]) -> CovarianceEstimate {
    let m = problem.num_residuals();
    let n = problem.num_params();
    let mut r = vec![0.0; m];
    problem.residuals(params, &mut r);
    let mut jac = DMatrix::zeros(m, n);
    problem.jacobian(params, &mut jac);
    let dof = m.saturating_sub(n).max(1) as f64;
    let chi2_reduced = r.iter().map(|v| v * v).sum::<f64>() / dof;

    let info = jac.tr_mul(&jac);
    let svd = info.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let singular = !(smin > smax * 1e-13) || smax == 0.0;
    let inverse = if singular {
        svd.pseudo_inverse(smax * 1e-13).unwrap_or_else(|_| DMatrix::zeros(n, n))
    } else {
        info.cholesky()
            .map(|c| c.inverse())
            .unwrap_or_else(|| svd.pseudo_inverse(0.0).unwrap_or_else(|_| DMatrix::zeros(n, n)))
    };
    let mut matrix = inverse * chi2_reduced;
    // symmetrize away round-off
    matrix = (&matrix + matrix.transpose()) * 0.5;
    CovarianceEstimate {
        matrix,
        chi2_reduced,
        singular,
    }
}

/// Fits any registered model to a spectrum from its own initial guess.
pub fn fit_spectrum(model: &dyn SpectralModel, spec: &Spectrum, cfg: &FitConfig) -> Result<FitResult> {
    let x0 = model.initial_guess(spec)?;
    fit_spectrum_from(model, spec, &x0, cfg)
}

pub fn fit_spectrum_from(
    model: &dyn SpectralModel,
    spec: &Spectrum,
    x0: &[f64],
    cfg: &FitConfig,
) -> Result<FitResult> {
    cfg.validate()?;
    let problem = SpectrumProblem::new(model, spec);
    let out = minimize(&problem, x0, cfg);
    let cov = covariance_of(&problem, &out.x);

    let residual_rms = (spec
        .iter()
        .map(|(nu, y)| (model.eval(nu, &out.x) - y).powi(2))
        .sum::<f64>()
        / spec.len() as f64)
        .sqrt();

    let mut params: Vec<FitParameter> = model
        .param_names()
        .iter()
        .zip(&out.x)
        .enumerate()
        .map(|(i, (name, v))| FitParameter {
            name: name.to_string(),
            value: *v,
            std_err: Some(cov.matrix[(i, i)].max(0.0).sqrt()),
            free: true,
        })
        .collect();
    params.extend(model.fixed().into_iter().map(|(name, value)| FitParameter {
        name: name.to_string(),
        value,
        std_err: None,
        free: false,
    }));

    let mut warnings = model.warnings();
    if cov.singular {
        warnings.push("singular normal matrix; covariance from pseudo-inverse".into());
    }
    if !out.termination.converged() {
        warnings.push(format!("fit did not converge ({:?})", out.termination));
    }

    Ok(FitResult {
        model: model.name().to_string(),
        params,
        covariance: cov.matrix,
        covariance_singular: cov.singular,
        residual_rms,
        chi2_reduced: cov.chi2_reduced,
        iterations: out.iterations,
        converged: out.termination.converged(),
        termination: out.termination,
        cost_history: out.cost_history,
        warnings,
    })
}

/// Lorentzian fit of a fluorescence-excitation spectrum; γ is the FWHM.
pub fn fit_fluorescence(spec: &Spectrum, cfg: &FitConfig) -> Result<FitResult> {
    fit_fluorescence_with(spec, &WeakField, cfg)
}

pub fn fit_fluorescence_with(
    spec: &Spectrum,
    shape: &'static dyn Lineshape,
    cfg: &FitConfig,
) -> Result<FitResult> {
    let model = FluorescenceModel::new(&ModelContext::new(FixedParams::default(), shape));
    fit_spectrum(&model, spec, cfg)
}

/// Transmission fit for (ν₂₁, C, ψ, I_e) with γ, α, γ₀ held fixed.
///
/// Reports the extinction-dominated solution. The other `(C, ψ)` that
/// reproduces the same spectrum, if distinct, is noted in the warnings.
pub fn fit_transmission(spec: &Spectrum, ctx: &ModelContext, cfg: &FitConfig) -> Result<FitResult> {
    let model = TransmissionModel::new(ctx)?;
    let mut fit = fit_spectrum(&model, spec, cfg)?;
    // The minimizer can wander into the other basin; both give the same
    // spectrum, so move over exactly and polish there.
    if let Some((c, psi)) = alternative_coupling(&fit).filter(|alt| Some(alt.0) < fit.get("c_amp")) {
        let mut x = fit.free_values();
        x[1] = c;
        x[2] = psi;
        let mut swapped = fit_spectrum_from(&model, spec, &x, cfg)?;
        swapped.iterations += fit.iterations;
        let mut history = std::mem::take(&mut fit.cost_history);
        let last = history.last().copied().unwrap_or(f64::INFINITY);
        history.extend(swapped.cost_history.iter().copied().filter(|&v| v <= last));
        swapped.cost_history = history;
        fit = swapped;
    }
    let fold = FoldModel::new(&model);
    let (c, psi) = (fit.get("c_amp").unwrap_or(0.0), fit.get("psi").unwrap_or(0.0));
    if psi.sin() > 0.0 && (!fit.converged || fold.offset(c, psi).abs() < 0.05) {
        if let Some(on_fold) = fit_on_fold(&fold, spec, &fit, cfg)? {
            fit = on_fold;
        }
    }
    if let Some(alt) = alternative_coupling(&fit) {
        fit.warnings.push(format!(
            "equivalent solution c_amp = {:.6e}, psi = {:.6} fits identically",
            alt.0, alt.1
        ));
    }
    Ok(fit)
}

fn weighted_cost(model: &dyn SpectralModel, spec: &Spectrum, x: &[f64]) -> f64 {
    let problem = SpectrumProblem::new(model, spec);
    let mut r = vec![0.0; spec.len()];
    problem.residuals(x, &mut r);
    0.5 * r.iter().map(|v| v * v).sum::<f64>()
}

/// Refits on the fold through `fit`'s ψ; returns the result in the full
/// four-parameter form when it is at least as good.
fn fit_on_fold(fold: &FoldModel<'_>, spec: &Spectrum, fit: &FitResult, cfg: &FitConfig) -> Result<Option<FitResult>> {
    let x = fit.free_values();
    let res = fit_spectrum_from(fold, spec, &[x[0], x[2], x[3]], cfg)?;
    let y = res.free_values();
    let full = fold.expand(&y);
    if weighted_cost(fold, spec, &y) > weighted_cost(fold.inner_model(), spec, &x) {
        return Ok(None);
    }
    // Σ₄ = M Σ₃ Mᵀ for the map (ν₂₁, ψ, I_e) → (ν₂₁, C(ψ), ψ, I_e).
    let mut m = DMatrix::zeros(4, 3);
    m[(0, 0)] = 1.0;
    m[(1, 1)] = fold.slope(y[1]);
    m[(2, 1)] = 1.0;
    m[(3, 2)] = 1.0;
    let covariance = &m * &res.covariance * m.transpose();

    let mut params: Vec<FitParameter> = ["nu21", "c_amp", "psi", "i_e"]
        .iter()
        .zip(full)
        .enumerate()
        .map(|(i, (name, value))| FitParameter {
            name: name.to_string(),
            value,
            std_err: Some(covariance[(i, i)].max(0.0).sqrt()),
            free: true,
        })
        .collect();
    params.extend(res.params.iter().filter(|p| !p.free).cloned());

    let mut history = fit.cost_history.clone();
    let last = history.last().copied().unwrap_or(f64::INFINITY);
    history.extend(res.cost_history.iter().copied().filter(|&v| v <= last));
    let mut warnings = res.warnings.clone();
    warnings.push(
        "solution lies where the two equivalent (c_amp, psi) solutions merge; c_amp is tied to psi there".into(),
    );
    Ok(Some(FitResult {
        params,
        covariance,
        iterations: fit.iterations + res.iterations,
        cost_history: history,
        warnings,
        ..res
    }))
}

/// The second `(C, ψ)` root for a transmission fit, when it is distinct.
pub fn alternative_coupling(fit: &FitResult) -> Option<(f64, f64)> {
    let get = |k| fit.get(k);
    let (c, psi, gamma, alpha, gamma0) = (get("c_amp")?, get("psi")?, get("gamma")?, get("alpha")?, get("gamma0")?);
    let g = gamma / (alpha * gamma0);
    let a = c * c * g - c * gamma * psi.sin();
    let roots = coupling_roots(a, c * psi.cos(), g, gamma);
    roots
        .into_iter()
        .max_by(|x, y| (x.0 - c).abs().total_cmp(&(y.0 - c).abs()))
        .filter(|r| (r.0 - c).abs() > 1e-6 * c.max(1e-12))
}
