//! Single-spectrum models the fitter can minimize against.

use std::f64::consts::PI;
use std::sync::OnceLock;

use nalgebra::{Matrix3, Vector3};

use super::{estimate_baseline, FixedParams};
use crate::error::{Error, Result};
use crate::lineshape::{wrap_phase, EmitterParams, Lineshape};
use crate::registry::Registry;
use crate::spectrum::Spectrum;

/// Admissible range of one parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ParamBound {
    Free,
    Range { lower: f64, upper: f64 },
    /// Wrapped into `[0, period)`.
    Periodic { period: f64 },
}

impl ParamBound {
    pub fn at_least(lower: f64) -> Self {
        ParamBound::Range {
            lower,
            upper: f64::INFINITY,
        }
    }

    pub fn apply(&self, v: f64) -> f64 {
        match *self {
            ParamBound::Free => v,
            ParamBound::Range { lower, upper } => v.clamp(lower, upper),
            ParamBound::Periodic { period } => {
                let w = v.rem_euclid(period);
                if w >= period {
                    0.0
                } else {
                    w
                }
            }
        }
    }
}

/// A parametric spectrum `f(ν; x)` with analytic gradient.
pub trait SpectralModel: Send + Sync {
    fn name(&self) -> &'static str;

    fn param_names(&self) -> &'static [&'static str];

    fn bounds(&self) -> Vec<ParamBound>;

    fn eval(&self, nu: f64, x: &[f64]) -> f64;

    /// Writes ∂f/∂x_j into `out`.
    fn gradient(&self, nu: f64, x: &[f64], out: &mut [f64]);

    /// Closed-form starting point; reports missing signal as an error.
    fn initial_guess(&self, spec: &Spectrum) -> Result<Vec<f64>>;

    /// Folds equivalent parameter branches onto the canonical one.
    fn canonicalize(&self, _x: &mut [f64]) {}

    /// Parameters held fixed during the fit, for reporting.
    fn fixed(&self) -> Vec<(&'static str, f64)> {
        Vec::new()
    }

    fn warnings(&self) -> Vec<String> {
        Vec::new()
    }

    fn model_spectrum(&self, grid: &[f64], x: &[f64]) -> Result<Spectrum> {
        Spectrum::new(grid.to_vec(), grid.iter().map(|&nu| self.eval(nu, x)).collect())
    }
}

/// What a model factory may draw on.
#[derive(Debug, Clone, Copy)]
pub struct ModelContext {
    pub fixed: FixedParams,
    pub lineshape: &'static dyn Lineshape,
}

impl ModelContext {
    pub fn new(fixed: FixedParams, lineshape: &'static dyn Lineshape) -> Self {
        Self { fixed, lineshape }
    }
}

pub trait ModelFactory: Send + Sync {
    fn build(&self, ctx: &ModelContext) -> Result<Box<dyn SpectralModel>>;
}

impl<F> ModelFactory for F
where
    F: Fn(&ModelContext) -> Result<Box<dyn SpectralModel>> + Send + Sync,
{
    fn build(&self, ctx: &ModelContext) -> Result<Box<dyn SpectralModel>> {
        self(ctx)
    }
}

/// Built-in fit models keyed by name (`fluorescence`, `transmission`).
pub fn fit_models() -> &'static Registry<dyn ModelFactory> {
    static REGISTRY: OnceLock<Registry<dyn ModelFactory>> = OnceLock::new();
    REGISTRY.get_or_init(|| {
        let mut reg: Registry<dyn ModelFactory> = Registry::new("fit model");
        reg.register(
            "fluorescence",
            Box::new(|ctx: &ModelContext| -> Result<Box<dyn SpectralModel>> {
                Ok(Box::new(FluorescenceModel::new(ctx)))
            }),
        );
        reg.register(
            "transmission",
            Box::new(|ctx: &ModelContext| -> Result<Box<dyn SpectralModel>> {
                Ok(Box::new(TransmissionModel::new(ctx)?))
            }),
        );
        reg
    })
}

// ---------------------------------------------------------------------------
// smoothing and peak helpers

/// Centered moving average over `2·half + 1` points (shrinking at edges).
pub(crate) fn smooth(values: &[f64], half: usize) -> Vec<f64> {
    let n = values.len();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

pub(super) fn argmax_by(values: &[f64], key: impl Fn(f64) -> f64) -> usize {
    values
        .iter()
        .enumerate()
        .max_by(|a, b| key(*a.1).total_cmp(&key(*b.1)))
        .map(|(i, _)| i)
        .unwrap_or(0)
}

/// Width of the peak at `imax` where `y` crosses `level`, by linear
/// interpolation; `None` if either side never crosses.
fn crossing_width(x: &[f64], y: &[f64], imax: usize, level: f64) -> Option<f64> {
    let left = (1..=imax).rev().find(|&i| y[i - 1] < level).map(|i| {
        x[i - 1] + (level - y[i - 1]) * (x[i] - x[i - 1]) / (y[i] - y[i - 1])
    })?;
    let right = (imax..x.len() - 1).find(|&i| y[i + 1] < level).map(|i| {
        x[i] + (y[i] - level) * (x[i + 1] - x[i]) / (y[i] - y[i + 1])
    })?;
    Some(right - left)
}

pub(super) fn emitter(fixed: &FixedParams, nu21: f64, gamma: f64) -> EmitterParams {
    // built directly: γ may transiently dip below γ₀ during iterations
    EmitterParams {
        nu21,
        gamma,
        gamma0: fixed.gamma0.unwrap_or(gamma),
        alpha: fixed.alpha,
        omega: fixed.omega,
        k_ratio: fixed.k_ratio,
    }
}

// ---------------------------------------------------------------------------
// fluorescence

/// `amplitude·L(ν − ν₂₁; γ) + background`.
///
/// Parameters: `[nu21, gamma, amplitude, background]`.
pub struct FluorescenceModel {
    fixed: FixedParams,
    shape: &'static dyn Lineshape,
}

impl FluorescenceModel {
    pub fn new(ctx: &ModelContext) -> Self {
        Self {
            fixed: ctx.fixed,
            shape: ctx.lineshape,
        }
    }
}

impl SpectralModel for FluorescenceModel {
    fn name(&self) -> &'static str {
        "fluorescence"
    }

    fn param_names(&self) -> &'static [&'static str] {
        &["nu21", "gamma", "amplitude", "background"]
    }

    fn bounds(&self) -> Vec<ParamBound> {
        vec![
            ParamBound::Free,
            ParamBound::at_least(1e-9),
            ParamBound::at_least(0.0),
            ParamBound::Free,
        ]
    }

    fn eval(&self, nu: f64, x: &[f64]) -> f64 {
        let p = emitter(&self.fixed, x[0], x[1]);
        x[2] * self.shape.value(&p, nu - x[0]) + x[3]
    }

    fn gradient(&self, nu: f64, x: &[f64], out: &mut [f64]) {
        let p = emitter(&self.fixed, x[0], x[1]);
        let delta = nu - x[0];
        out[0] = -x[2] * self.shape.d_delta(&p, delta);
        out[1] = x[2] * self.shape.d_gamma(&p, delta);
        out[2] = self.shape.value(&p, delta);
        out[3] = 1.0;
    }

    fn initial_guess(&self, spec: &Spectrum) -> Result<Vec<f64>> {
        let base = estimate_baseline(spec, 0.1)?;
        let x = spec.detunings();
        let sm = smooth(spec.values(), 2);
        let imax = argmax_by(&sm, |v| v);
        let height = sm[imax] - base.level;
        let noise = base.std.max(base.noise);
        if !(height > 3.0 * noise) {
            return Err(Error::NoPeak { height, noise });
        }
        let span = x[x.len() - 1] - x[0];
        let gamma = crossing_width(x, &sm, imax, base.level + 0.5 * height)
            .filter(|w| *w > 0.0)
            .unwrap_or(span / 10.0);
        let p = emitter(&self.fixed, x[imax], gamma);
        let peak_l = self.shape.value(&p, 0.0);
        Ok(vec![x[imax], gamma, height / peak_l, base.level])
    }

    fn fixed(&self) -> Vec<(&'static str, f64)> {
        if self.shape.name() == "weak" {
            Vec::new()
        } else {
            vec![
                ("omega", self.fixed.omega),
                ("k_ratio", self.fixed.k_ratio),
                ("gamma0", self.fixed.gamma0.unwrap_or(f64::NAN)),
            ]
        }
    }
}

// ---------------------------------------------------------------------------
// transmission

/// Forward transmission with fixed γ, α, γ₀.
///
/// Parameters: `[nu21, c_amp, psi, i_e]`.
pub struct TransmissionModel {
    fixed: FixedParams,
    gamma: f64,
    shape: &'static dyn Lineshape,
}

impl TransmissionModel {
    pub fn new(ctx: &ModelContext) -> Result<Self> {
        let gamma = ctx
            .fixed
            .gamma
            .ok_or_else(|| Error::argument("transmission fit needs a fixed gamma"))?;
        let p = emitter(&ctx.fixed, 0.0, gamma);
        p.validate()?;
        Ok(Self {
            fixed: ctx.fixed,
            gamma,
            shape: ctx.lineshape,
        })
    }

    fn params(&self, nu21: f64) -> EmitterParams {
        emitter(&self.fixed, nu21, self.gamma)
    }

    fn linear_terms(&self, spec: &Spectrum, nu21: f64) -> Option<(Vector3<f64>, f64)> {
        linear_terms(spec, &self.params(nu21), self.shape)
    }
}

/// Transmission restricted to the fold `C·sin ψ = γ/2G`, where the two
/// equivalent `(C, ψ)` solutions merge. Parameters: `[nu21, psi, i_e]`.
///
/// When noise pushes a spectrum just past the deepest dip the model can
/// produce, the least-squares optimum lies on this curve and the full
/// four-parameter problem is rank deficient there.
pub(super) struct FoldModel<'a> {
    inner: &'a TransmissionModel,
    /// γ/2G.
    scale: f64,
}

impl<'a> FoldModel<'a> {
    pub(super) fn new(inner: &'a TransmissionModel) -> Self {
        let g = inner.params(0.0).incoherent_weight();
        Self {
            inner,
            scale: inner.gamma / (2.0 * g),
        }
    }

    pub(super) fn expand(&self, x: &[f64]) -> [f64; 4] {
        [x[0], self.scale / x[1].sin(), x[1], x[2]]
    }

    pub(super) fn inner_model(&self) -> &TransmissionModel {
        self.inner
    }

    /// dC/dψ along the fold.
    pub(super) fn slope(&self, psi: f64) -> f64 {
        -self.scale * psi.cos() / psi.sin().powi(2)
    }

    /// Distance from the fold, `1 − 2G·C·sin ψ/γ`.
    pub(super) fn offset(&self, c: f64, psi: f64) -> f64 {
        1.0 - c * psi.sin() / self.scale
    }
}

impl SpectralModel for FoldModel<'_> {
    fn name(&self) -> &'static str {
        "transmission"
    }

    fn param_names(&self) -> &'static [&'static str] {
        &["nu21", "psi", "i_e"]
    }

    fn bounds(&self) -> Vec<ParamBound> {
        vec![
            ParamBound::Free,
            ParamBound::Range {
                lower: 1e-3,
                upper: PI - 1e-3,
            },
            ParamBound::at_least(f64::MIN_POSITIVE),
        ]
    }

    fn eval(&self, nu: f64, x: &[f64]) -> f64 {
        self.inner.eval(nu, &self.expand(x))
    }

    fn gradient(&self, nu: f64, x: &[f64], out: &mut [f64]) {
        let mut g = [0.0; 4];
        self.inner.gradient(nu, &self.expand(x), &mut g);
        out[0] = g[0];
        out[1] = g[2] + g[1] * self.slope(x[1]);
        out[2] = g[3];
    }

    fn initial_guess(&self, _spec: &Spectrum) -> Result<Vec<f64>> {
        Err(Error::argument("the fold model is only refined from a transmission fit"))
    }

    fn fixed(&self) -> Vec<(&'static str, f64)> {
        self.inner.fixed()
    }

    fn warnings(&self) -> Vec<String> {
        self.inner.warnings()
    }
}

/// Linear least squares for `(baseline, a, b)` in
/// `I = baseline + a·L − 2LΔ·b` at the resonance `p.nu21`. Returns the
/// solution and its residual sum of squares.
///
/// The molecular term and the absorptive part of the extinction term share
/// the lineshape L, so only their sum `a` is identifiable from one spectrum.
pub(super) fn linear_terms(
    spec: &Spectrum,
    p: &EmitterParams,
    shape: &dyn Lineshape,
) -> Option<(Vector3<f64>, f64)> {
    let rows: Vec<(Vector3<f64>, f64)> = spec
        .iter()
        .map(|(nu, y)| {
            let d = nu - p.nu21;
            let l = shape.value(p, d);
            (Vector3::new(1.0, l, -2.0 * l * d), y)
        })
        .collect();
    let mut ata = Matrix3::zeros();
    let mut atb = Vector3::zeros();
    for (row, y) in &rows {
        ata += row * row.transpose();
        atb += row * *y;
    }
    let sol = ata.cholesky()?.solve(&atb);
    let rss = rows.iter().map(|(row, y)| (row.dot(&sol) - y).powi(2)).sum();
    Some((sol, rss))
}

/// Every `(C, ψ)` with `C²G − Cγ·sin ψ = a` and `C·cos ψ = b`, smallest C
/// first. These produce identical spectra; the two roots merge when the
/// discriminant vanishes (at ψ = π/2 that is C = γ/2G). A slightly negative
/// discriminant, as noise can produce, is treated as that double root.
pub fn coupling_roots(a: f64, b: f64, g: f64, gamma: f64) -> Vec<(f64, f64)> {
    // u = C² solves G²u² − (2aG + γ²)u + a² + b²γ² = 0
    let lin = 2.0 * a * g + gamma * gamma;
    if lin <= 0.0 {
        return Vec::new();
    }
    let disc = gamma * gamma * (gamma * gamma + 4.0 * a * g - 4.0 * g * g * b * b);
    let root = disc.max(0.0).sqrt();
    let mut us = vec![(lin - root) / (2.0 * g * g)];
    if disc > 0.0 {
        us.push((lin + root) / (2.0 * g * g));
    }
    us.into_iter()
        .filter(|u| *u > 0.0)
        .map(|u| {
            let c = u.sqrt();
            let sin = (u * g - a) / (c * gamma);
            (c, wrap_phase(sin.atan2(b / c)))
        })
        .collect()
}

impl SpectralModel for TransmissionModel {
    fn name(&self) -> &'static str {
        "transmission"
    }

    fn param_names(&self) -> &'static [&'static str] {
        &["nu21", "c_amp", "psi", "i_e"]
    }

    fn bounds(&self) -> Vec<ParamBound> {
        vec![
            ParamBound::Free,
            ParamBound::at_least(0.0),
            ParamBound::Periodic { period: 2.0 * PI },
            ParamBound::at_least(f64::MIN_POSITIVE),
        ]
    }

    fn eval(&self, nu: f64, x: &[f64]) -> f64 {
        let p = self.params(x[0]);
        let d = nu - x[0];
        let l = self.shape.value(&p, d);
        let (s, c) = x[2].sin_cos();
        x[3] * (1.0 + x[1] * x[1] * p.incoherent_weight() * l - 2.0 * x[1] * l * (d * c + 0.5 * self.gamma * s))
    }

    fn gradient(&self, nu: f64, x: &[f64], out: &mut [f64]) {
        let p = self.params(x[0]);
        let d = nu - x[0];
        let l = self.shape.value(&p, d);
        let dl = self.shape.d_delta(&p, d);
        let g = p.incoherent_weight();
        let (s, c) = x[2].sin_cos();
        let cc = x[1];
        let ie = x[3];
        let phase = d * c + 0.5 * self.gamma * s;
        let bracket = 1.0 + cc * cc * g * l - 2.0 * cc * l * phase;
        let d_bracket_d_delta = cc * cc * g * dl - 2.0 * cc * (dl * phase + l * c);
        out[0] = -ie * d_bracket_d_delta;
        out[1] = ie * (2.0 * cc * g * l - 2.0 * l * phase);
        out[2] = ie * (-2.0 * cc * l * (-d * s + 0.5 * self.gamma * c));
        out[3] = bracket;
    }

    fn initial_guess(&self, spec: &Spectrum) -> Result<Vec<f64>> {
        let base = estimate_baseline(spec, 0.15)?;
        if base.level <= 0.0 {
            return Err(Error::argument("baseline intensity is not positive"));
        }
        let x = spec.detunings();
        let vis: Vec<f64> = spec.values().iter().map(|v| (v - base.level) / base.level).collect();
        let sm = smooth(&vis, 2);
        let iext = argmax_by(&sm, f64::abs);

        // the extremum of |V| sits within ~γ/2 of resonance for any ψ
        let mut best: Option<(f64, Vector3<f64>, f64)> = None;
        for k in -8..=8 {
            let nu21 = x[iext] + k as f64 * self.gamma / 8.0;
            if let Some((sol, rss)) = self.linear_terms(spec, nu21) {
                if best.as_ref().is_none_or(|b| rss < b.2) {
                    best = Some((nu21, sol, rss));
                }
            }
        }
        let (nu21, sol, _) = best.ok_or_else(|| Error::Degenerate("singular initial estimate".into()))?;
        let ie = if sol[0] > 0.0 { sol[0] } else { base.level };
        let p = self.params(nu21);

        let model_peak = spec
            .detunings()
            .iter()
            .map(|&nu| {
                let d = nu - nu21;
                let l = self.shape.value(&p, d);
                (sol[1] * l - 2.0 * l * d * sol[2]).abs()
            })
            .fold(0.0, f64::max);
        // floor: contrast this far below the level is round-off
        let noise = base.noise.max(1e-9 * base.level);
        if !(model_peak > 3.0 * noise) {
            return Err(Error::LowContrast {
                contrast: model_peak / ie,
                noise: noise / ie,
            });
        }
        // extinction-dominated (smaller C) root
        let (c, psi) = coupling_roots(sol[1] / ie, sol[2] / ie, p.incoherent_weight(), self.gamma)
            .first()
            .copied()
            .unwrap_or((0.0, 0.0));
        Ok(vec![nu21, c, psi, ie])
    }

    fn canonicalize(&self, x: &mut [f64]) {
        // (C, ψ) and (−C, ψ + π) give the same spectrum
        if x[1] < 0.0 {
            x[1] = -x[1];
            x[2] += PI;
        }
        x[2] = wrap_phase(x[2]);
    }

    fn fixed(&self) -> Vec<(&'static str, f64)> {
        let p = self.params(0.0);
        let mut v = vec![("gamma", self.gamma), ("alpha", p.alpha), ("gamma0", p.gamma0)];
        if self.shape.name() != "weak" {
            v.push(("omega", p.omega));
            v.push(("k_ratio", p.k_ratio));
        }
        v
    }

    fn warnings(&self) -> Vec<String> {
        if self.fixed.gamma0.is_none() {
            vec!["gamma0 unknown; using gamma0 = gamma for the direct-emission term".into()]
        } else {
            Vec::new()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lineshape::WeakField;

    #[test]
    fn bounds_apply() {
        assert_eq!(ParamBound::at_least(0.0).apply(-1.0), 0.0);
        assert_eq!(ParamBound::Free.apply(-1.0), -1.0);
        let p = ParamBound::Periodic { period: 2.0 * PI };
        assert!((p.apply(-0.5) - (2.0 * PI - 0.5)).abs() < 1e-15);
        assert!((p.apply(7.0) - (7.0 - 2.0 * PI)).abs() < 1e-15);
    }

    #[test]
    fn fold_merges_the_roots() {
        let ctx = ModelContext::new(
            FixedParams {
                gamma0: Some(8.0),
                ..FixedParams::with_gamma(35.0)
            },
            &WeakField,
        );
        let t = TransmissionModel::new(&ctx).unwrap();
        let fold = FoldModel::new(&t);
        for psi in [0.4, 1.2, PI / 2.0, 2.5] {
            let x = fold.expand(&[1.0, psi, 2e5]);
            assert!(fold.offset(x[1], psi).abs() < 1e-12);
            let g = 35.0 / (0.25 * 8.0);
            let a = x[1] * x[1] * g - x[1] * 35.0 * psi.sin();
            let roots = coupling_roots(a, x[1] * psi.cos(), g, 35.0);
            assert!(!roots.is_empty());
            for (c, _) in roots {
                assert!((c / x[1] - 1.0).abs() < 1e-6);
            }

            let mut grad = [0.0; 3];
            fold.gradient(7.0, &[1.0, psi, 2e5], &mut grad);
            let h = 1e-6;
            let fd = (fold.eval(7.0, &[1.0, psi + h, 2e5]) - fold.eval(7.0, &[1.0, psi - h, 2e5])) / (2.0 * h);
            assert!((grad[1] - fd).abs() < 1e-6 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn transmission_needs_gamma() {
        let ctx = ModelContext::new(FixedParams::default(), &WeakField);
        assert!(TransmissionModel::new(&ctx).is_err());
        assert!(fit_models().get("transmission").unwrap().build(&ctx).is_err());
        assert!(fit_models().get("fluorescence").unwrap().build(&ctx).is_ok());
        assert!(fit_models().get("gaussian").is_err());
    }

    #[test]
    fn branch_flip() {
        let ctx = ModelContext::new(FixedParams::with_gamma(35.0), &WeakField);
        let m = TransmissionModel::new(&ctx).unwrap();
        let mut a = vec![1.0, 0.8, 0.3, 1e5];
        let mut b = vec![1.0, -0.8, 0.3 + PI, 1e5];
        m.canonicalize(&mut a);
        m.canonicalize(&mut b);
        assert!((a[1] - b[1]).abs() < 1e-15 && (a[2] - b[2]).abs() < 1e-12);
        for nu in [-40.0, 0.0, 3.0, 90.0] {
            let raw = [1.0, -0.8, 0.3 + PI, 1e5];
            assert!((m.eval(nu, &raw) - m.eval(nu, &a)).abs() < 1e-9);
        }
    }

    #[test]
    fn crossing_width_of_triangle() {
        let x: Vec<f64> = (0..11).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| 5.0 - (v - 5.0).abs()).collect();
        assert_eq!(crossing_width(&x, &y, 5, 2.5), Some(5.0));
        assert_eq!(crossing_width(&x, &y, 5, -1.0), None);
    }
}
