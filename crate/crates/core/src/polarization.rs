//! Jones-calculus model of a linear analyzer in the detection path.
//!
//! The excitation (tip) field and the coherently scattered molecular field
//! are each a Jones vector. A polarizer at angle θ keeps the component
//! along `(cos θ, sin θ)`, so the excitation intensity, the coupling
//! magnitude and the interference phase all become functions of θ.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lineshape::{EmitterParams, InterferenceTerms, Lineshape, ModalCoupling};
use crate::spectrum::{validate_grid, Spectrum};

/// Relative tip transmission below which the analyzer counts as crossed.
pub const CROSSED_THRESHOLD: f64 = 1e-6;

/// Transverse field as a complex 2-vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JonesField {
    pub ex: Complex64,
    pub ey: Complex64,
}

impl JonesField {
    pub fn new(ex: Complex64, ey: Complex64) -> Result<Self> {
        let f = Self { ex, ey };
        let power = f.power();
        if !power.is_finite() || power <= 0.0 {
            return Err(Error::domain("Jones vector must carry non-zero finite power"));
        }
        Ok(f)
    }

    /// Linear polarization along `angle` (radians from x).
    pub fn linear(angle: f64, amplitude: f64) -> Result<Self> {
        Self::from_ellipse(angle, 0.0, amplitude)
    }

    /// Elliptical field from its major-axis angle, ellipticity angle χ
    /// (tan χ = minor/major, sign gives handedness) and amplitude.
    pub fn from_ellipse(axis_angle: f64, ellipticity: f64, amplitude: f64) -> Result<Self> {
        if !(axis_angle.is_finite() && ellipticity.is_finite() && amplitude.is_finite()) {
            return Err(Error::domain("ellipse parameters must be finite"));
        }
        if ellipticity.abs() > PI / 4.0 {
            return Err(Error::domain(format!(
                "ellipticity angle {ellipticity} rad outside [-π/4, π/4]"
            )));
        }
        let (st, ct) = axis_angle.sin_cos();
        let (sc, cc) = ellipticity.sin_cos();
        Self::new(
            Complex64::new(ct * cc, -st * sc) * amplitude,
            Complex64::new(st * cc, ct * sc) * amplitude,
        )
    }

    pub fn power(&self) -> f64 {
        self.ex.norm_sqr() + self.ey.norm_sqr()
    }

    /// Stokes parameters (S0, S1, S2, S3).
    pub fn stokes(&self) -> [f64; 4] {
        let xy = self.ex.conj() * self.ey;
        [
            self.power(),
            self.ex.norm_sqr() - self.ey.norm_sqr(),
            2.0 * xy.re,
            2.0 * xy.im,
        ]
    }

    /// Major-axis angle folded into [0, π).
    pub fn axis_angle(&self) -> f64 {
        let [_, s1, s2, _] = self.stokes();
        fold_angle(0.5 * s2.atan2(s1))
    }

    /// Ellipticity angle χ in [-π/4, π/4].
    pub fn ellipticity(&self) -> f64 {
        let [s0, _, _, s3] = self.stokes();
        0.5 * (s3 / s0).clamp(-1.0, 1.0).asin()
    }

    /// Largest and smallest analyzer transmission `(min, max)`.
    pub fn malus_extrema(&self) -> (f64, f64) {
        let [s0, s1, s2, _] = self.stokes();
        let lin = s1.hypot(s2);
        (0.5 * (s0 - lin), 0.5 * (s0 + lin))
    }

    /// Max-to-min transmission ratio; infinite for linear light.
    pub fn extinction_ratio(&self) -> f64 {
        let (lo, hi) = self.malus_extrema();
        if lo <= 0.0 {
            f64::INFINITY
        } else {
            hi / lo
        }
    }

    pub fn scaled(&self, s: Complex64) -> Self {
        Self {
            ex: self.ex * s,
            ey: self.ey * s,
        }
    }

    /// Unit power with a real, non-negative x component (y if x vanishes).
    pub fn gauge_fixed(&self) -> Self {
        let norm = self.power().sqrt();
        let lead = if self.ex.norm() > 0.0 { self.ex } else { self.ey };
        self.scaled(Complex64::from_polar(1.0 / norm, -lead.arg()))
    }
}

/// Folds an analyzer angle into [0, π).
pub fn fold_angle(theta: f64) -> f64 {
    let w = theta.rem_euclid(PI);
    if w >= PI {
        0.0
    } else {
        w
    }
}

/// Field amplitude transmitted by a linear analyzer at `theta`.
pub fn project(field: &JonesField, theta: f64) -> Complex64 {
    let (s, c) = theta.sin_cos();
    field.ex * c + field.ey * s
}

/// Transmitted intensity |project(field, θ)|² for each angle.
pub fn malus_curve(field: &JonesField, thetas: &[f64]) -> Result<Vec<f64>> {
    if thetas.is_empty() {
        return Err(Error::argument("malus_curve needs at least one angle"));
    }
    Ok(thetas.iter().map(|&t| project(field, t).norm_sqr()).collect())
}

/// Coupling seen through the analyzer at one angle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EffectiveCoupling {
    /// Folded analyzer angle.
    pub theta: f64,
    pub terms: InterferenceTerms,
    /// `None` only when the tip projection is exactly zero.
    pub coupling: Option<ModalCoupling>,
    /// Set when the tip transmission falls below [`CROSSED_THRESHOLD`]; the
    /// direct molecular emission then dominates and V is ill-conditioned.
    pub direct_emission: bool,
}

/// Tip and molecule fields plus the coupling measured at a reference angle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolarizationSetup {
    pub e_tip: JonesField,
    pub e_mol: JonesField,
    pub base: ModalCoupling,
    pub theta_ref: f64,
    /// C·e^{iψ}/r(θ_ref) with r = p_mol/p_tip.
    kappa: Complex64,
    /// base.i_e / |p_tip(θ_ref)|².
    scale: f64,
}

impl PolarizationSetup {
    /// Reference angle defaults to the analyzer position of maximum
    /// excitation intensity, i.e. the tip's major axis.
    pub fn new(e_tip: JonesField, e_mol: JonesField, base: ModalCoupling) -> Result<Self> {
        Self::with_reference(e_tip, e_mol, base, e_tip.axis_angle())
    }

    pub fn with_reference(
        e_tip: JonesField,
        e_mol: JonesField,
        base: ModalCoupling,
        theta_ref: f64,
    ) -> Result<Self> {
        let theta_ref = fold_angle(theta_ref);
        let pt = project(&e_tip, theta_ref);
        let pm = project(&e_mol, theta_ref);
        if pt.norm_sqr() / e_tip.power() < CROSSED_THRESHOLD {
            return Err(Error::Degenerate(
                "reference angle is crossed with the excitation field".into(),
            ));
        }
        if pm.norm_sqr() / e_mol.power() < CROSSED_THRESHOLD {
            return Err(Error::Degenerate(
                "reference angle is crossed with the molecular field".into(),
            ));
        }
        Ok(Self {
            e_tip,
            e_mol,
            base,
            theta_ref,
            kappa: base.phasor() * pt / pm,
            scale: base.i_e / pt.norm_sqr(),
        })
    }

    pub fn terms_at(&self, theta: f64) -> InterferenceTerms {
        let pt = project(&self.e_tip, theta);
        let pm = project(&self.e_mol, theta) * self.kappa;
        InterferenceTerms {
            baseline: self.scale * pt.norm_sqr(),
            cross: pt.conj() * pm * self.scale,
            molecular: self.scale * pm.norm_sqr(),
        }
    }

    pub fn coupling_at(&self, theta: f64) -> EffectiveCoupling {
        let terms = self.terms_at(theta);
        let rel = project(&self.e_tip, theta).norm_sqr() / self.e_tip.power();
        EffectiveCoupling {
            theta: fold_angle(theta),
            terms,
            coupling: terms.coupling(),
            direct_emission: rel < CROSSED_THRESHOLD,
        }
    }

    /// I_d(ν; θ) + I_d(ν; θ + π/2), which does not depend on θ.
    pub fn crossed_pair_sum(&self, p: &EmitterParams, theta: f64, nu: f64, shape: &dyn Lineshape) -> f64 {
        self.terms_at(theta).intensity(p, nu, shape)
            + self.terms_at(theta + PI / 2.0).intensity(p, nu, shape)
    }

    /// Field products summed over two crossed analyzers (full power).
    pub fn total_terms(&self) -> InterferenceTerms {
        self.terms_at(0.0) + self.terms_at(PI / 2.0)
    }
}

/// θ-dependent coupling using the default reference angle.
pub fn effective_coupling(
    e_tip: &JonesField,
    e_mol: &JonesField,
    theta: f64,
    base: &ModalCoupling,
) -> Result<EffectiveCoupling> {
    Ok(PolarizationSetup::new(*e_tip, *e_mol, *base)?.coupling_at(theta))
}

/// Transmission spectra for a series of analyzer angles.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyzerScan {
    /// Angles folded into [0, π), in input order.
    pub thetas: Vec<f64>,
    pub spectra: Vec<Spectrum>,
    pub i_e_vs_theta: Vec<f64>,
    pub couplings: Vec<EffectiveCoupling>,
}

impl AnalyzerScan {
    pub fn new(thetas: Vec<f64>, spectra: Vec<Spectrum>, i_e_vs_theta: Vec<f64>) -> Result<Self> {
        if thetas.len() != spectra.len() || thetas.len() != i_e_vs_theta.len() {
            return Err(Error::argument("analyzer scan fields must have equal lengths"));
        }
        Ok(Self {
            thetas: thetas.into_iter().map(fold_angle).collect(),
            spectra,
            i_e_vs_theta,
            couplings: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.thetas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thetas.is_empty()
    }

    /// Visibility matrix, one row per angle, against each row's own baseline.
    pub fn visibility_map(&self) -> Vec<Vec<f64>> {
        self.spectra
            .iter()
            .zip(&self.i_e_vs_theta)
            .map(|(s, &ie)| {
                if ie > 0.0 {
                    s.values().iter().map(|v| (v - ie) / ie).collect()
                } else {
                    vec![f64::NAN; s.len()]
                }
            })
            .collect()
    }
}

/// Spectra for every analyzer angle in `thetas` over the detuning `grid`.
pub fn analyzer_scan(
    p: &EmitterParams,
    setup: &PolarizationSetup,
    thetas: &[f64],
    grid: &[f64],
    shape: &dyn Lineshape,
) -> Result<AnalyzerScan> {
    if thetas.is_empty() {
        return Err(Error::argument("analyzer scan needs at least one angle"));
    }
    validate_grid(grid)?;
    let couplings: Vec<_> = thetas.iter().map(|&t| setup.coupling_at(t)).collect();
    let spectra = couplings
        .iter()
        .map(|c| c.terms.spectrum(p, grid, shape))
        .collect::<Result<Vec<_>>>()?;
    Ok(AnalyzerScan {
        thetas: couplings.iter().map(|c| c.theta).collect(),
        i_e_vs_theta: couplings.iter().map(|c| c.terms.baseline).collect(),
        spectra,
        couplings,
    })
}

/// `n` analyzer angles evenly covering [0, π).
pub fn analyzer_angles(n: usize) -> Vec<f64> {
    (0..n).map(|i| PI * i as f64 / n as f64).collect()
}
