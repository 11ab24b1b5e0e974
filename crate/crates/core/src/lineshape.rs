//! Closed-form resonance physics of a single emitter seen in transmission.
//!
//! Frequencies and rates are in MHz throughout. Detunings are measured from
//! the zero-phonon frequency `nu21`, which itself is relative to the scan
//! origin.
//!
//! The detected intensity in the forward direction is
//!
//! ```text
//! I_d(ν) = I_e · [1 + (C²/α)(γ/γ₀)·L(ν) − 2C·L(ν)·(Δ·cosψ + (γ/2)·sinψ)]
//! ```
//!
//! with `C` the interference coupling (MHz), `ψ` the phase between the
//! molecular and excitation fields at the detector and `L` a Lorentzian
//! supplied by a [`Lineshape`] strategy.

use std::f64::consts::PI;
use std::fmt;
use std::sync::OnceLock;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registry::Registry;
use crate::spectrum::{validate_grid, Spectrum};

/// Spectroscopic constants of one emitter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmitterParams {
    /// Zero-phonon transition frequency, MHz.
    pub nu21: f64,
    /// Homogeneous FWHM linewidth γ, MHz.
    pub gamma: f64,
    /// Radiative (lifetime-limited) FWHM linewidth γ₀, MHz.
    pub gamma0: f64,
    /// Debye-Waller factor α.
    pub alpha: f64,
    /// Rabi frequency Ω, MHz.
    pub omega: f64,
    /// Decay-rate competition factor K = 1 + k₂₃/(2k₃₁).
    pub k_ratio: f64,
}

impl EmitterParams {
    /// Undriven emitter (Ω = 0, K = 1).
    pub fn new(nu21: f64, gamma: f64, gamma0: f64, alpha: f64) -> Result<Self> {
        let p = Self {
            nu21,
            gamma,
            gamma0,
            alpha,
            omega: 0.0,
            k_ratio: 1.0,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_drive(mut self, omega: f64, k_ratio: f64) -> Result<Self> {
        self.omega = omega;
        self.k_ratio = k_ratio;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.nu21,
            self.gamma,
            self.gamma0,
            self.alpha,
            self.omega,
            self.k_ratio,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("emitter parameters must be finite"));
        }
        if self.gamma <= 0.0 || self.gamma0 <= 0.0 {
            return Err(Error::domain(format!(
                "linewidths must be positive (gamma={}, gamma0={})",
                self.gamma, self.gamma0
            )));
        }
        if self.gamma < self.gamma0 {
            return Err(Error::domain(format!(
                "homogeneous width {} MHz is below the radiative width {} MHz",
                self.gamma, self.gamma0
            )));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::domain(format!(
                "Debye-Waller factor {} outside (0, 1]",
                self.alpha
            )));
        }
        if self.omega < 0.0 {
            return Err(Error::domain("Rabi frequency must be non-negative"));
        }
        if self.k_ratio < 1.0 {
            return Err(Error::domain("K must be at least 1"));
        }
        Ok(())
    }

    /// Weight γ/(αγ₀) of the direct molecular emission term.
    pub fn incoherent_weight(&self) -> f64 {
        self.gamma / (self.alpha * self.gamma0)
    }
}

/// Interference parameters at the detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModalCoupling {
    /// Coupling amplitude C = α·d₂₁²·|f/g|, MHz.
    pub c_amp: f64,
    /// Phase ψ = φ_f − φ_g in [0, 2π).
    pub psi: f64,
    /// Off-resonant excitation intensity on the detector, cps.
    pub i_e: f64,
}

impl ModalCoupling {
    pub fn new(c_amp: f64, psi: f64, i_e: f64) -> Result<Self> {
        if !c_amp.is_finite() || c_amp < 0.0 {
            return Err(Error::domain(format!("coupling amplitude {c_amp} must be >= 0")));
        }
        if !psi.is_finite() {
            return Err(Error::domain("phase must be finite"));
        }
        if !i_e.is_finite() || i_e <= 0.0 {
            return Err(Error::domain(format!("baseline intensity {i_e} must be > 0")));
        }
        Ok(Self {
            c_amp,
            psi: wrap_phase(psi),
            i_e,
        })
    }

    /// `C·e^{iψ}`.
    pub fn phasor(&self) -> Complex64 {
        Complex64::from_polar(self.c_amp, self.psi)
    }
}

/// Folds an angle into [0, 2π).
pub fn wrap_phase(psi: f64) -> f64 {
    let w = psi.rem_euclid(2.0 * PI);
    // rem_euclid can round up to exactly 2π for tiny negative inputs
    if w >= 2.0 * PI {
        0.0
    } else {
        w
    }
}

// ---------------------------------------------------------------------------
// Lorentzian strategies

/// A resonance profile L(Δ) in MHz⁻² together with its partial derivatives.
pub trait Lineshape: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;

    fn value(&self, p: &EmitterParams, delta: f64) -> f64;

    /// ∂L/∂Δ.
    fn d_delta(&self, p: &EmitterParams, delta: f64) -> f64 {
        let l = self.value(p, delta);
        -2.0 * delta * l * l
    }

    /// ∂L/∂γ.
    fn d_gamma(&self, p: &EmitterParams, delta: f64) -> f64;
}

/// Below-saturation form 1/(Δ² + γ²/4).
#[derive(Debug, Clone, Copy, Default)]
pub struct WeakField;

/// Full form 1/(Δ² + γ²/4 + Ω²(γ/2γ₀)K) including power broadening.
#[derive(Debug, Clone, Copy, Default)]
pub struct Saturation;

impl Lineshape for WeakField {
    fn name(&self) -> &'static str {
        "weak"
    }

    fn value(&self, p: &EmitterParams, delta: f64) -> f64 {
        1.0 / (delta * delta + 0.25 * p.gamma * p.gamma)
    }

    fn d_gamma(&self, p: &EmitterParams, delta: f64) -> f64 {
        let l = self.value(p, delta);
        -0.5 * p.gamma * l * l
    }
}

impl Lineshape for Saturation {
    fn name(&self) -> &'static str {
        "saturation"
    }

    fn value(&self, p: &EmitterParams, delta: f64) -> f64 {
        let sat = p.omega * p.omega * (p.gamma / (2.0 * p.gamma0)) * p.k_ratio;
        1.0 / (delta * delta + 0.25 * p.gamma * p.gamma + sat)
    }

    fn d_gamma(&self, p: &EmitterParams, delta: f64) -> f64 {
        let l = self.value(p, delta);
        -(0.5 * p.gamma + p.omega * p.omega * p.k_ratio / (2.0 * p.gamma0)) * l * l
    }
}

/// Built-in lineshapes keyed by name (`weak`, `saturation`).
pub fn lineshapes() -> &'static Registry<dyn Lineshape> {
    static REGISTRY: OnceLock<Registry<dyn Lineshape>> = OnceLock::new();
    REGISTRY.get_or_init(|| {
        let mut reg: Registry<dyn Lineshape> = Registry::new("lineshape");
        reg.register("weak", Box::new(WeakField));
        reg.register("saturation", Box::new(Saturation));
        reg
    })
}

/// Picks the weak-field form unless saturation is requested.
pub fn select_lineshape(saturation: bool) -> &'static dyn Lineshape {
    let name = if saturation { "saturation" } else { "weak" };
    lineshapes().get(name).expect("built-in lineshape")
}

// ---------------------------------------------------------------------------
// Scalar operations

/// Radiative FWHM linewidth in MHz for an excited-state lifetime in ns.
pub fn linewidth_from_lifetime(tau_ns: f64) -> Result<f64> {
    if tau_ns.is_nan() || tau_ns <= 0.0 {
        return Err(Error::domain(format!("lifetime {tau_ns} ns must be positive")));
    }
    // 1/(2π·τ[ns]) GHz = 10³/(2π·τ[ns]) MHz
    Ok(1.0e3 / (2.0 * PI * tau_ns))
}

pub fn weak_field_lorentzian(delta: f64, gamma: f64) -> Result<f64> {
    if gamma.is_nan() || gamma <= 0.0 {
        return Err(Error::domain(format!("linewidth {gamma} must be positive")));
    }
    Ok(1.0 / (delta * delta + 0.25 * gamma * gamma))
}

pub fn saturation_lorentzian(p: &EmitterParams, delta: f64) -> f64 {
    Saturation.value(p, delta)
}

/// Steady-state optical coherence ρ₂₁ at detuning `delta`.
pub fn rho21(p: &EmitterParams, delta: f64) -> Complex64 {
    let l = saturation_lorentzian(p, delta);
    Complex64::new(-delta, 0.5 * p.gamma) * (0.5 * p.omega * l)
}

/// Detected intensity at frequency `nu` (absolute, same origin as `p.nu21`).
pub fn detected_intensity(
    p: &EmitterParams,
    m: &ModalCoupling,
    nu: f64,
    shape: &dyn Lineshape,
) -> f64 {
    let delta = nu - p.nu21;
    let l = shape.value(p, delta);
    let c = m.c_amp;
    let incoherent = c * c * p.incoherent_weight() * l;
    let extinction = -2.0 * c * l * (delta * m.psi.cos() + 0.5 * p.gamma * m.psi.sin());
    m.i_e * (1.0 + incoherent + extinction)
}

/// Weak-field transmission spectrum over `grid`.
pub fn detected_spectrum(p: &EmitterParams, m: &ModalCoupling, grid: &[f64]) -> Result<Spectrum> {
    detected_spectrum_with(p, m, grid, &WeakField)
}

pub fn detected_spectrum_with(
    p: &EmitterParams,
    m: &ModalCoupling,
    grid: &[f64],
    shape: &dyn Lineshape,
) -> Result<Spectrum> {
    validate_grid(grid)?;
    let values = grid
        .iter()
        .map(|&nu| detected_intensity(p, m, nu, shape))
        .collect();
    Spectrum::new(grid.to_vec(), values)
}

/// Pointwise (I_d − I_e)/I_e.
pub fn visibility(spec: &Spectrum, i_e: f64) -> Result<Spectrum> {
    if i_e.is_nan() || i_e <= 0.0 {
        return Err(Error::domain(format!("baseline intensity {i_e} must be positive")));
    }
    Ok(spec.map_values(|v| (v - i_e) / i_e))
}

/// Weak-field visibility on resonance: 4C²/(αγγ₀) − (4C/γ)·sinψ.
pub fn resonance_visibility(p: &EmitterParams, m: &ModalCoupling) -> f64 {
    let c = m.c_amp;
    4.0 * c * c / (p.alpha * p.gamma * p.gamma0) - 4.0 * c / p.gamma * m.psi.sin()
}

/// Plane-wave absorption cross section 3λ²/(2π) in m² for λ in nm.
pub fn absorption_cross_section(lambda_nm: f64) -> Result<f64> {
    if lambda_nm.is_nan() || lambda_nm <= 0.0 {
        return Err(Error::domain(format!("wavelength {lambda_nm} nm must be positive")));
    }
    let lambda = lambda_nm * 1e-9;
    Ok(3.0 * lambda * lambda / (2.0 * PI))
}

/// Gain γ/(αγ₀) available to an ideal, lifetime-limited two-level system.
pub fn enhancement_factor(p: &EmitterParams) -> f64 {
    p.gamma / (p.alpha * p.gamma0)
}

/// Stokes-shifted fluorescence `amp·L(ν) + background` over `grid`.
///
/// `amp` is in cps·MHz², so the peak rate above background is `4·amp/γ²`
/// in the weak-field limit.
pub fn fluorescence_spectrum(
    p: &EmitterParams,
    amp: f64,
    background: f64,
    grid: &[f64],
    shape: &dyn Lineshape,
) -> Result<Spectrum> {
    if amp.is_nan() || amp < 0.0 {
        return Err(Error::domain(format!("fluorescence amplitude {amp} must be >= 0")));
    }
    validate_grid(grid)?;
    let values = grid
        .iter()
        .map(|&nu| amp * shape.value(p, nu - p.nu21) + background)
        .collect();
    Spectrum::new(grid.to_vec(), values)
}

// ---------------------------------------------------------------------------
// Bilinear field form

/// Detector intensity written through the field products it is built from.
///
/// With excitation amplitude `e` and molecular amplitude `m` on the
/// detector, `baseline = |e|²`, `cross = e*·m` (scaled by the coupling
/// phasor) and `molecular = |m|²`. This form stays finite when the
/// excitation projection vanishes, where [`ModalCoupling`] does not.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterferenceTerms {
    /// I_e, cps.
    pub baseline: f64,
    /// I_e·C·e^{iψ}, cps·MHz.
    pub cross: Complex64,
    /// I_e·C², cps·MHz².
    pub molecular: f64,
}

impl InterferenceTerms {
    pub fn from_coupling(m: &ModalCoupling) -> Self {
        Self {
            baseline: m.i_e,
            cross: m.phasor() * m.i_e,
            molecular: m.i_e * m.c_amp * m.c_amp,
        }
    }

    pub fn intensity(&self, p: &EmitterParams, nu: f64, shape: &dyn Lineshape) -> f64 {
        let delta = nu - p.nu21;
        let l = shape.value(p, delta);
        let extinction = (self.cross * Complex64::new(delta, -0.5 * p.gamma)).re;
        self.baseline + self.molecular * p.incoherent_weight() * l - 2.0 * l * extinction
    }

    pub fn spectrum(&self, p: &EmitterParams, grid: &[f64], shape: &dyn Lineshape) -> Result<Spectrum> {
        validate_grid(grid)?;
        let values = grid.iter().map(|&nu| self.intensity(p, nu, shape)).collect();
        Spectrum::new(grid.to_vec(), values)
    }

    /// Recovers (C, ψ, I_e); `None` when the baseline vanishes.
    pub fn coupling(&self) -> Option<ModalCoupling> {
        if self.baseline > 0.0 {
            let phasor = self.cross / self.baseline;
            ModalCoupling::new(phasor.norm(), phasor.arg(), self.baseline).ok()
        } else {
            None
        }
    }
}

impl std::ops::Add for InterferenceTerms {
    type Output = InterferenceTerms;

    fn add(self, rhs: Self) -> Self {
        Self {
            baseline: self.baseline + rhs.baseline,
            cross: self.cross + rhs.cross,
            molecular: self.molecular + rhs.molecular,
        }
    }
}
