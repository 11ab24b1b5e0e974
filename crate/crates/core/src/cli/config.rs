//! TOML run configuration.
//!
//! ```toml
//! lineshape = "weak"          # or "saturation"
//!
//! [emitter]
//! nu21 = 0.0                  # transition frequency, MHz
//! gamma = 35.0                # homogeneous FWHM, MHz (required)
//! gamma0 = 8.0                # radiative FWHM, MHz; or give tau_ns
//! tau_ns = 20.0               # excited-state lifetime, ns
//! alpha = 0.25                # Debye-Waller factor
//! omega = 0.0                 # Rabi frequency, MHz
//! k_ratio = 1.0               # K = 1 + k23/(2 k31)
//! lambda_nm = 615.0           # transition wavelength, nm (report only)
//!
//! [coupling]
//! c_amp = 1.0                 # C, MHz
//! psi = 1.5707963267948966    # ψ, rad
//! i_e = 2.5e5                 # off-resonant detected rate, cps
//!
//! [grid]
//! half_width = 350.0          # MHz, symmetric about 0 (default 10·gamma)
//! points = 200
//! # or start = -350.0 / stop = 350.0
//!
//! [acquisition]
//! dwell = 0.01                # s per pixel
//! averages = 20
//! laser_rms = 0.003
//! seed = 0
//!
//! [fluorescence]
//! peak = 4000.0               # cps above background on resonance
//! background = 150.0          # cps
//!
//! [polarization]
//! tip_axis_deg = 0.0
//! tip_ellipticity_deg = 20.0  # within ±45
//! mol_axis_deg = 20.0
//! mol_ellipticity_deg = -35.26
//! reference_deg = 0.0         # analyzer angle at which [coupling] holds
//! angles = 30                 # evenly over [0°, 180°); or angles_deg = [...]
//! analyzer_deg = 0.0          # angle used by `simulate`
//! noise = false               # polarscan: add counting noise
//! ```
//!
//! A run manifest is this file plus a `[run]` table, so any manifest can be
//! passed back as `--config` to replay the run.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::fitting::{FixedParams, DEFAULT_ALPHA};
use crate::lineshape::{
    lineshapes, linewidth_from_lifetime, EmitterParams, Lineshape, ModalCoupling,
};
use crate::polarization::{analyzer_angles, JonesField, PolarizationSetup};
use crate::spectrum::{symmetric_grid, uniform_grid, validate_grid};
use crate::synth::AcquisitionConfig;

use super::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_lineshape")]
    pub lineshape: String,
    pub emitter: EmitterSection,
    pub coupling: Option<CouplingSection>,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub acquisition: AcquisitionConfig,
    pub fluorescence: Option<FluorescenceSection>,
    pub polarization: Option<PolarizationSection>,
    /// Present in manifests only; ignored on input.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub run: Option<RunInfo>,
}

fn default_lineshape() -> String {
    "weak".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmitterSection {
    #[serde(default)]
    pub nu21: f64,
    pub gamma: f64,
    pub gamma0: Option<f64>,
    pub tau_ns: Option<f64>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub omega: f64,
    #[serde(default = "default_k_ratio")]
    pub k_ratio: f64,
    pub lambda_nm: Option<f64>,
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

fn default_k_ratio() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingSection {
    pub c_amp: f64,
    pub psi: f64,
    pub i_e: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub half_width: Option<f64>,
    pub points: Option<usize>,
    pub start: Option<f64>,
    pub stop: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FluorescenceSection {
    pub peak: f64,
    #[serde(default)]
    pub background: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolarizationSection {
    pub tip_axis_deg: f64,
    #[serde(default)]
    pub tip_ellipticity_deg: f64,
    pub mol_axis_deg: f64,
    #[serde(default)]
    pub mol_ellipticity_deg: f64,
    pub reference_deg: Option<f64>,
    pub angles: Option<usize>,
    pub angles_deg: Option<Vec<f64>>,
    pub analyzer_deg: Option<f64>,
    #[serde(default)]
    pub noise: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunInfo {
    pub command: String,
    pub version: String,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
    #[serde(default)]
    pub inputs: Vec<String>,
    #[serde(default)]
    pub outputs: Vec<String>,
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::BadInput(msg.into())
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| bad(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::BadInput(m) => bad(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| bad(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks every section that is present.
    pub fn validate(&self) -> Result<(), CliError> {
        self.lineshape()?;
        self.emitter()?;
        self.coupling()?;
        self.grid()?;
        self.acquisition.validate().map_err(|e| bad(format!("[acquisition] {e}")))?;
        if let Some(f) = &self.fluorescence {
            if !(f.peak >= 0.0 && f.background.is_finite()) {
                return Err(bad("[fluorescence] peak must be >= 0 and background finite"));
            }
        }
        if self.polarization.is_some() {
            self.fields()?;
            self.analyzer_angles()?;
        }
        Ok(())
    }

    pub fn lineshape(&self) -> Result<&'static dyn Lineshape, CliError> {
        lineshapes()
            .get(&self.lineshape)
            .map_err(|e| bad(format!("lineshape: {e}")))
    }

    pub fn gamma0(&self) -> Result<f64, CliError> {
        match (self.emitter.gamma0, self.emitter.tau_ns) {
            (Some(g0), _) => Ok(g0),
            (None, Some(tau)) => linewidth_from_lifetime(tau).map_err(|e| bad(format!("[emitter] tau_ns: {e}"))),
            (None, None) => Err(bad("[emitter] missing field `gamma0` (or `tau_ns`)")),
        }
    }

    pub fn emitter(&self) -> Result<EmitterParams, CliError> {
        let e = &self.emitter;
        EmitterParams::new(e.nu21, e.gamma, self.gamma0()?, e.alpha)
            .and_then(|p| p.with_drive(e.omega, e.k_ratio))
            .map_err(|err| bad(format!("[emitter] {err}")))
    }

    pub fn fixed(&self) -> FixedParams {
        FixedParams {
            gamma: Some(self.emitter.gamma),
            alpha: self.emitter.alpha,
            gamma0: self.gamma0().ok(),
            omega: self.emitter.omega,
            k_ratio: self.emitter.k_ratio,
        }
    }

    pub fn coupling(&self) -> Result<Option<ModalCoupling>, CliError> {
        self.coupling
            .map(|c| ModalCoupling::new(c.c_amp, c.psi, c.i_e).map_err(|e| bad(format!("[coupling] {e}"))))
            .transpose()
    }

    pub fn require_coupling(&self) -> Result<ModalCoupling, CliError> {
        self.coupling()?.ok_or_else(|| bad("missing section [coupling]"))
    }

    pub fn grid(&self) -> Result<Vec<f64>, CliError> {
        let g = &self.grid;
        let n = g.points.unwrap_or(200);
        if n < 2 {
            return Err(bad("[grid] points must be at least 2"));
        }
        let grid = match (g.start, g.stop, g.half_width) {
            (Some(a), Some(b), None) => uniform_grid(a, b, n),
            (None, None, half) => symmetric_grid(half.unwrap_or(10.0 * self.emitter.gamma), n),
            _ => return Err(bad("[grid] give either half_width or start and stop")),
        };
        validate_grid(&grid).map_err(|e| bad(format!("[grid] {e}")))?;
        Ok(grid)
    }

    pub fn polarization(&self) -> Result<&PolarizationSection, CliError> {
        self.polarization.as_ref().ok_or_else(|| bad("missing section [polarization]"))
    }

    /// Tip and molecular Jones vectors (unit power).
    pub fn fields(&self) -> Result<(JonesField, JonesField), CliError> {
        let pol = self.polarization()?;
        let field = |name: &str, axis: f64, chi: f64| {
            JonesField::from_ellipse(axis.to_radians(), chi.to_radians(), 1.0)
                .map_err(|e| bad(format!("[polarization] {name}: {e}")))
        };
        Ok((
            field("tip", pol.tip_axis_deg, pol.tip_ellipticity_deg)?,
            field("mol", pol.mol_axis_deg, pol.mol_ellipticity_deg)?,
        ))
    }

    pub fn setup(&self) -> Result<PolarizationSetup, CliError> {
        let (tip, mol) = self.fields()?;
        let base = self.require_coupling()?;
        let pol = self.polarization()?;
        let reference = pol.reference_deg.map_or(tip.axis_angle(), f64::to_radians);
        PolarizationSetup::with_reference(tip, mol, base, reference)
            .map_err(|e| bad(format!("[polarization] {e}")))
    }

    /// Analyzer angles in radians.
    pub fn analyzer_angles(&self) -> Result<Vec<f64>, CliError> {
        let pol = self.polarization()?;
        match (&pol.angles_deg, pol.angles) {
            (Some(list), None) if !list.is_empty() => Ok(list.iter().map(|d| d.to_radians()).collect()),
            (None, n) => {
                let n = n.unwrap_or(30);
                if n == 0 {
                    return Err(bad("[polarization] angles must be at least 1"));
                }
                Ok(analyzer_angles(n))
            }
            _ => Err(bad("[polarization] give either a non-empty angles_deg or angles")),
        }
    }
}
