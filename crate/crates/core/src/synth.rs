//! Photon-counting acquisition simulator.
//!
//! Each scan repetition draws one multiplicative laser-intensity factor
//! `1 + laser_rms·N(0,1)` shared by all pixels of that scan, then Poisson
//! counts per pixel. Repetitions are averaged and converted back to cps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lineshape::{resonance_visibility, EmitterParams, ModalCoupling};
use crate::spectrum::Spectrum;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcquisitionConfig {
    /// Integration time per pixel, s.
    #[serde(default = "default_dwell")]
    pub dwell: f64,
    #[serde(default = "default_averages")]
    pub averages: u32,
    /// Relative rms of the per-scan laser intensity factor.
    #[serde(default = "default_laser_rms")]
    pub laser_rms: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_dwell() -> f64 {
    0.01
}

fn default_averages() -> u32 {
    20
}

fn default_laser_rms() -> f64 {
    0.003
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        Self {
            dwell: default_dwell(),
            averages: default_averages(),
            laser_rms: default_laser_rms(),
            seed: 0,
        }
    }
}

impl AcquisitionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dwell.is_finite() && self.dwell > 0.0) {
            return Err(Error::domain(format!("dwell {} s must be positive", self.dwell)));
        }
        if self.averages < 1 {
            return Err(Error::domain("at least one scan repetition is required"));
        }
        if !(self.laser_rms.is_finite() && self.laser_rms >= 0.0) {
            return Err(Error::domain("laser_rms must be non-negative"));
        }
        Ok(())
    }

    /// Total integration time per pixel, s.
    pub fn exposure(&self) -> f64 {
        self.dwell * self.averages as f64
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

fn draw_poisson(rng: &mut ChaCha8Rng, mean: f64) -> f64 {
    if mean <= 0.0 {
        return 0.0;
    }
    Poisson::new(mean).expect("positive finite mean").sample(rng)
}

/// Noisy, scan-averaged version of `model` (cps) with per-point sigma.
///
/// Sigma is the standard error of the repetition mean when `averages > 1`
/// and the Poisson estimate √counts otherwise. Identical seeds give
/// bit-identical output.
pub fn simulate_counts(model: &Spectrum, acq: &AcquisitionConfig) -> Result<Spectrum> {
    acq.validate()?;
    model.ensure_counts()?;
    let mut rng = ChaCha8Rng::seed_from_u64(acq.seed);
    let n = model.len();
    let mut sum = vec![0.0; n];
    let mut sum_sq = vec![0.0; n];
    for _ in 0..acq.averages {
        let z: f64 = StandardNormal.sample(&mut rng);
        let factor = (1.0 + acq.laser_rms * z).max(0.0);
        for (i, rate) in model.values().iter().enumerate() {
            let k = draw_poisson(&mut rng, rate * acq.dwell * factor);
            sum[i] += k;
            sum_sq[i] += k * k;
        }
    }
    let reps = acq.averages as f64;
    let mut values = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    for i in 0..n {
        let mean = sum[i] / reps;
        values.push(mean / acq.dwell);
        let se = if acq.averages > 1 {
            let var = ((sum_sq[i] - reps * mean * mean) / (reps - 1.0)).max(0.0);
            (var / reps).sqrt()
        } else {
            mean.sqrt()
        };
        sigma.push(se / acq.dwell);
    }
    Spectrum::new(model.detunings().to_vec(), values)?.with_sigma(sigma)
}

/// Resonant contrast in accumulated counts over combined shot and laser
/// noise.
///
/// Laser drift enters per repetition, so its accumulated variance is
/// `laser_rms²·(I_e·dwell)²·averages`.
pub fn snr_estimate(p: &EmitterParams, m: &ModalCoupling, acq: &AcquisitionConfig) -> f64 {
    let contrast = resonance_visibility(p, m).abs() * m.i_e * acq.exposure();
    let per_scan = m.i_e * acq.dwell;
    let noise_var = m.i_e * acq.exposure() + (acq.laser_rms * per_scan).powi(2) * acq.averages as f64;
    if contrast == 0.0 {
        0.0
    } else {
        contrast / noise_var.sqrt()
    }
}

/// SNR measured from repeated simulated acquisitions of one off-resonant
/// and one on-resonant pixel: |mean_on − mean_off| / std_off.
pub fn monte_carlo_snr(
    p: &EmitterParams,
    m: &ModalCoupling,
    acq: &AcquisitionConfig,
    realizations: usize,
) -> Result<f64> {
    if realizations < 2 {
        return Err(Error::argument("need at least two realizations"));
    }
    let on = m.i_e * (1.0 + resonance_visibility(p, m));
    let model = Spectrum::new(vec![-1.0, 0.0], vec![m.i_e, on])?;
    let mut off_vals = Vec::with_capacity(realizations);
    let mut on_vals = Vec::with_capacity(realizations);
    for r in 0..realizations {
        let s = simulate_counts(&model, &acq.with_seed(acq.seed.wrapping_add(r as u64)))?;
        off_vals.push(s.values()[0]);
        on_vals.push(s.values()[1]);
    }
    let (mean_off, var_off) = mean_var(&off_vals);
    let (mean_on, _) = mean_var(&on_vals);
    Ok((mean_on - mean_off).abs() / var_off.sqrt())
}

pub(crate) fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Direct molecular count rate on resonance, (C²/α)(γ/γ₀)(4/γ²)·I_e.
pub fn coherent_rate_check(p: &EmitterParams, m: &ModalCoupling) -> f64 {
    m.c_amp * m.c_amp * p.incoherent_weight() * 4.0 / (p.gamma * p.gamma) * m.i_e
}

/// Magnitude of the extinction term on resonance, (4C/γ)·|sinψ|·I_e.
pub fn extinction_rate(p: &EmitterParams, m: &ModalCoupling) -> f64 {
    4.0 * m.c_amp / p.gamma * m.psi.sin().abs() * m.i_e
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lineshape::detected_intensity;
    use crate::lineshape::WeakField;
    use approx::assert_relative_eq;
    use std::f64::consts::FRAC_PI_2;

    fn flat(rate: f64, n: usize) -> Spectrum {
        Spectrum::new((0..n).map(|i| i as f64).collect(), vec![rate; n]).unwrap()
    }

    #[test]
    fn zero_rate_gives_zero_counts() {
        let s = simulate_counts(&flat(0.0, 50), &AcquisitionConfig::default()).unwrap();
        assert!(s.values().iter().all(|&v| v == 0.0));
        assert!(s.sigma().unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_input() {
        let neg = Spectrum::new(vec![0.0, 1.0], vec![1.0, -1.0]).unwrap();
        assert!(matches!(simulate_counts(&neg, &AcquisitionConfig::default()), Err(Error::Domain(_))));
        let bad = AcquisitionConfig { averages: 0, ..Default::default() };
        assert!(simulate_counts(&flat(1.0, 3), &bad).is_err());
        let bad = AcquisitionConfig { dwell: 0.0, ..Default::default() };
        assert!(simulate_counts(&flat(1.0, 3), &bad).is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        let acq = AcquisitionConfig { seed: 42, ..Default::default() };
        let a = simulate_counts(&flat(2.5e5, 64), &acq).unwrap();
        let b = simulate_counts(&flat(2.5e5, 64), &acq).unwrap();
        assert_eq!(a, b);
        let c = simulate_counts(&flat(2.5e5, 64), &acq.with_seed(43)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn single_scan_shot_noise() {
        // 2.5e5 cps · 10 ms = 2500 counts: relative noise 1/√2500 = 2%
        let n = 20_000;
        let acq = AcquisitionConfig { averages: 1, laser_rms: 0.0, seed: 7, ..Default::default() };
        let s = simulate_counts(&flat(2.5e5, n), &acq).unwrap();
        let (mean, var) = mean_var(s.values());
        let rel = var.sqrt() / mean;
        // sample std of n draws has relative se ≈ 1/√(2n)
        let band = 3.0 * 0.02 / (2.0 * n as f64).sqrt();
        assert!((rel - 0.02).abs() < band, "{rel}");
        assert!((mean - 2.5e5).abs() < 3.0 * 2.5e5 * 0.02 / (n as f64).sqrt());
    }

    #[test]
    fn laser_noise_adds_in_quadrature() {
        // one pixel, many independent single-scan acquisitions
        let reps = 20_000;
        let model = flat(2.5e5, 1);
        let acq = AcquisitionConfig { averages: 1, laser_rms: 0.003, ..Default::default() };
        let vals: Vec<f64> = (0..reps)
            .map(|r| simulate_counts(&model, &acq.with_seed(r as u64)).unwrap().values()[0])
            .collect();
        let (mean, var) = mean_var(&vals);
        let rel2 = var / (mean * mean);
        let expect = 1.0 / 2500.0 + 0.003f64.powi(2);
        assert!((rel2 / expect - 1.0).abs() < 3.0 * (2.0 / reps as f64).sqrt(), "{rel2} vs {expect}");
    }

    #[test]
    fn unbiased_and_variance_model() {
        // ≥10⁴ repetitions per pixel: mean within 4σ, variance within 10%
        let acq = AcquisitionConfig { dwell: 1e-3, averages: 10_000, laser_rms: 0.01, seed: 3 };
        let model = Spectrum::new(vec![0.0, 1.0, 2.0], vec![5e3, 1e5, 4e5]).unwrap();
        let s = simulate_counts(&model, &acq).unwrap();
        for ((&rate, &got), &se) in model.values().iter().zip(s.values()).zip(s.sigma().unwrap()) {
            let lambda = rate * acq.dwell;
            let per_rep_var = lambda + (acq.laser_rms * lambda).powi(2);
            let model_se = (per_rep_var / acq.averages as f64).sqrt() / acq.dwell;
            assert!((got - rate).abs() < 4.0 * model_se, "{got} vs {rate}");
            assert!((se / model_se - 1.0).abs() < 0.1, "{se} vs {model_se}");
        }
    }

    #[test]
    fn snr_examples() {
        let p = EmitterParams::new(0.0, 35.0, 8.0, 0.25).unwrap();
        let zero = ModalCoupling::new(0.0, FRAC_PI_2, 2.5e5).unwrap();
        assert_eq!(snr_estimate(&p, &zero, &AcquisitionConfig::default()), 0.0);

        let m = ModalCoupling::new(1.0, FRAC_PI_2, 2.5e5).unwrap();
        let shot = AcquisitionConfig { laser_rms: 0.0, ..Default::default() };
        let quad = AcquisitionConfig { dwell: 0.04, ..shot };
        assert_relative_eq!(snr_estimate(&p, &m, &quad), 2.0 * snr_estimate(&p, &m, &shot), max_relative = 1e-12);

        // contrast 2.5e5·0.2·(4/35 − 4/70); noise √(5e4 + (0.003·2500)²·20)
        let expect = 2.5e5 * 0.2 * (4.0 / 35.0 - 4.0 / 70.0) / (5e4f64 + 7.5f64.powi(2) * 20.0).sqrt();
        assert_relative_eq!(snr_estimate(&p, &m, &AcquisitionConfig::default()), expect, max_relative = 1e-12);
    }

    #[test]
    fn coherent_rate_examples() {
        let p = EmitterParams::new(0.0, 35.0, 8.0, 0.25).unwrap();
        assert_eq!(coherent_rate_check(&p, &ModalCoupling::new(0.0, 1.0, 2.5e5).unwrap()), 0.0);

        // extinction contrast 4C/γ = 1% → C = 0.0875 MHz
        let m = ModalCoupling::new(0.01 * 35.0 / 4.0, FRAC_PI_2, 2.5e5).unwrap();
        assert_relative_eq!(extinction_rate(&p, &m), 2500.0, max_relative = 1e-12);
        let direct = coherent_rate_check(&p, &m);
        assert_relative_eq!(direct, 109.375, max_relative = 1e-12);
        assert!(direct > 10.0 && direct < 200.0 && direct < 0.05 * extinction_rate(&p, &m));

        // ratio C/(αγ₀) against the direct and extinction terms of the full model
        for c in [0.1, 0.5, 1.3] {
            let m = ModalCoupling::new(c, FRAC_PI_2, 2.5e5).unwrap();
            let full = detected_intensity(&p, &m, 0.0, &WeakField) - m.i_e;
            let incoherent = coherent_rate_check(&p, &m);
            let extinction = incoherent - full;
            assert_relative_eq!(incoherent / extinction, c / (p.alpha * p.gamma0), max_relative = 1e-12);
        }
    }
}
