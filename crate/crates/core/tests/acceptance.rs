//! Acceptance criteria, one PASS/FAIL line each. Runs without the libtest
//! harness so the lines are always printed; exits non-zero if any fails.

mod common;

use std::f64::consts::PI;
use std::time::Instant;

use extinction::fitting::{
    fit_fluorescence, fit_transmission, FitConfig, FixedParams, FluorescenceModel, JointPolarProblem,
    ModelContext, SpectrumProblem, TransmissionModel,
};
use extinction::lineshape::{
    absorption_cross_section, detected_spectrum, enhancement_factor, fluorescence_spectrum,
    linewidth_from_lifetime, resonance_visibility, select_lineshape, EmitterParams, ModalCoupling, WeakField,
};
use extinction::polarization::{analyzer_angles, analyzer_scan, JonesField, PolarizationSetup};
use extinction::synth::{monte_carlo_snr, simulate_counts, snr_estimate, AcquisitionConfig};
use extinction::symmetric_grid;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{analytic_jacobian, fd_jacobian, max_column_error, median, oracle_intensity, simpson};

const GAMMA: f64 = 35.0;
const GAMMA0: f64 = 8.0;
const ALPHA: f64 = 0.25;
const I_E: f64 = 2.5e5;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn nominal(gamma0: f64) -> EmitterParams {
    EmitterParams::new(0.0, GAMMA, gamma0, ALPHA).unwrap()
}

fn resonance_v(p: &EmitterParams, setup: &PolarizationSetup, theta: f64) -> f64 {
    let t = setup.terms_at(theta);
    (t.intensity(p, p.nu21, &WeakField) - t.baseline) / t.baseline
}

/// Largest resonance dip over C at ψ = π/2, for γ₀ swept over 7–9 MHz.
fn dip_regime() -> Outcome {
    let start = Instant::now();
    let mut worst = (f64::INFINITY, f64::NEG_INFINITY);
    for k in 0..=20 {
        let gamma0 = 7.0 + 0.1 * k as f64;
        let p = nominal(gamma0);
        let c_star = 0.5 * ALPHA * gamma0;
        let deepest = resonance_visibility(&p, &ModalCoupling::new(c_star, PI / 2.0, I_E).unwrap()).abs();
        // No coupling on a dense grid dips deeper than the closed-form optimum.
        let searched = (0..=20_000)
            .map(|i| {
                let c = 3.0 * i as f64 / 20_000.0;
                resonance_visibility(&p, &ModalCoupling::new(c, PI / 2.0, I_E).unwrap())
            })
            .fold(f64::INFINITY, f64::min)
            .abs();
        if searched > deepest * (1.0 + 1e-12) || deepest - searched > 1e-6 {
            return outcome(false, format!("γ₀={gamma0:.1}: search {searched} vs optimum {deepest}"));
        }
        worst = (worst.0.min(deepest), worst.1.max(deepest));
    }
    let elapsed = start.elapsed().as_secs_f64();
    // Formula evaluation; the lower edge is met exactly at γ₀ = 7 MHz.
    let pass = worst.0 >= 0.05 - 1e-12 && worst.1 <= 0.07 && (worst.0..=worst.1).contains(&0.06) && elapsed < 1.0;
    outcome(
        pass,
        format!(
            "max |V(0)| spans [{:.4}, {:.4}] for γ₀ in [7, 9] MHz; {elapsed:.3} s",
            worst.0, worst.1
        ),
    )
}

/// A Jones configuration with a 2:1 molecular extinction ratio and a 20°
/// axis offset giving a +8..+13 % peak at θ = 90° and a −3..−9 % dip at
/// θ = 0.
fn cross_polarized_surplus() -> Outcome {
    let p = nominal(GAMMA0);
    let chi_mol = (1.0 / 2f64.sqrt()).atan();
    let mut found = None;
    'search: for chi_tip_step in -50..=50 {
        let chi_tip = (0.5 * chi_tip_step as f64).to_radians();
        let tip = JonesField::from_ellipse(0.0, chi_tip, 1.0).unwrap();
        for sign in [1.0, -1.0] {
            let mol = JonesField::from_ellipse(20f64.to_radians(), sign * chi_mol, 1.0).unwrap();
            for ci in 1..=60 {
                let c = 0.05 * ci as f64;
                for pi in 0..72 {
                    let psi = (5.0 * pi as f64).to_radians();
                    let base = ModalCoupling::new(c, psi, I_E).unwrap();
                    let Ok(setup) = PolarizationSetup::with_reference(tip, mol, base, 0.0) else {
                        continue;
                    };
                    let (v0, v90) = (resonance_v(&p, &setup, 0.0), resonance_v(&p, &setup, PI / 2.0));
                    if (-0.09..=-0.03).contains(&v0) && (0.08..=0.13).contains(&v90) {
                        found = Some((chi_tip, sign * chi_mol, c, psi, v0, v90, mol.extinction_ratio()));
                        break 'search;
                    }
                }
            }
        }
    }
    match found {
        Some((chi_tip, chi_mol, c, psi, v0, v90, ratio)) => outcome(
            (ratio - 2.0).abs() < 1e-9,
            format!(
                "tip ellipticity {:.1}°, molecule {:.2}° (ratio {ratio:.3}), C={c:.2}, ψ={:.0}°: \
                 V(0)={:+.2}%, V(90°)={:+.2}%",
                chi_tip.to_degrees(),
                chi_mol.to_degrees(),
                psi.to_degrees(),
                100.0 * v0,
                100.0 * v90
            ),
        ),
        None => outcome(false, "no configuration reproduces the sign structure".into()),
    }
}

/// I_d(θ) + I_d(θ + π/2) does not depend on θ.
fn orthogonality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let grid = symmetric_grid(200.0, 201);
    let thetas: Vec<f64> = (0..30).map(|_| rng.random_range(0.0..PI)).collect();
    let mut worst: f64 = 0.0;
    for _ in 0..30 {
        let p = EmitterParams::new(
            rng.random_range(-20.0..20.0),
            rng.random_range(10.0..80.0),
            rng.random_range(4.0..12.0),
            rng.random_range(0.1..0.6),
        )
        .unwrap();
        let tip = JonesField::from_ellipse(rng.random_range(0.0..PI), rng.random_range(-0.6..0.6), 1.0).unwrap();
        let mol = JonesField::from_ellipse(rng.random_range(0.0..PI), rng.random_range(-0.7..0.7), 1.0).unwrap();
        let base = ModalCoupling::new(rng.random_range(0.0..3.0), rng.random_range(0.0..2.0 * PI), I_E).unwrap();
        let setup = PolarizationSetup::new(tip, mol, base).unwrap();
        for &nu in &grid {
            let sums: Vec<f64> = thetas
                .iter()
                .map(|&t| setup.crossed_pair_sum(&p, t, nu, &WeakField))
                .collect();
            let hi = sums.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lo = sums.iter().copied().fold(f64::INFINITY, f64::min);
            worst = worst.max((hi - lo) / hi.abs());
        }
    }
    outcome(worst < 1e-10, format!("max relative θ-variation {worst:.2e}"))
}

fn round_trip() -> Outcome {
    let start = Instant::now();
    let grid = symmetric_grid(10.0 * GAMMA, 200);
    let (c_true, psi_true, nu_true) = (1.0, PI / 2.0, 3.0);
    let p = EmitterParams::new(nu_true, GAMMA, GAMMA0, ALPHA).unwrap();
    let fixed = FixedParams {
        gamma0: Some(GAMMA0),
        ..FixedParams::with_gamma(GAMMA)
    };
    let cfg = FitConfig::default();

    // Noiseless data from the independent oracle.
    let values: Vec<f64> = grid
        .iter()
        .map(|&nu| oracle_intensity(nu - nu_true, c_true, psi_true, GAMMA, GAMMA0, ALPHA, I_E))
        .collect();
    let clean = extinction::Spectrum::new(grid.clone(), values).unwrap();
    let ctx = ModelContext::new(fixed, select_lineshape(false));
    let fit = fit_transmission(&clean, &ctx, &cfg).unwrap();
    let rel = |name: &str, truth: f64| (fit.get(name).unwrap() - truth).abs() / truth.abs();
    let noiseless = [
        rel("c_amp", c_true),
        rel("psi", psi_true),
        rel("nu21", nu_true),
        rel("i_e", I_E),
    ]
    .into_iter()
    .fold(0.0, f64::max);

    // Poisson noise at the experimental scale, γ taken from a fluorescence
    // channel recorded alongside.
    let model = detected_spectrum(&p, &ModalCoupling::new(c_true, psi_true, I_E).unwrap(), &grid).unwrap();
    let peak = 4e3;
    let fluo = fluorescence_spectrum(&p, peak * GAMMA * GAMMA / 4.0, 50.0, &grid, &WeakField).unwrap();
    let (mut cs, mut psis, mut gammas) = (Vec::new(), Vec::new(), Vec::new());
    for seed in 0..100u64 {
        let acq = AcquisitionConfig::default().with_seed(seed);
        let f = fit_fluorescence(&simulate_counts(&fluo, &acq.with_seed(seed + 10_000)).unwrap(), &cfg).unwrap();
        let gamma = f.get("gamma").unwrap();
        gammas.push(gamma);
        let ctx = ModelContext::new(
            FixedParams {
                gamma0: Some(GAMMA0),
                ..FixedParams::with_gamma(gamma)
            },
            select_lineshape(false),
        );
        let t = fit_transmission(&simulate_counts(&model, &acq).unwrap(), &ctx, &cfg).unwrap();
        cs.push(t.get("c_amp").unwrap());
        psis.push(t.get("psi").unwrap());
    }
    let (mc, mpsi, mg) = (median(&mut cs), median(&mut psis), median(&mut gammas));
    let elapsed = start.elapsed().as_secs_f64();
    let pass = noiseless < 1e-6
        && (mpsi - psi_true).abs() <= 0.05
        && (mc - c_true).abs() <= 0.03 * c_true
        && (mg - GAMMA).abs() <= 0.05 * GAMMA
        && elapsed < 30.0;
    outcome(
        pass,
        format!(
            "noiseless max rel err {noiseless:.1e}; medians over 100 seeds: C={mc:.4} ({:+.1}%), \
             ψ={mpsi:.4} ({:+.4} rad), γ={mg:.2} ({:+.1}%); {elapsed:.1} s",
            100.0 * (mc / c_true - 1.0),
            mpsi - psi_true,
            100.0 * (mg / GAMMA - 1.0)
        ),
    )
}

fn snr() -> Outcome {
    // γ₀ = 9 MHz lets ψ = π/2 reach the observed 6 % dip.
    let p = nominal(9.0);
    let gamma0 = p.gamma0;
    let disc = (1.0 - 4.0 * 0.06 * GAMMA / 4.0 / (ALPHA * gamma0)).sqrt();
    let c = 0.5 * ALPHA * gamma0 * (1.0 - disc);
    let m = ModalCoupling::new(c, PI / 2.0, I_E).unwrap();
    let v = resonance_visibility(&p, &m);
    let acq = AcquisitionConfig::default().with_seed(11);
    let analytic = snr_estimate(&p, &m, &acq);
    let mc = monte_carlo_snr(&p, &m, &acq, 4000).unwrap();
    let pass = (v + 0.06).abs() < 1e-9 && (10.0..=40.0).contains(&analytic) && (mc / analytic - 1.0).abs() <= 0.2;
    outcome(
        pass,
        format!(
            "V(0)={v:.4}: analytic SNR {analytic:.2}, Monte Carlo {mc:.2} ({:+.1}%)",
            100.0 * (mc / analytic - 1.0)
        ),
    )
}

fn scalar_table() -> Outcome {
    let gamma0 = linewidth_from_lifetime(20.0).unwrap();
    let gamma0_oracle = 1e3 / (2.0 * PI * 20.0);
    let sigma = absorption_cross_section(615.0).unwrap();
    let sigma_oracle = 3.0 * 615e-9f64.powi(2) / (2.0 * PI);
    let enh = enhancement_factor(&nominal(GAMMA0));
    let interval = (GAMMA / (ALPHA * 9.0), GAMMA / (ALPHA * 7.0));
    let pass = (gamma0 / gamma0_oracle - 1.0).abs() < 1e-12
        && format!("{gamma0:.2}") == "7.96"
        && (sigma / sigma_oracle - 1.0).abs() < 1e-12
        && format!("{:.3e}", sigma) == "1.806e-13"
        && (enh / 17.5 - 1.0).abs() < 1e-12
        && interval.0 >= 15.5
        && interval.1 <= 20.0 + 1e-12
        && (interval.0..=interval.1).contains(&16.0);
    outcome(
        pass,
        format!(
            "γ₀(20 ns)={gamma0:.4} MHz, σ_abs(615 nm)={sigma:.4e} m², enhancement {enh}, \
             range over γ₀∈[7,9]: [{:.2}, {:.2}]",
            interval.0, interval.1
        ),
    )
}

/// ∫ of the extinction term over Δ ∈ [−50γ, 50γ] against −2πC·sinψ·I_e.
fn integral_identity() -> Outcome {
    let mut worst: f64 = 0.0;
    for &(c, psi) in &[(1.0, PI / 2.0), (0.4, 1.0), (2.0, 2.5), (0.7, 3.0 * PI / 2.0 + 0.3)] {
        // Extinction term alone: total minus baseline minus the direct part.
        let term = |d: f64| {
            oracle_intensity(d, c, psi, GAMMA, GAMMA0, ALPHA, I_E)
                - oracle_intensity(d, 0.0, psi, GAMMA, GAMMA0, ALPHA, I_E)
                - I_E * c * c * GAMMA / (ALPHA * GAMMA0) / (d * d + GAMMA * GAMMA / 4.0)
        };
        let numeric = simpson(term, -50.0 * GAMMA, 50.0 * GAMMA, 400_000);
        let expected = -2.0 * PI * c * psi.sin() * I_E;
        worst = worst.max((numeric / expected - 1.0).abs());
    }
    outcome(
        worst <= 0.005,
        format!("largest relative deviation {:.3}% (tolerance 0.5%)", 100.0 * worst),
    )
}

fn jacobians() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let grid = symmetric_grid(350.0, 120);
    let mut worst = [0.0f64; 3];
    for _ in 0..50 {
        let gamma = rng.random_range(15.0..60.0);
        let fixed = FixedParams {
            gamma0: Some(rng.random_range(5.0..12.0)),
            alpha: rng.random_range(0.1..0.6),
            ..FixedParams::with_gamma(gamma)
        };
        let ctx = ModelContext::new(fixed, select_lineshape(false));
        let p = EmitterParams::new(0.0, gamma, fixed.gamma0.unwrap(), fixed.alpha).unwrap();
        let sigma: Vec<f64> = grid.iter().map(|_| rng.random_range(50.0..500.0)).collect();
        let spec = detected_spectrum(&p, &ModalCoupling::new(1.0, 1.0, I_E).unwrap(), &grid)
            .unwrap()
            .with_sigma(sigma)
            .unwrap();

        let t = TransmissionModel::new(&ctx).unwrap();
        let x = [
            rng.random_range(-30.0..30.0),
            rng.random_range(0.1..3.0),
            rng.random_range(0.0..2.0 * PI),
            rng.random_range(1e4..1e6),
        ];
        let prob = SpectrumProblem::new(&t, &spec);
        worst[0] = worst[0].max(max_column_error(&analytic_jacobian(&prob, &x), &fd_jacobian(&prob, &x)));

        let f = FluorescenceModel::new(&ctx);
        let x = [
            rng.random_range(-30.0..30.0),
            rng.random_range(10.0..80.0),
            rng.random_range(1e5..1e7),
            rng.random_range(0.0..500.0),
        ];
        let prob = SpectrumProblem::new(&f, &spec);
        worst[1] = worst[1].max(max_column_error(&analytic_jacobian(&prob, &x), &fd_jacobian(&prob, &x)));

        let tip = JonesField::from_ellipse(rng.random_range(0.0..PI), rng.random_range(-0.5..0.5), 1.0).unwrap();
        let mol = JonesField::from_ellipse(rng.random_range(0.0..PI), rng.random_range(-0.6..0.6), 1.0).unwrap();
        let setup = PolarizationSetup::new(tip, mol, ModalCoupling::new(0.8, 1.4, I_E).unwrap()).unwrap();
        let scan = analyzer_scan(&p, &setup, &analyzer_angles(6), &grid, &WeakField).unwrap();
        let joint = JointPolarProblem::new(&scan, &ctx).unwrap();
        let x = [
            rng.random_range(-30.0..30.0),
            rng.random_range(1e4..1e6),
            rng.random_range(0.05..1.5),
            rng.random_range(0.0..2.0 * PI),
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
        ];
        worst[2] = worst[2].max(max_column_error(&analytic_jacobian(&joint, &x), &fd_jacobian(&joint, &x)));
    }
    let pass = worst.iter().all(|&w| w <= 1e-6);
    outcome(
        pass,
        format!(
            "max column-relative error over 50 points: transmission {:.1e}, fluorescence {:.1e}, joint {:.1e}",
            worst[0], worst[1], worst[2]
        ),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 8] = [
        ("1 dip-magnitude regime", dip_regime),
        ("2 cross-polarized surplus", cross_polarized_surplus),
        ("3 orthogonality invariance", orthogonality),
        ("4 round-trip fitting", round_trip),
        ("5 SNR reproduction", snr),
        ("6 scalar table", scalar_table),
        ("7 integral identity", integral_identity),
        ("8 Jacobian vs finite differences", jacobians),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let o = run();
        println!("{} criterion {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed += 1;
        }
    }
    println!("{} of 8 criteria passed", 8 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
