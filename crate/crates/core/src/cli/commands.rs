use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use super::config::{RunConfig, RunInfo};
use super::csvio::{fmt, write_atomic, SpectrumTable};
use super::{CliError, FitArgs, PolarscanArgs, ReportArgs, SimulateArgs};
use crate::fitting::{
    alternative_coupling, estimate_baseline, fit_fluorescence_with, fit_models, fit_spectrum,
    joint_fit_polar, FitConfig, FitParameter, FitResult, FixedParams, JointFitResult, ModelContext,
    Termination, DEFAULT_ALPHA,
};
use crate::lineshape::{
    absorption_cross_section, detected_spectrum_with, enhancement_factor, fluorescence_spectrum,
    lineshapes, linewidth_from_lifetime, resonance_visibility, EmitterParams, Lineshape, WeakField,
};
use crate::polarization::{analyzer_scan, JonesField, AnalyzerScan};
use crate::spectrum::Spectrum;
use crate::synth::{coherent_rate_check, simulate_counts, snr_estimate};

const VERSION: &str = env!("CARGO_PKG_VERSION");

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    write_atomic(path, text.as_bytes())
}

fn write_manifest(
    out: &Path,
    cfg: &RunConfig,
    command: &str,
    inputs: Vec<String>,
    outputs: Vec<String>,
) -> Result<(), CliError> {
    let mut manifest = cfg.clone();
    manifest.run = Some(RunInfo {
        command: command.into(),
        version: VERSION.into(),
        timestamp: now(),
        inputs,
        outputs,
    });
    let text = toml::to_string(&manifest).map_err(|e| CliError::Io(e.to_string()))?;
    write_text(&out.join("manifest.toml"), &text)
}

/// Config with CLI overrides folded in, so the manifest alone replays it.
fn resolved_config(path: &Path, seed: Option<u64>, saturation: bool) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(path)?;
    cfg.run = None;
    if let Some(s) = seed {
        cfg.acquisition.seed = s;
    }
    if saturation {
        cfg.lineshape = "saturation".into();
    }
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// simulate

pub fn cmd_simulate(a: &SimulateArgs) -> Result<(), CliError> {
    let mut cfg = resolved_config(&a.config, a.seed, a.saturation)?;
    if let Some(theta) = a.theta {
        cfg.polarization
            .as_mut()
            .ok_or_else(|| CliError::BadInput("--theta needs a [polarization] section".into()))?
            .analyzer_deg = Some(theta);
    }
    cfg.validate()?;

    let shape = cfg.lineshape()?;
    let p = cfg.emitter()?;
    let m = cfg.require_coupling()?;
    let grid = cfg.grid()?;
    let theta = cfg.polarization.as_ref().and_then(|pol| pol.analyzer_deg);
    let (model, i_e) = match theta {
        Some(t) => {
            let terms = cfg.setup()?.terms_at(t.to_radians());
            (terms.spectrum(&p, &grid, shape)?, terms.baseline)
        }
        None => (detected_spectrum_with(&p, &m, &grid, shape)?, m.i_e),
    };
    let noisy = simulate_counts(&model, &cfg.acquisition)?;

    let out = &a.out.out;
    let meta = |t: SpectrumTable| {
        t.with_meta("command", "simulate")
            .with_meta("lineshape", &cfg.lineshape)
            .with_meta("seed", cfg.acquisition.seed)
            .with_meta("i_e_cps", fmt(i_e))
    };
    let mut outputs = vec!["spectrum.csv".to_string(), "model.csv".to_string()];
    write_text(&out.join("spectrum.csv"), &meta(SpectrumTable::from_spectrum(&noisy, theta)).to_csv())?;
    write_text(&out.join("model.csv"), &meta(SpectrumTable::from_spectrum(&model, theta)).to_csv())?;

    if let Some(f) = cfg.fluorescence {
        let amp = f.peak / shape.value(&p, 0.0);
        let fl_model = fluorescence_spectrum(&p, amp, f.background, &grid, shape)?;
        // separate stream from the transmission channel
        let fl = simulate_counts(&fl_model, &cfg.acquisition.with_seed(cfg.acquisition.seed.wrapping_add(1)))?;
        write_text(
            &out.join("fluorescence.csv"),
            &SpectrumTable::from_spectrum(&fl, None)
                .with_meta("command", "simulate")
                .with_meta("channel", "fluorescence")
                .with_meta("seed", cfg.acquisition.seed.wrapping_add(1))
                .to_csv(),
        )?;
        outputs.push("fluorescence.csv".into());
    }
    write_manifest(out, &cfg, "simulate", vec![display(&a.config)], outputs)?;

    let mut report = String::new();
    let _ = writeln!(report, "wrote {} points to {}", grid.len(), display(&out.join("spectrum.csv")));
    if theta.is_none() {
        let _ = writeln!(report, "resonance visibility  {:+.4}", resonance_visibility(&p, &m));
        let _ = writeln!(report, "predicted SNR         {:.2}", snr_estimate(&p, &m, &cfg.acquisition));
    }
    print!("{report}");
    Ok(())
}

// ---------------------------------------------------------------------------
// fit

#[derive(Serialize)]
struct FitRecord<'a> {
    version: &'static str,
    inputs: Vec<String>,
    model: &'a str,
    converged: bool,
    termination: Termination,
    iterations: usize,
    residual_rms: f64,
    chi2_reduced: f64,
    params: &'a [FitParameter],
    /// Row-major over the free parameters.
    covariance: Vec<Vec<f64>>,
    covariance_singular: bool,
    warnings: &'a [String],
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    derived: BTreeMap<&'static str, f64>,
}

impl<'a> FitRecord<'a> {
    fn new(fit: &'a FitResult, inputs: Vec<String>, derived: BTreeMap<&'static str, f64>) -> Self {
        let n = fit.covariance.nrows();
        Self {
            version: VERSION,
            inputs,
            model: &fit.model,
            converged: fit.converged,
            termination: fit.termination,
            iterations: fit.iterations,
            residual_rms: fit.residual_rms,
            chi2_reduced: fit.chi2_reduced,
            params: &fit.params,
            covariance: (0..n).map(|i| (0..n).map(|j| fit.covariance[(i, j)]).collect()).collect(),
            covariance_singular: fit.covariance_singular,
            warnings: &fit.warnings,
            derived,
        }
    }
}

fn fit_table(fit: &FitResult, derived: &BTreeMap<&'static str, f64>) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "model {}  converged {}  ({:?}, {} iterations)",
        fit.model,
        if fit.converged { "yes" } else { "no" },
        fit.termination,
        fit.iterations
    );
    let _ = writeln!(s, "{:<12} {:>16} {:>12}", "parameter", "value", "std_err");
    for p in &fit.params {
        let err = match p.std_err {
            Some(e) => format!("{e:.4e}"),
            None => "fixed".into(),
        };
        let _ = writeln!(s, "{:<12} {:>16.8e} {:>12}", p.name, p.value, err);
    }
    for (k, v) in derived {
        let _ = writeln!(s, "{k:<12} {v:>16.8e}");
    }
    let _ = writeln!(s, "residual_rms {:.4e} cps   chi2_reduced {:.4}", fit.residual_rms, fit.chi2_reduced);
    for w in &fit.warnings {
        let _ = writeln!(s, "warning: {w}");
    }
    s
}

fn write_fit_outputs(
    out: &Path,
    fit: &FitResult,
    inputs: Vec<String>,
    derived: BTreeMap<&'static str, f64>,
    residuals: SpectrumTable,
) -> Result<(), CliError> {
    print!("{}", fit_table(fit, &derived));
    let record = FitRecord::new(fit, inputs, derived);
    let json = serde_json::to_string_pretty(&record).map_err(|e| CliError::Io(e.to_string()))?;
    write_text(&out.join("fit.json"), &json)?;
    write_text(&out.join("residuals.csv"), &residuals.with_meta("quantity", "data_minus_model").to_csv())?;
    if fit.converged {
        Ok(())
    } else {
        Err(CliError::NoConvergence(format!("fit did not converge ({:?})", fit.termination)))
    }
}

fn fit_lineshape(a: &FitArgs, cfg: Option<&RunConfig>) -> Result<&'static dyn Lineshape, CliError> {
    if a.saturation {
        return lineshapes().get("saturation").map_err(CliError::from);
    }
    match cfg {
        Some(c) => c.lineshape(),
        None => Ok(&WeakField),
    }
}

fn residual_table(spec: &Spectrum, model: impl Fn(f64) -> f64, theta_deg: Option<f64>) -> Result<SpectrumTable, CliError> {
    let res = Spectrum::new(
        spec.detunings().to_vec(),
        spec.iter().map(|(nu, y)| y - model(nu)).collect(),
    )?;
    Ok(SpectrumTable::from_spectrum(&res, theta_deg))
}

pub fn cmd_fit(a: &FitArgs) -> Result<(), CliError> {
    let cfg = a.config.as_deref().map(RunConfig::load).transpose()?;
    let shape = fit_lineshape(a, cfg.as_ref())?;
    let mut fixed = cfg.as_ref().map_or_else(FixedParams::default, RunConfig::fixed);
    if let Some(alpha) = a.alpha {
        fixed.alpha = alpha;
    }
    if let Some(g0) = a.gamma0 {
        fixed.gamma0 = Some(g0);
    }
    let fit_cfg = FitConfig::default();
    let inputs: Vec<String> = a.inputs.iter().map(|p| display(p)).collect();

    let mut derived = BTreeMap::new();
    if let Some(g) = a.gamma {
        fixed.gamma = Some(g);
    } else if let Some(path) = &a.fluorescence {
        let (_, spec) = single_spectrum(path)?;
        let fl = fit_fluorescence_with(&spec, shape, &fit_cfg)?;
        if !fl.converged {
            return Err(CliError::NoConvergence(format!(
                "fluorescence fit of {} did not converge",
                display(path)
            )));
        }
        let gamma = fl.get("gamma").expect("fluorescence model has gamma");
        derived.insert("gamma_from_fluorescence", gamma);
        fixed.gamma = Some(gamma);
    }
    let ctx = ModelContext::new(fixed, shape);

    if a.joint {
        return fit_joint(a, cfg.as_ref(), &ctx, &fit_cfg, inputs, derived);
    }
    if a.inputs.len() != 1 {
        return Err(CliError::BadInput(
            "a single fit takes one input file; use --joint for several".into(),
        ));
    }
    let (theta, spec) = single_spectrum(&a.inputs[0])?;
    let factory = fit_models().get(&a.model).map_err(CliError::from)?;
    let model = factory.build(&ctx)?;
    let mut fit = fit_spectrum(model.as_ref(), &spec, &fit_cfg)?;
    if model.name() == "transmission" {
        if let Some((c, psi)) = alternative_coupling(&fit) {
            fit.warnings.push(format!(
                "equivalent solution c_amp = {c:.6e}, psi = {psi:.6} fits identically"
            ));
        }
    }
    let x = fit.free_values();
    let residuals = residual_table(&spec, |nu| model.eval(nu, &x), theta)?;
    write_fit_outputs(&a.out.out, &fit, inputs, derived, residuals)
}

fn single_spectrum(path: &Path) -> Result<(Option<f64>, Spectrum), CliError> {
    let mut groups = SpectrumTable::read(path)?.split_by_theta()?;
    if groups.len() != 1 {
        return Err(CliError::BadInput(format!(
            "{} holds {} analyzer angles; use --joint",
            display(path),
            groups.len()
        )));
    }
    Ok(groups.remove(0))
}

fn fit_joint(
    a: &FitArgs,
    cfg: Option<&RunConfig>,
    ctx: &ModelContext,
    fit_cfg: &FitConfig,
    inputs: Vec<String>,
    mut derived: BTreeMap<&'static str, f64>,
) -> Result<(), CliError> {
    if ctx.fixed.gamma.is_none() {
        return Err(CliError::BadInput(
            "joint fit needs gamma: pass --gamma, --fluorescence or a config".into(),
        ));
    }
    if !a.theta.is_empty() && a.theta.len() != a.inputs.len() {
        return Err(CliError::BadInput(format!(
            "--theta lists {} angles for {} input files",
            a.theta.len(),
            a.inputs.len()
        )));
    }
    let mut thetas_deg = Vec::new();
    let mut spectra = Vec::new();
    for (k, path) in a.inputs.iter().enumerate() {
        for (theta, spec) in SpectrumTable::read(path)?.split_by_theta()? {
            let theta = a.theta.get(k).copied().or(theta).ok_or_else(|| {
                CliError::BadInput(format!(
                    "{} has no theta_deg column; pass --theta",
                    display(path)
                ))
            })?;
            thetas_deg.push(theta);
            spectra.push(spec);
        }
    }
    let baselines = spectra
        .iter()
        .map(|s| estimate_baseline(s, 0.15).map(|b| b.level))
        .collect::<crate::Result<Vec<_>>>()?;
    let scan = AnalyzerScan::new(thetas_deg.iter().map(|t| t.to_radians()).collect(), spectra, baselines)?;

    let linear = JonesField::linear(0.0, 1.0).expect("unit field");
    let (tip_guess, mol_guess) = match cfg.filter(|c| c.polarization.is_some()) {
        Some(c) => c.fields()?,
        None => (linear, linear),
    };
    let res = joint_fit_polar(&scan, &tip_guess, &mol_guess, ctx, fit_cfg)?;
    derived.extend(joint_derived(&res));

    let mut rows = SpectrumTable {
        detunings: vec![],
        values: vec![],
        sigma: None,
        theta_deg: Some(vec![]),
        metadata: BTreeMap::new(),
    };
    for ((theta, deg), spec) in scan.thetas.iter().zip(&thetas_deg).zip(&scan.spectra) {
        let t = residual_table(spec, |nu| res.intensity(*theta, nu, ctx.lineshape), Some(*deg))?;
        rows.detunings.extend(t.detunings);
        rows.values.extend(t.values);
        rows.theta_deg.as_mut().expect("theta column").extend(t.theta_deg.expect("theta column"));
    }
    write_fit_outputs(&a.out.out, &res.fit, inputs, derived, rows)
}

fn joint_derived(res: &JointFitResult) -> BTreeMap<&'static str, f64> {
    let base = res.setup.base;
    BTreeMap::from([
        ("tip_axis_deg", res.e_tip.axis_angle().to_degrees()),
        ("tip_ellipticity_deg", res.e_tip.ellipticity().to_degrees()),
        ("tip_extinction", res.tip_extinction_ratio),
        ("mol_axis_deg", res.e_mol.axis_angle().to_degrees()),
        ("mol_ellipticity_deg", res.e_mol.ellipticity().to_degrees()),
        ("mol_extinction", res.mol_extinction_ratio),
        ("axis_offset_deg", res.axis_offset.to_degrees()),
        ("theta_ref_deg", res.setup.theta_ref.to_degrees()),
        ("c_amp_ref", base.c_amp),
        ("psi_ref", base.psi),
        ("i_e_ref", base.i_e),
    ])
}

// ---------------------------------------------------------------------------
// polarscan

pub fn cmd_polarscan(a: &PolarscanArgs) -> Result<(), CliError> {
    let cfg = resolved_config(&a.config, a.seed, a.saturation)?;
    cfg.validate()?;
    let pol = cfg.polarization()?;
    let shape = cfg.lineshape()?;
    let p = cfg.emitter()?;
    let grid = cfg.grid()?;
    let setup = cfg.setup()?;
    let thetas = cfg.analyzer_angles()?;
    let mut scan = analyzer_scan(&p, &setup, &thetas, &grid, shape)?;
    if pol.noise {
        for (k, spec) in scan.spectra.iter_mut().enumerate() {
            let acq = cfg.acquisition.with_seed(cfg.acquisition.seed.wrapping_add(k as u64));
            *spec = simulate_counts(spec, &acq)?;
        }
    }

    let out = &a.out.out;
    let mut outputs = Vec::new();
    let width = thetas.len().to_string().len().max(3);
    for (k, (theta, spec)) in scan.thetas.iter().zip(&scan.spectra).enumerate() {
        let name = format!("theta_{k:0width$}.csv");
        let table = SpectrumTable::from_spectrum(spec, Some(theta.to_degrees()))
            .with_meta("command", "polarscan")
            .with_meta("lineshape", &cfg.lineshape)
            .with_meta("i_e_cps", fmt(scan.i_e_vs_theta[k]));
        write_text(&out.join(&name), &table.to_csv())?;
        outputs.push(name);
    }

    let mut map = String::from("theta_deg");
    for nu in &grid {
        let _ = write!(map, ",{}", fmt(*nu));
    }
    map.push('\n');
    for (theta, row) in scan.thetas.iter().zip(scan.visibility_map()) {
        map.push_str(&fmt(theta.to_degrees()));
        for v in row {
            let _ = write!(map, ",{}", fmt(v));
        }
        map.push('\n');
    }
    write_text(&out.join("visibility_map.csv"), &map)?;

    let mut summary = String::from(
        "theta_deg,i_e_cps,c_amp_mhz,psi_rad,resonance_visibility,direct_emission,crossed_sum_cps\n",
    );
    for c in &scan.couplings {
        let (c_amp, psi) = c.coupling.map_or((f64::NAN, f64::NAN), |m| (m.c_amp, m.psi));
        let on = c.terms.intensity(&p, p.nu21, shape);
        let vis = if c.terms.baseline > 0.0 { on / c.terms.baseline - 1.0 } else { f64::NAN };
        let _ = writeln!(
            summary,
            "{},{},{},{},{},{},{}",
            fmt(c.theta.to_degrees()),
            fmt(c.terms.baseline),
            fmt(c_amp),
            fmt(psi),
            fmt(vis),
            c.direct_emission,
            fmt(setup.crossed_pair_sum(&p, c.theta, p.nu21, shape)),
        );
    }
    write_text(&out.join("scan_summary.csv"), &summary)?;
    outputs.push("visibility_map.csv".into());
    outputs.push("scan_summary.csv".into());
    write_manifest(out, &cfg, "polarscan", vec![display(&a.config)], outputs)?;
    println!(
        "wrote {} angles x {} detunings to {}",
        thetas.len(),
        grid.len(),
        display(out)
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// report

#[derive(Serialize)]
struct ReportRow {
    name: &'static str,
    value: f64,
    unit: &'static str,
}

pub fn cmd_report(a: &ReportArgs) -> Result<(), CliError> {
    let cfg = a.config.as_deref().map(RunConfig::load).transpose()?;
    let em = cfg.as_ref().map(|c| &c.emitter);
    let need = |flag: Option<f64>, from_cfg: Option<f64>, name: &str| {
        flag.or(from_cfg)
            .ok_or_else(|| CliError::BadInput(format!("missing input `{name}`")))
    };
    let lambda = need(a.lambda_nm, em.and_then(|e| e.lambda_nm), "lambda_nm")?;
    let tau = need(a.tau_ns, em.and_then(|e| e.tau_ns), "tau_ns")?;
    let gamma = need(a.gamma, em.map(|e| e.gamma), "gamma")?;
    let alpha = a.alpha.or(em.map(|e| e.alpha)).unwrap_or(DEFAULT_ALPHA);

    let sigma = absorption_cross_section(lambda)?;
    let gamma0_tau = linewidth_from_lifetime(tau)?;
    let gamma0 = a.gamma0.or(em.and_then(|e| e.gamma0)).unwrap_or(gamma0_tau);
    let p = EmitterParams::new(em.map_or(0.0, |e| e.nu21), gamma, gamma0, alpha)?;

    let mut rows = vec![
        ReportRow { name: "sigma_abs", value: sigma, unit: "m^2" },
        ReportRow { name: "gamma0_from_lifetime", value: gamma0_tau, unit: "MHz" },
        ReportRow { name: "gamma0_used", value: gamma0, unit: "MHz" },
        ReportRow { name: "enhancement", value: enhancement_factor(&p), unit: "" },
    ];
    let coupling = match &cfg {
        Some(c) => c.coupling()?.map(|m| (m, c.acquisition)),
        None => None,
    };
    if let Some((m, acq)) = coupling {
        rows.push(ReportRow { name: "resonance_visibility", value: resonance_visibility(&p, &m), unit: "" });
        rows.push(ReportRow { name: "snr", value: snr_estimate(&p, &m, &acq), unit: "" });
        rows.push(ReportRow { name: "direct_molecular_rate", value: coherent_rate_check(&p, &m), unit: "cps" });
    }

    let mut s = String::new();
    for r in &rows {
        let _ = writeln!(s, "{:<24} {:>16.6e} {}", r.name, r.value, r.unit);
    }
    if coupling.is_none() {
        let _ = writeln!(s, "{:<24} {:>16} (needs a config with [coupling])", "snr", "n/a");
    }
    print!("{s}");
    if let Some(out) = &a.out {
        let json = serde_json::to_string_pretty(&rows).map_err(|e| CliError::Io(e.to_string()))?;
        write_text(&PathBuf::from(out).join("report.json"), &json)?;
    }
    Ok(())
}
