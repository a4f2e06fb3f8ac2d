//! Implementations of the `qflow` subcommands: orchestration, persistence,
//! and reporting on top of `qflow-core`.

use qflow_core::chaos::{self, InversionPlan};
use qflow_core::config::{self, NormalizedConfig};
use qflow_core::curvature::{ConformalState, Flow};
use qflow_core::fields::{self, MollifierProfile};
use qflow_core::forms::{
    self, CylinderFunctional, FlowMeasure, Polynomial, SamplerConfig, WindowBump, WindowedQ,
};
use qflow_core::geometry::{FieldCoeffs, TorusGeometry};
use qflow_core::report::{self, CriterionResult, ExperimentResult, Reported, RunRecord};
use qflow_core::stochastic::{MeasureState, SdeScheme, StochasticFlow};
use qflow_core::{acceptance, rng, stats, volume, QflowError, Result};
use rayon::prelude::*;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

const OK: ExitCode = ExitCode::SUCCESS;

fn criterion_failure() -> ExitCode {
    ExitCode::from(1)
}

fn load(path: &Path) -> Result<NormalizedConfig> {
    let text = std::fs::read_to_string(path)?;
    let norm = config::parse_config(&text)?;
    for w in &norm.warnings {
        eprintln!("warning: {w}");
    }
    Ok(norm)
}

fn out_dir(arg: Option<&Path>, norm: &NormalizedConfig) -> Result<PathBuf> {
    let dir = arg
        .map(|p| p.to_path_buf())
        .or_else(|| norm.raw.output.dir.as_ref().map(PathBuf::from))
        .or_else(|| std::env::var("QFLOW_OUT").ok().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("qflow-out"));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn validate(path: &Path) -> Result<ExitCode> {
    let norm = load(path)?;
    println!("config hash: {}", norm.hash);
    println!("{}", serde_json::to_string_pretty(&norm.derived)?);
    Ok(OK)
}

pub fn flow_det(path: &Path, out: Option<&Path>) -> Result<ExitCode> {
    let norm = load(path)?;
    let dir = out_dir(out, &norm)?;
    let geom = norm.geometry()?;
    let f = norm.prescribing(&geom)?;
    let phi0 = match &norm.raw.model.phi0 {
        Some(spec) => config::build_field(&geom, spec)?,
        None => FieldCoeffs::zeros(&geom),
    };
    let observables = default_observables(&geom);
    let s = &norm.raw.scheme;
    let scheme = match s.scheme {
        qflow_core::curvature::Scheme::Rk4 => qflow_core::curvature::Scheme::Rk4,
        qflow_core::curvature::Scheme::Imex => qflow_core::curvature::Scheme::Imex,
    };
    let traj = qflow_core::curvature::integrate(
        &geom,
        norm.raw.model.flavor,
        ConformalState::new(&geom, phi0),
        &f,
        norm.raw.model.rho,
        s.dt,
        s.t_end,
        scheme,
        norm.raw.output.cadence,
        &observables,
    )?;
    let mut header = vec!["t", "volume", "energy", "q_l2", "q_total"];
    let obs_names: Vec<String> = (0..observables.len())
        .map(|i| format!("omega_h{i}"))
        .collect();
    header.extend(obs_names.iter().map(|s| s.as_str()));
    report::write_csv(
        &dir.join("flow_det.csv"),
        &header,
        traj.points.iter().map(|p| {
            let mut row = vec![p.t, p.volume, p.energy, p.q_l2, p.q_total];
            row.extend(&p.pairings);
            row
        }),
    )?;
    println!("wrote {}", dir.join("flow_det.csv").display());
    if norm.raw.output.write_cells {
        let grid = geom.coeffs_to_grid(&traj.final_state.phi);
        let shape = vec![geom.grid(); geom.dim()];
        report::write_snapshot(&dir.join("flow_det_phi_final"), &shape, &grid)?;
        println!("wrote {}", dir.join("flow_det_phi_final.bin").display());
    }
    Ok(OK)
}

pub fn flow_sto(path: &Path, out: Option<&Path>) -> Result<ExitCode> {
    let norm = load(path)?;
    let dir = out_dir(out, &norm)?;
    let geom = norm.geometry()?;
    let f = norm.prescribing(&geom)?;
    let m = &norm.raw.model;
    let s = &norm.raw.scheme;
    let paths = norm.raw.experiment.paths;
    let seed = norm.raw.experiment.seed;
    let observables = default_observables(&geom);
    let phi0 = match &m.phi0 {
        Some(spec) => config::build_field(&geom, spec)?,
        None => FieldCoeffs::zeros(&geom),
    };
    let mut sde = SdeScheme::new(s.dt);
    sde.noise_mode = s.noise_mode;
    sde.mass_floor_factor = s.mass_floor_factor;
    sde.v_floor_factor = s.v_floor_factor;
    sde.v_ceil_factor = s.v_ceil_factor;

    let runs: Vec<_> = (0..paths)
        .into_par_iter()
        .map(|p| {
            let mut flow = StochasticFlow::new(&geom, m.flavor, &f, m.rho, m.sigma, sde).unwrap();
            let mut r = rng::stream(seed, "flow-sto", p as u64);
            flow.run(
                MeasureState::from_phi(&geom, &phi0),
                s.t_end,
                norm.raw.output.cadence,
                &observables,
                &mut r,
            )
        })
        .collect::<Result<Vec<_>>>()?;

    // Per-path CSV time series.
    for (p, run) in runs.iter().enumerate() {
        let mut header = vec!["t".to_string(), "volume".to_string()];
        header.extend((0..observables.len()).map(|i| format!("omega_h{i}")));
        let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
        report::write_csv(
            &dir.join(format!("flow_sto_path{p:04}.csv")),
            &header_refs,
            run.times.iter().enumerate().map(|(k, &t)| {
                let mut row = vec![t, run.volumes[k]];
                row.extend(&run.pairings[k]);
                row
            }),
        )?;
    }

    // Ensemble summary with the exact-law KS test on the final volumes.
    let alive: Vec<&qflow_core::stochastic::FlowRun> =
        runs.iter().filter(|r| r.cemetery_time.is_none()).collect();
    let finals: Vec<f64> = alive.iter().map(|r| *r.volumes.last().unwrap()).collect();
    let mut exp = ExperimentResult::new("flow-sto-ensemble");
    let (mean, se) = stats::mean_se(&finals);
    exp.report("final_volume_mean", Reported::with_se(mean, se));
    exp.report(
        "cemetery_fraction",
        Reported::exact((paths - alive.len()) as f64 / paths as f64),
    );
    let clamp = runs.iter().map(|r| r.clamp_fraction).sum::<f64>() / paths as f64;
    exp.report("clamp_fraction", Reported::exact(clamp));
    if clamp > 0.01 {
        exp.note("clamp fraction above 1%: run flagged unreliable");
    }
    if finals.len() >= 8 {
        let v0 = ConformalState::new(&geom, phi0.clone()).volume(&geom);
        let mut r = rng::stream(seed, "flow-sto-oracle", 0);
        let n = geom.dim() as f64;
        let exact: Vec<f64> = match m.flavor {
            Flow::Nqf => (0..4000)
                .map(|_| volume::besq0_transition(v0, s.t_end, n * m.sigma, &mut r))
                .collect::<Result<_>>()?,
            Flow::Lqf => {
                let spec = volume::CirSpec::from_flow(
                    geom.dim(),
                    geom.q_ref_const(),
                    geom.volume(),
                    m.rho,
                    m.sigma,
                )?;
                (0..4000)
                    .map(|_| volume::cir_transition(&spec, v0, s.t_end, &mut r))
                    .collect::<Result<_>>()?
            }
        };
        let ks = stats::ks_two_sample(&finals, &exact)?;
        exp.report("volume_ks_statistic", Reported::exact(ks.statistic));
        exp.report("volume_ks_p", Reported::exact(ks.p_value));
    }

    // Cemetery log.
    let cemetery: Vec<(usize, f64)> = runs
        .iter()
        .enumerate()
        .filter_map(|(p, r)| r.cemetery_time.map(|t| (p, t)))
        .collect();
    report::write_csv(
        &dir.join("flow_sto_cemetery.csv"),
        &["path", "time"],
        cemetery.iter().map(|&(p, t)| vec![p as f64, t]),
    )?;

    let mut record = RunRecord::new(&norm.hash, seed);
    record.warnings = norm.warnings.clone();
    record.exploratory = !norm.derived.sigma_subcritical;
    record.experiments.push(exp);
    write_json(&dir.join("flow_sto_summary.json"), &record)?;
    Ok(OK)
}

pub fn gmc_build(path: &Path, out: Option<&Path>) -> Result<ExitCode> {
    let norm = load(path)?;
    let dir = out_dir(out, &norm)?;
    let geom = norm.geometry()?;
    let gamma = norm.derived.gamma;
    let mut r = rng::stream(norm.raw.experiment.seed, "gmc-build", 0);
    let psi = fields::sample_cgf(&geom, &mut r);
    let m = chaos::build_gmc(&geom, &psi, gamma, 0.0)?;
    let mut exp = ExperimentResult::new("gmc-build");
    exp.report("gamma", Reported::exact(gamma));
    exp.report("counterterm", Reported::exact(m.counterterm));
    exp.report("total_mass", Reported::exact(m.cells.total()));
    exp.report(
        "max_cell",
        Reported::exact(m.cells.masses().iter().cloned().fold(0.0, f64::max)),
    );
    let mut record = RunRecord::new(&norm.hash, norm.raw.experiment.seed);
    record.experiments.push(exp);
    write_json(&dir.join("gmc_build_summary.json"), &record)?;
    if norm.raw.output.write_cells {
        report::write_csv(
            &dir.join("gmc_build_cells.csv"),
            &["cell", "mass"],
            m.cells
                .masses()
                .iter()
                .enumerate()
                .map(|(i, &v)| vec![i as f64, v]),
        )?;
        let shape = vec![geom.grid(); geom.dim()];
        report::write_snapshot(&dir.join("gmc_build_cells"), &shape, m.cells.masses())?;
    }
    Ok(OK)
}

pub fn gmc_moments(
    path: &Path,
    out: Option<&Path>,
    p_list: &[f64],
    trunc_list: &[u32],
) -> Result<ExitCode> {
    let norm = load(path)?;
    let dir = out_dir(out, &norm)?;
    let g = &norm.raw.geometry;
    let entries = chaos::gmc_moment_scan(
        g.n,
        g.period,
        g.grid,
        norm.derived.gamma,
        p_list,
        trunc_list,
        norm.raw.experiment.reps.max(1000),
        norm.raw.experiment.seed,
    )?;
    report::write_csv(
        &dir.join("gmc_moments.csv"),
        &["p", "trunc", "mean", "se"],
        entries
            .iter()
            .map(|e| vec![e.p, e.trunc as f64, e.mean, e.se]),
    )?;
    write_json(&dir.join("gmc_moments.json"), &entries)?;
    Ok(OK)
}

pub fn gmc_invert(path: &Path, out: Option<&Path>, eps: &[f64]) -> Result<ExitCode> {
    let norm = load(path)?;
    let dir = out_dir(out, &norm)?;
    let geom = norm.geometry()?;
    let gamma = norm.derived.gamma;
    let seed = norm.raw.experiment.seed;
    let mut plan = InversionPlan::new(
        &geom,
        MollifierProfile::Triangular,
        eps.to_vec(),
        norm.raw.experiment.reps.clamp(32, 512),
    )?;
    let mut rc = rng::stream(seed, "invert-ct", 0);
    let (f_const, f_se) = chaos::estimate_counterterm(&geom, gamma, &mut plan, &mut rc)?;
    let mut r = rng::stream(seed, "invert", 0);
    let psi = fields::sample_cgf(&geom, &mut r);
    let m = chaos::build_gmc(&geom, &psi, gamma, 0.0)?;
    let rec = chaos::invert_gmc(&geom, &m, &plan)?;
    let mut truth = Vec::new();
    let mut recovered = Vec::new();
    for idx in 0..geom.num_modes() {
        if idx == geom.zero_mode_index() || geom.frequency(idx).iter().any(|k| k.abs() > 2) {
            continue;
        }
        truth.push(psi.field.coeff(idx));
        recovered.push(rec.field.coeff(idx));
    }
    let corr = stats::correlation(&truth, &recovered);
    let mut exp = ExperimentResult::new("gmc-invert");
    exp.report("gamma", Reported::exact(gamma));
    exp.report("low_mode_correlation", Reported::exact(corr));
    exp.report("floored_cells", Reported::exact(rec.floored_cells as f64));
    for (i, (&fc, &fs)) in f_const.iter().zip(&f_se).enumerate() {
        exp.report(&format!("counterterm_eps{i}"), Reported::with_se(fc, fs));
    }
    let mut record = RunRecord::new(&norm.hash, seed);
    record.experiments.push(exp);
    write_json(&dir.join("gmc_invert_summary.json"), &record)?;
    report::write_csv(
        &dir.join("gmc_invert_modes.csv"),
        &["true_coeff", "recovered_coeff"],
        truth.iter().zip(&recovered).map(|(&a, &b)| vec![a, b]),
    )?;
    Ok(OK)
}

pub fn measure_sample(
    path: &Path,
    out: Option<&Path>,
    count: usize,
    full: bool,
) -> Result<ExitCode> {
    let norm = load(path)?;
    let dir = out_dir(out, &norm)?;
    let geom = norm.geometry()?;
    let f = norm.prescribing(&geom)?;
    let m = &norm.raw.model;
    let fm = FlowMeasure::new(&geom, m.flavor, &f, m.sigma, m.rho)?;
    let window = if full {
        None
    } else {
        Some(norm.raw.scheme.window_eps)
    };
    let h1 = FieldCoeffs::cosine_wave(&geom, &[1, 0]).ok_or_else(|| {
        QflowError::Config("truncation too small for the report observable".into())
    })?;
    let h1_grid = geom.coeffs_to_grid(&h1);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(count);
    let diag = forms::sample_symmetrizing(
        &fm,
        window,
        count,
        &SamplerConfig::default(),
        norm.raw.experiment.seed,
        "measure-sample",
        |state, w| {
            rows.push(vec![
                state.c,
                state.omega.cells.total(),
                state.omega.cells.pair(&h1_grid),
                w,
            ]);
        },
    )?;
    report::write_csv(
        &dir.join("measure_samples.csv"),
        &["c", "total_mass", "omega_cos_x1", "weight"],
        rows.into_iter(),
    )?;
    write_json(&dir.join("measure_diagnostics.json"), &diag)?;
    Ok(OK)
}

fn default_observables(geom: &TorusGeometry) -> Vec<FieldCoeffs> {
    let mut out = Vec::new();
    for freq in [[1, 0], [0, 1], [1, 1]] {
        let mut full = vec![0i32; geom.dim()];
        full[0] = freq[0];
        if geom.dim() > 1 {
            full[1] = freq[1];
        }
        if let Some(h) = FieldCoeffs::cosine_wave(geom, &full) {
            out.push(h);
        }
    }
    out
}

fn random_functional(geom: &TorusGeometry, seed: u64, idx: u64, eps: f64) -> CylinderFunctional {
    use rand::Rng;
    let mut r = rng::stream(seed, "cli-functional", idx);
    let mut draw = || r.random::<f64>() * 2.0 - 1.0;
    let poly = Polynomial {
        terms: vec![
            (1.0, vec![0, 0, 0]),
            (draw(), vec![0, 1, 0]),
            (draw(), vec![0, 0, 1]),
            (0.5 * draw(), vec![0, 1, 1]),
            (0.3 * draw(), vec![0, 2, 0]),
        ],
    };
    let q = WindowedQ::new(poly, WindowBump::mass_window(eps).unwrap()).unwrap();
    let h1 = FieldCoeffs::cosine_wave(geom, &[1, 0]).unwrap();
    let h2 = FieldCoeffs::cosine_wave(geom, &[0, 1]).unwrap();
    CylinderFunctional::new(geom, vec![h1, h2], Arc::new(q)).unwrap()
}

fn random_direction(geom: &TorusGeometry, seed: u64, idx: u64, grounded: bool) -> FieldCoeffs {
    use rand::Rng;
    let mut r = rng::stream(seed, "cli-direction", idx);
    let mut h = FieldCoeffs::zeros(geom);
    for i in 0..geom.num_modes() {
        if geom.frequency(i).iter().any(|k| k.abs() > 2) {
            continue;
        }
        if i == geom.zero_mode_index() && grounded {
            continue;
        }
        let v = r.random::<f64>() * 2.0 - 1.0;
        h.set_coeff(geom, i, v);
    }
    h
}

pub fn check_ibp(path: &Path, out: Option<&Path>, target: &str, pairs: usize) -> Result<ExitCode> {
    let norm = load(path)?;
    let dir = out_dir(out, &norm)?;
    let geom = norm.geometry()?;
    let seed = norm.raw.experiment.seed;
    let reps = norm.raw.experiment.reps.max(10_000);
    let eps = norm.raw.scheme.window_eps;
    let mut reports = Vec::new();
    match target {
        "grounded" | "ungrounded" => {
            let gamma = norm.derived.gamma;
            for k in 0..pairs {
                let g = random_functional(&geom, seed, k as u64, eps);
                let h = random_direction(&geom, seed, k as u64, false);
                let rep = if target == "grounded" {
                    forms::ibp_grounded(&geom, gamma, &g, &h, reps, seed ^ k as u64)?
                } else {
                    let vol = geom.volume();
                    let bump = WindowBump::new(-1.2 * vol, 1.2 * vol)?;
                    forms::ibp_ungrounded(&geom, gamma, &g, &h, &bump, reps, seed ^ k as u64)?
                };
                reports.push(rep);
            }
        }
        "nqf" | "lqf" => {
            let f = norm.prescribing(&geom)?;
            let m = &norm.raw.model;
            let flavor = if target == "nqf" {
                Flow::Nqf
            } else {
                Flow::Lqf
            };
            if flavor != m.flavor {
                return Err(QflowError::Config(format!(
                    "config flavor {:?} does not match target {target}",
                    m.flavor
                )));
            }
            let fm = FlowMeasure::new(&geom, flavor, &f, m.sigma, m.rho)?;
            for k in 0..pairs {
                let g = random_functional(&geom, seed, k as u64, eps);
                let h = random_direction(&geom, seed, k as u64, flavor == Flow::Lqf);
                reports.push(forms::ibp_flow_paired(
                    &fm,
                    &g,
                    &h,
                    eps,
                    reps,
                    &SamplerConfig::default(),
                    seed ^ (k as u64 + 31),
                )?);
            }
        }
        other => {
            return Err(QflowError::Config(format!(
                "unknown ibp target '{other}' (grounded|ungrounded|nqf|lqf)"
            )))
        }
    }
    write_json(&dir.join(format!("check_ibp_{target}.json")), &reports)?;
    let worst = reports.iter().map(|r| r.z.abs()).fold(0.0, f64::max);
    let pass = worst < 3.0;
    println!(
        "[{}] ibp {target}: {} pairs, worst |z| = {worst:.2}",
        if pass { "PASS" } else { "FAIL" },
        reports.len()
    );
    Ok(if pass { OK } else { criterion_failure() })
}

pub fn check_generator(path: &Path, out: Option<&Path>, pairs: usize) -> Result<ExitCode> {
    let norm = load(path)?;
    let dir = out_dir(out, &norm)?;
    let geom = norm.geometry()?;
    let f = norm.prescribing(&geom)?;
    let m = &norm.raw.model;
    let fm = FlowMeasure::new(&geom, m.flavor, &f, m.sigma, m.rho)?;
    let eps = norm.raw.scheme.window_eps;
    let seed = norm.raw.experiment.seed;
    let count = norm.raw.experiment.reps.clamp(2_000, 100_000);
    let mut rows = Vec::new();
    let mut worst: f64 = 0.0;
    for k in 0..pairs {
        let f_fun = random_functional(&geom, seed, 2 * k as u64, eps);
        let g_fun = random_functional(&geom, seed, 2 * k as u64 + 1, eps);
        let mut x_form = Vec::with_capacity(count);
        let mut x_sym = Vec::with_capacity(count);
        let mut ws = Vec::with_capacity(count);
        forms::sample_symmetrizing(
            &fm,
            Some(eps),
            count,
            &SamplerConfig::default(),
            seed ^ (k as u64 + 7),
            "check-generator",
            |state, w| {
                let fv = f_fun.value(&state.omega.cells);
                let gv = g_fun.value(&state.omega.cells);
                let lf = forms::apply_generator(&fm, &f_fun, state).unwrap();
                let lg = forms::apply_generator(&fm, &g_fun, state).unwrap();
                let carre = forms::form_integrand(&fm, &f_fun, &g_fun, state);
                x_form.push(fv * (-lg) - carre);
                x_sym.push(fv * lg - gv * lf);
                ws.push(w);
            },
        )?;
        let (m1, s1) = forms::weighted_mean_se(&x_form, &ws);
        let (m2, s2) = forms::weighted_mean_se(&x_sym, &ws);
        let z1 = m1 / s1.max(1e-300);
        let z2 = m2 / s2.max(1e-300);
        worst = worst.max(z1.abs()).max(z2.abs());
        rows.push(vec![k as f64, m1, s1, z1, m2, s2, z2]);
    }
    report::write_csv(
        &dir.join("check_generator.csv"),
        &[
            "pair",
            "form_mean",
            "form_se",
            "form_z",
            "sym_mean",
            "sym_se",
            "sym_z",
        ],
        rows.into_iter(),
    )?;
    let pass = worst < 3.0;
    println!(
        "[{}] generator identities: {pairs} pairs, worst |z| = {worst:.2}",
        if pass { "PASS" } else { "FAIL" }
    );
    Ok(if pass { OK } else { criterion_failure() })
}

pub fn check_stationary(path: &Path, out: Option<&Path>) -> Result<ExitCode> {
    let norm = load(path)?;
    let dir = out_dir(out, &norm)?;
    let m = &norm.raw.model;
    if m.flavor != Flow::Lqf {
        return Err(QflowError::Config(
            "stationarity check requires the LQF flavor".into(),
        ));
    }
    let geom = norm.geometry()?;
    if geom.q_ref_const() >= 0.0 || m.sigma * m.sigma > -2.0 * geom.q_ref_total() {
        return Err(QflowError::Config(format!(
            "invariant regime requires q_ref < 0 and sigma^2 <= -2 Q_ref(1) (= {})",
            -2.0 * geom.q_ref_total()
        )));
    }
    let f = norm.prescribing(&geom)?;
    let fm = FlowMeasure::new(&geom, Flow::Lqf, &f, m.sigma, m.rho)?;
    let seed = norm.raw.experiment.seed;
    let count = norm.raw.experiment.paths.max(100);

    // Two independent ensembles from the (finite) symmetrising measure.
    let sample_ensemble = |label: &str, s: u64| -> Result<Vec<MeasureState>> {
        let mut states = Vec::new();
        forms::sample_symmetrizing(
            &fm,
            None,
            count,
            &SamplerConfig {
                thin: 8,
                ..SamplerConfig::default()
            },
            s,
            label,
            |state, _| states.push(MeasureState::new(state.omega.cells.clone())),
        )?;
        Ok(states)
    };
    let init_a = sample_ensemble("stationary-a", seed)?;
    let init_b = sample_ensemble("stationary-b", seed ^ 0x5a5a)?;

    let h = FieldCoeffs::cosine_wave(&geom, &[1, 0])
        .ok_or_else(|| QflowError::Config("truncation too small".into()))?;
    let h_grid = geom.coeffs_to_grid(&h);
    let g1 = random_functional(&geom, seed, 1001, 0.005);
    let g2 = random_functional(&geom, seed, 1002, 0.005);
    let observe = |st: &MeasureState| -> [f64; 4] {
        [
            st.volume(),
            st.masses.pair(&h_grid),
            g1.value(&st.masses),
            g2.value(&st.masses),
        ]
    };
    let obs_a: Vec<[f64; 4]> = init_a.iter().map(&observe).collect();

    let s = &norm.raw.scheme;
    let mut sde = SdeScheme::new(s.dt);
    sde.noise_mode = s.noise_mode;
    sde.mass_floor_factor = s.mass_floor_factor;
    let obs_b: Vec<[f64; 4]> = init_b
        .into_par_iter()
        .enumerate()
        .filter_map(|(p, st)| {
            let mut flow = StochasticFlow::new(&geom, Flow::Lqf, &f, m.rho, m.sigma, sde).ok()?;
            let mut r = rng::stream(seed, "stationary-flow", p as u64);
            let run = flow.run(st, s.t_end, usize::MAX / 2, &[], &mut r).ok()?;
            let fin = run.final_state?;
            fin.alive.then(|| observe(&fin))
        })
        .collect();

    let names = ["V", "omega_cos_x1", "G1", "G2"];
    let mut exp = ExperimentResult::new("lqf-stationarity");
    exp.report(
        "polyakov_liouville_rho",
        Reported::exact(1.0 + geom.a_n() * geom.dim() as f64 * m.sigma * m.sigma / 4.0),
    );
    exp.report(
        "polyakov_liouville_flag",
        Reported::exact(if norm.derived.polyakov_liouville {
            1.0
        } else {
            0.0
        }),
    );
    let mut all_pass = true;
    for (j, name) in names.iter().enumerate() {
        let a: Vec<f64> = obs_a.iter().map(|o| o[j]).collect();
        let b: Vec<f64> = obs_b.iter().map(|o| o[j]).collect();
        let ks = stats::ks_two_sample(&a, &b)?;
        exp.report(&format!("ks_p_{name}"), Reported::exact(ks.p_value));
        all_pass &= ks.p_value > 0.01;
    }
    let line = if all_pass { "PASS" } else { "SOFT-FAIL" };
    let summary: Vec<String> = exp
        .values
        .iter()
        .map(|(k, v)| format!("{k} = {:.4}", v.value))
        .collect();
    println!("[{line}] stationarity: {}", summary.join(", "));
    let mut record = RunRecord::new(&norm.hash, seed);
    record.experiments.push(exp);
    write_json(&dir.join("check_stationary.json"), &record)?;
    // Soft criterion: diagnostics only, never a failing exit code.
    Ok(OK)
}

pub fn vol_besq(
    v0: f64,
    t: f64,
    coeff: f64,
    samples: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<ExitCode> {
    let mut r = rng::stream(seed, "vol-besq", 0);
    let xs: Vec<f64> = (0..samples)
        .map(|_| volume::besq0_transition(v0, t, coeff, &mut r))
        .collect::<Result<_>>()?;
    let absorb = volume::besq0_absorption_prob(v0, t, coeff)?;
    let dir = out
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| PathBuf::from("qflow-out"));
    std::fs::create_dir_all(&dir)?;
    report::write_csv(
        &dir.join("vol_besq.csv"),
        &["sample"],
        xs.iter().map(|&x| vec![x]),
    )?;
    let (mean, se) = stats::mean_se(&xs);
    let zero_fraction = xs.iter().filter(|&&x| x == 0.0).count() as f64 / samples as f64;
    let mut exp = ExperimentResult::new("vol-besq");
    exp.report("mean", Reported::with_se(mean, se));
    exp.report("absorbed_fraction", Reported::exact(zero_fraction));
    exp.report("absorption_exact", Reported::exact(absorb));
    write_json(&dir.join("vol_besq.json"), &exp)?;
    println!(
        "besq0: mean {mean:.6} ± {se:.6} (martingale target {v0}), absorbed {zero_fraction:.4} (exact {absorb:.4})"
    );
    Ok(OK)
}

#[allow(clippy::too_many_arguments)]
pub fn vol_cir(
    v0: f64,
    t: f64,
    n: usize,
    q_ref: f64,
    v_ref: f64,
    rho: f64,
    sigma: f64,
    samples: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<ExitCode> {
    let spec = volume::CirSpec::from_flow(n, q_ref, v_ref, rho, sigma)?;
    let mut r = rng::stream(seed, "vol-cir", 0);
    let xs: Vec<f64> = (0..samples)
        .map(|_| volume::cir_transition(&spec, v0, t, &mut r))
        .collect::<Result<_>>()?;
    let dir = out
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| PathBuf::from("qflow-out"));
    std::fs::create_dir_all(&dir)?;
    report::write_csv(
        &dir.join("vol_cir.csv"),
        &["sample"],
        xs.iter().map(|&x| vec![x]),
    )?;
    let (mean, se) = stats::mean_se(&xs);
    let (want_mean, want_var) = volume::cir_mean_var(&spec, v0, t);
    let mut exp = ExperimentResult::new("vol-cir");
    exp.report("mean", Reported::with_se(mean, se));
    exp.report("mean_exact", Reported::exact(want_mean));
    exp.report("var", Reported::exact(stats::variance(&xs)));
    exp.report("var_exact", Reported::exact(want_var));
    exp.report(
        "feller_stated",
        Reported::exact(spec.feller_stated as u8 as f64),
    );
    exp.report(
        "feller_exact",
        Reported::exact(spec.feller_exact as u8 as f64),
    );
    write_json(&dir.join("vol_cir.json"), &exp)?;
    println!(
        "cir: mean {mean:.6} ± {se:.6} (exact {want_mean:.6}), var {:.6} (exact {want_var:.6}), feller stated {} exact {}",
        stats::variance(&xs),
        spec.feller_stated,
        spec.feller_exact,
    );
    if let Ok(law) = volume::cir_stationary(&spec) {
        println!(
            "stationary law: Gamma(shape {:.6}, scale {:.6})",
            law.shape, law.scale
        );
    }
    Ok(OK)
}

fn read_samples(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines() {
        let field = line.split(',').next().unwrap_or("").trim();
        if field.is_empty() {
            continue;
        }
        match field.parse::<f64>() {
            Ok(v) => out.push(v),
            Err(_) => continue, // header line
        }
    }
    if out.is_empty() {
        return Err(QflowError::Config(format!(
            "no numeric samples in {}",
            path.display()
        )));
    }
    Ok(out)
}

pub fn vol_compare(a: &Path, b: &Path) -> Result<ExitCode> {
    let xs = read_samples(a)?;
    let ys = read_samples(b)?;
    let ks = stats::ks_two_sample(&xs, &ys)?;
    let dir = PathBuf::from(std::env::var("QFLOW_OUT").unwrap_or_else(|_| "qflow-out".into()));
    std::fs::create_dir_all(&dir)?;
    write_json(&dir.join("vol_compare.json"), &ks)?;
    println!(
        "two-sample KS: statistic {:.6}, p = {:.6} ({} vs {} samples, {} tail)",
        ks.statistic,
        ks.p_value,
        xs.len(),
        ys.len(),
        if ks.exact { "exact" } else { "asymptotic" }
    );
    Ok(if ks.p_value > 0.01 {
        OK
    } else {
        criterion_failure()
    })
}

pub fn suite_run(path: &Path, out: Option<&Path>, suite: &str) -> Result<ExitCode> {
    let norm = load(path)?;
    let dir = out_dir(out, &norm)?;
    let seed = norm.raw.experiment.seed;
    let start = Instant::now();

    let criteria: Vec<CriterionResult> = match suite {
        "unit" => {
            // The fast exact subset.
            let fns: Vec<fn(u64) -> CriterionResult> = vec![
                acceptance::criterion_exact_identities,
                acceptance::criterion_gradient_consistency,
                acceptance::criterion_volume_conservation,
            ];
            fns.into_par_iter().map(|f| f(seed)).collect()
        }
        "acceptance" | "full" => {
            let fns: Vec<fn(u64) -> CriterionResult> = vec![
                acceptance::criterion_exact_identities,
                acceptance::criterion_gradient_consistency,
                acceptance::criterion_volume_conservation,
                acceptance::criterion_ibp_battery,
                acceptance::criterion_generator_form,
                acceptance::criterion_volume_laws,
                acceptance::criterion_projected_residuals,
                acceptance::criterion_gmc_moments,
                acceptance::criterion_gmc_inversion,
                acceptance::criterion_lqf_stationarity,
            ];
            fns.into_par_iter().map(|f| f(seed)).collect()
        }
        other => {
            return Err(QflowError::Config(format!(
                "unknown suite '{other}' (unit|acceptance|full)"
            )))
        }
    };

    let mut record = RunRecord::new(&norm.hash, seed);
    record.warnings = norm.warnings.clone();
    record.exploratory = !norm.derived.sigma_subcritical;
    record.criteria = criteria;
    record.wall_clock_ms = start.elapsed().as_millis();

    if suite == "full" {
        // Also run the configured flow experiments into the output dir.
        flow_det(path, Some(&dir))?;
        flow_sto(path, Some(&dir))?;
    }

    for c in &record.criteria {
        println!("{}", c.line());
    }
    write_json(&dir.join("suite_record.json"), &record)?;
    std::fs::write(dir.join("suite_record.md"), record.to_markdown())?;
    println!("wrote {}", dir.join("suite_record.md").display());
    report::write_csv(
        &dir.join("suite_record.csv"),
        &["criterion", "passed", "soft"],
        record
            .criteria
            .iter()
            .enumerate()
            .map(|(i, c)| vec![i as f64 + 1.0, c.passed as u8 as f64, c.soft as u8 as f64]),
    )?;

    let hard_fail = record.criteria.iter().any(|c| !c.passed && !c.soft);
    Ok(if hard_fail { criterion_failure() } else { OK })
}
