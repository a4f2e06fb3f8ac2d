//! The acceptance suite: every release gate as an executable check.
//!
//! Each criterion builds its own desk-scale configuration, runs the
//! computation at pinned tolerances, and returns a [`CriterionResult`].
//! Statistical criteria use fixed seeds, so the suite is deterministic; the
//! stationarity criterion is soft (a failure yields a diagnostic line, not a
//! suite failure).

use crate::chaos::{self, InversionPlan};
use crate::curvature::{self, ConformalState, Energy, Flow, PrescribingFunction, Scheme};
use crate::fields::{self, MollifierProfile};
use crate::forms::{
    self, ChaosState, CylinderFunctional, FlowMeasure, Polynomial, SamplerConfig, WindowBump,
    WindowedQ,
};
use crate::geometry::{FieldCoeffs, Operator, TorusGeometry};
use crate::report::CriterionResult;
use crate::rng;
use crate::stats;
use crate::stochastic::{MeasureState, SdeScheme, StochasticFlow};
use crate::volume;
use rand::Rng;
use std::f64::consts::PI;
use std::sync::Arc;

fn result(
    id: &str,
    description: &str,
    passed: bool,
    soft: bool,
    details: String,
) -> CriterionResult {
    CriterionResult {
        id: id.to_string(),
        description: description.to_string(),
        passed,
        soft,
        details,
    }
}

fn t2(grid: usize, trunc: u32, q_ref: f64) -> TorusGeometry {
    TorusGeometry::new(2, 2.0 * PI, grid, trunc, q_ref).unwrap()
}

fn random_low_mode(
    geom: &TorusGeometry,
    rng: &mut impl Rng,
    max_freq: i32,
    amp: f64,
    grounded: bool,
) -> FieldCoeffs {
    let mut out = FieldCoeffs::zeros(geom);
    for idx in 0..geom.num_modes() {
        if geom.frequency(idx).iter().any(|k| k.abs() > max_freq) {
            continue;
        }
        if idx == geom.zero_mode_index() {
            if !grounded {
                out.set_coeff(geom, idx, amp * (rng.random::<f64>() * 2.0 - 1.0));
            }
            continue;
        }
        out.set_coeff(geom, idx, amp * (rng.random::<f64>() * 2.0 - 1.0));
    }
    out
}

fn random_windowed_functional(
    geom: &TorusGeometry,
    rng: &mut impl Rng,
    eps: f64,
) -> CylinderFunctional {
    let c = |r: &mut dyn FnMut() -> f64| -> f64 { r() };
    let mut draw = || rng.random::<f64>() * 2.0 - 1.0;
    let poly = Polynomial {
        terms: vec![
            (1.0, vec![0, 0, 0]),
            (c(&mut draw), vec![0, 1, 0]),
            (c(&mut draw), vec![0, 0, 1]),
            (0.5 * c(&mut draw), vec![0, 1, 1]),
            (0.3 * c(&mut draw), vec![0, 2, 0]),
        ],
    };
    let q = WindowedQ::new(poly, WindowBump::mass_window(eps).unwrap()).unwrap();
    let h1 = FieldCoeffs::cosine_wave(geom, &[1, 0]).unwrap();
    let h2 = {
        let a = FieldCoeffs::cosine_wave(geom, &[0, 1]).unwrap();
        let b = FieldCoeffs::cosine_wave(geom, &[1, 1]).unwrap();
        a.add_scaled(geom, &b, 0.6)
    };
    CylinderFunctional::new(geom, vec![h1, h2], Arc::new(q)).unwrap()
}

/// Criterion 1: exact algebraic identities at machine precision (<= 1e-10).
pub fn criterion_exact_identities(seed: u64) -> CriterionResult {
    let tol = 1e-10;
    let mut worst: f64 = 0.0;
    let mut fails: Vec<String> = Vec::new();
    let mut check = |name: &str, err: f64| {
        worst = worst.max(err);
        if err > tol {
            fails.push(format!("{name}: {err:.3e}"));
        }
    };

    // Self-adjointness of P under quadrature.
    let geom = t2(64, 16, 0.0);
    let mut r = rng::stream(seed, "c1", 0);
    for _ in 0..5 {
        let u = random_low_mode(&geom, &mut r, 16, 1.0, false);
        let v = random_low_mode(&geom, &mut r, 16, 1.0, false);
        let pu = geom.apply_operator(Operator::P, &u).unwrap();
        let pv = geom.apply_operator(Operator::P, &v).unwrap();
        let ug = geom.coeffs_to_grid(&u);
        let vg = geom.coeffs_to_grid(&v);
        let pug = geom.coeffs_to_grid(&pu);
        let pvg = geom.coeffs_to_grid(&pv);
        let a: f64 = ug.iter().zip(&pvg).map(|(x, y)| x * y).sum::<f64>();
        let b: f64 = vg.iter().zip(&pug).map(|(x, y)| x * y).sum::<f64>();
        let scale = geom.sobolev_norm(&u, 0.0) * geom.sobolev_norm(&v, 0.0);
        check(
            "self-adjointness",
            (a - b).abs() * geom.cell_volume() / scale,
        );
    }

    // Green ∘ p = identity on grounded fields.
    {
        let u = random_low_mode(&geom, &mut r, 16, 1.0, true);
        let pu = geom.apply_operator(Operator::PNorm, &u).unwrap();
        let back = geom.apply_operator(Operator::Green, &pu).unwrap();
        let err = u
            .coeffs()
            .iter()
            .zip(back.coeffs())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        check("green-inversion", err);
    }

    // GMC shift property, both construction orders, cellwise.
    {
        let geom = t2(32, 8, 0.0);
        let gamma = 0.7;
        let psi = fields::sample_cgf(&geom, &mut r);
        let h = random_low_mode(&geom, &mut r, 2, 0.5, false);
        let m = chaos::build_gmc(&geom, &psi, gamma, 0.0).unwrap();
        let shifted = chaos::gmc_shift(&geom, &m, &h);
        let direct = chaos::build_gmc_from_grid(
            &geom,
            &geom.coeffs_to_grid(&psi.field.add_scaled(&geom, &h, 1.0)),
            gamma,
            0.0,
        );
        let err = shifted
            .cells
            .masses()
            .iter()
            .zip(direct.cells.masses())
            .map(|(a, b)| ((a - b) / b).abs())
            .fold(0.0, f64::max);
        check("gmc-shift", err);
    }

    // h = 1 cases of the IBP identities (pointwise-exact parts).
    {
        let geom = t2(32, 8, 0.3);
        let gamma = 0.5;
        let g = random_windowed_functional(&geom, &mut r, 0.15);
        let sigma = 0.8;
        let n = geom.dim() as f64;
        let s2 = sigma * sigma;
        for _ in 0..10 {
            let psi = fields::sample_cgf(&geom, &mut r).field;
            let one = FieldCoeffs::constant(&geom, 1.0);
            check("pairing-one", geom.pairing_e(&one, &psi).abs());
            let state = ChaosState::new(&geom, psi, -2.0, gamma).unwrap();
            // Grounded identity: D_1 G = D_h̄ G with h̄ = 1.
            let one_grid = geom.coeffs_to_grid(&one);
            let dh = forms::frechet_derivative(&geom, &g, &state, &one);
            let args: Vec<f64> = (0..g.arity())
                .map(|i| state.omega.cells.pair(g.h_grid(i)))
                .collect();
            let mut dbar = 0.0;
            for i in 0..g.arity() {
                dbar += g.q.partial(i, &args) * args[i];
            }
            dbar *= gamma;
            let _ = one_grid;
            let scale = dh.abs().max(1.0);
            check("grounded-ibp-h1", (dh - dbar).abs() / scale);
            // NQF theorem, h = 1: the Q_ref(1)/Q_ref terms cancel exactly.
            let gv = g.value(&state.omega.cells);
            let w_f: f64 = state.omega.cells.total(); // f ≡ 1 here
            let t1 = 2.0 * gamma * geom.q_ref_total() / (n * s2) * gv * w_f / w_f;
            let t2v = 2.0 * gamma * geom.q_ref_const() / (n * s2) * geom.volume() * gv;
            check("nqf-ibp-h1", (t1 - t2v).abs() / t1.abs().max(1.0));
        }
    }

    // NQF h = 1 projected drift vanishes identically.
    {
        let geom = t2(32, 8, 0.5);
        let f = PrescribingFunction::constant(&geom, 1.5).unwrap();
        let flow =
            StochasticFlow::new(&geom, Flow::Nqf, &f, 1.0, 0.5, SdeScheme::new(1e-3)).unwrap();
        let phi = random_low_mode(&geom, &mut r, 2, 0.3, true);
        let state = MeasureState::from_phi(&geom, &phi);
        let drift = flow.drift_cells(&state).unwrap();
        let total: f64 = drift.iter().sum();
        check("nqf-h1-drift", total.abs() / state.volume());
        let one = FieldCoeffs::constant(&geom, 1.0);
        check(
            "nqf-h1-projected",
            flow.projected_drift(&state, &one).unwrap().abs() / state.volume(),
        );
    }

    // Q(1) is the conformal invariant q_ref L^n for any state.
    {
        let geom = t2(32, 8, -0.7);
        for _ in 0..5 {
            let phi = random_low_mode(&geom, &mut r, 3, 0.5, false);
            let st = ConformalState::new(&geom, phi);
            let one = FieldCoeffs::constant(&geom, 1.0);
            let q1 = curvature::q_pairing(&geom, &st, &one).unwrap();
            check(
                "q1-invariance",
                (q1 - geom.q_ref_total()).abs() / geom.q_ref_total().abs(),
            );
        }
    }

    let passed = fails.is_empty();
    result(
        "C1",
        "exact algebraic identities (machine precision <= 1e-10)",
        passed,
        false,
        if passed {
            format!("worst deviation {worst:.3e}")
        } else {
            format!("violations: {}", fails.join("; "))
        },
    )
}

/// Criterion 2: flow_rhs equals the negative energy gradient by central
/// finite differences, relative error < 1e-6, 20 random cases per flavour.
pub fn criterion_gradient_consistency(seed: u64) -> CriterionResult {
    let mut worst: f64 = 0.0;
    let mut fails = 0usize;
    let mut r = rng::stream(seed, "c2", 0);
    for (which, energy, q_ref, f_val, rho) in [
        (Flow::Nqf, Energy::E1, 0.4, 1.7, 1.0),
        (Flow::Lqf, Energy::E2, -0.6, -0.8, 1.3),
    ] {
        let geom = t2(32, 8, q_ref);
        let f = PrescribingFunction::constant(&geom, f_val).unwrap();
        for _ in 0..20 {
            let phi = random_low_mode(&geom, &mut r, 3, 0.3, false);
            let h = random_low_mode(&geom, &mut r, 3, 1.0, false);
            let state = ConformalState::new(&geom, phi);
            let pairing = curvature::rhs_energy_pairing(&geom, which, &state, &f, rho, &h).unwrap();
            let dd =
                curvature::energy_directional_derivative(&geom, energy, &state, &f, rho, &h, 1e-5)
                    .unwrap();
            let rel = (pairing + dd).abs() / dd.abs().max(1e-9);
            worst = worst.max(rel);
            if rel >= 1e-6 {
                fails += 1;
            }
        }
    }
    result(
        "C2",
        "gradient-flow consistency by central finite differences (< 1e-6)",
        fails == 0,
        false,
        format!("worst relative error {worst:.3e} over 40 cases"),
    )
}

/// Criterion 3: deterministic NQF volume conservation with the imex scheme.
pub fn criterion_volume_conservation(seed: u64) -> CriterionResult {
    let geom = t2(32, 8, 0.0);
    let mut r = rng::stream(seed, "c3", 0);
    let phi = random_low_mode(&geom, &mut r, 3, 0.3, true);
    let state = ConformalState::new(&geom, phi);
    let v0 = state.volume(&geom);
    let f = PrescribingFunction::constant(&geom, 1.0).unwrap();
    let traj = curvature::integrate(
        &geom,
        Flow::Nqf,
        state,
        &f,
        1.0,
        1e-3,
        1.0,
        Scheme::Imex,
        100,
        &[],
    );
    match traj {
        Ok(t) => {
            let drift = t
                .points
                .iter()
                .map(|p| (p.volume - v0).abs() / v0)
                .fold(0.0, f64::max);
            result(
                "C3",
                "deterministic NQF volume conservation (imex, T = 1, < 1e-8)",
                drift < 1e-8,
                false,
                format!("max relative volume drift {drift:.3e}"),
            )
        }
        Err(e) => result(
            "C3",
            "deterministic NQF volume conservation",
            false,
            false,
            e.to_string(),
        ),
    }
}

/// Criterion 4: Gaussian IBP Monte Carlo battery — 50 random (G, h) pairs at
/// 1e5 samples each, |z| < 3 for all, and the z-scores pass a normality KS
/// test at 1%.
pub fn criterion_ibp_battery(seed: u64) -> CriterionResult {
    let reps = 100_000usize;
    let eps = 0.15;
    let mut zs: Vec<f64> = Vec::with_capacity(50);
    let mut details = Vec::new();

    // 18 grounded pairs.
    {
        let geom = t2(32, 6, 0.0);
        let gamma = 0.5;
        for pair in 0..18u64 {
            let mut r = rng::stream(seed, "c4-grounded-setup", pair);
            let g = random_windowed_functional(&geom, &mut r, 0.02);
            let mut h = random_low_mode(&geom, &mut r, 2, 1.0, false);
            let zi = geom.zero_mode_index();
            h.set_coeff(&geom, zi, r.random::<f64>() - 0.5);
            let rep =
                forms::ibp_grounded_paired(&geom, gamma, &g, &h, reps, seed ^ (pair + 1)).unwrap();
            zs.push(rep.z);
        }
    }

    // 16 NQF + 16 LQF pairs.
    for (flavor, q_ref, f_const, label) in [
        (Flow::Nqf, 0.02, 1.0, "c4-nqf"),
        (Flow::Lqf, -0.02, -1.0, "c4-lqf"),
    ] {
        let geom = t2(32, 6, q_ref);
        let f = PrescribingFunction::constant(&geom, f_const).unwrap();
        let fm = FlowMeasure::new(&geom, flavor, &f, 0.8, 1.0).unwrap();
        let cfg = SamplerConfig::default();
        for pair in 0..16u64 {
            let mut r = rng::stream(seed, label, pair);
            let g = random_windowed_functional(&geom, &mut r, eps);
            let grounded = flavor == Flow::Lqf;
            let mut h = random_low_mode(&geom, &mut r, 2, 1.0, grounded);
            if !grounded {
                let zi = geom.zero_mode_index();
                h.set_coeff(&geom, zi, r.random::<f64>() - 0.5);
            }
            let rep =
                forms::ibp_flow_paired(&fm, &g, &h, eps, reps, &cfg, seed ^ (pair + 101)).unwrap();
            zs.push(rep.z);
        }
    }

    let max_z = zs.iter().cloned().fold(0.0f64, |a, b| a.max(b.abs()));
    let ks = stats::ks_one_sample(&zs, stats::normal_cdf).unwrap();
    let all_in = max_z < 3.0;
    let normal = ks.p_value > 0.01;
    details.push(format!(
        "{} pairs, max |z| = {max_z:.2}, z-battery KS p = {:.3}",
        zs.len(),
        ks.p_value
    ));
    result(
        "C4",
        "Gaussian IBP Monte Carlo battery (grounded, NQF, LQF)",
        all_in && normal,
        false,
        details.join("; "),
    )
}

/// Criterion 5: generator/form identity and symmetry, both flavours,
/// 10 random pairs each, within 3 SE.
pub fn criterion_generator_form(seed: u64) -> CriterionResult {
    let eps = 0.15;
    let count = 20_000usize;
    let mut worst_z: f64 = 0.0;
    let mut fails = 0usize;
    for (flavor, q_ref, f_const, label) in [
        (Flow::Nqf, 0.02, 1.0, "c5-nqf"),
        (Flow::Lqf, -0.02, -1.0, "c5-lqf"),
    ] {
        let geom = t2(32, 6, q_ref);
        let f = PrescribingFunction::constant(&geom, f_const).unwrap();
        let fm = FlowMeasure::new(&geom, flavor, &f, 0.8, 1.0).unwrap();
        let cfg = SamplerConfig::default();
        for pair in 0..10u64 {
            let mut r = rng::stream(seed, label, pair);
            let f_fun = random_windowed_functional(&geom, &mut r, eps);
            let g_fun = random_windowed_functional(&geom, &mut r, eps);
            let mut x_form = Vec::with_capacity(count);
            let mut x_sym = Vec::with_capacity(count);
            let mut ws = Vec::with_capacity(count);
            forms::sample_symmetrizing(
                &fm,
                Some(eps),
                count,
                &cfg,
                seed ^ (pair + 7),
                label,
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
            )
            .unwrap();
            for xs in [&x_form, &x_sym] {
                let (mean, se) = forms::weighted_mean_se(xs, &ws);
                let z = mean / se.max(1e-300);
                worst_z = worst_z.max(z.abs());
                if z.abs() >= 3.0 {
                    fails += 1;
                }
            }
        }
    }
    result(
        "C5",
        "generator/form identity and Dirichlet symmetry (3 SE, 10 pairs, both flavours)",
        fails == 0,
        false,
        format!("worst |z| = {worst_z:.2} over 40 tests"),
    )
}

/// Criterion 6: volume laws — NQF vs exact BESQ⁰ at t in {0.1, 1}, LQF vs
/// exact CIR, and CIR positivity under the Feller regime.
pub fn criterion_volume_laws(seed: u64) -> CriterionResult {
    let mut details = Vec::new();
    let mut ok = true;

    // NQF ensemble (per-cell noise kept inside the scheme's reliable
    // envelope: σ_φ² = σ²/(2Λ·cell_vol) small).
    {
        let geom = t2(8, 2, 0.0);
        let f = PrescribingFunction::constant(&geom, 1.0).unwrap();
        let sigma = 0.3;
        let n = geom.dim() as f64;
        let v0 = geom.volume();
        let paths = 300usize;
        let mut at_01 = Vec::with_capacity(paths);
        let mut at_1 = Vec::with_capacity(paths);
        for p in 0..paths {
            let mut flow =
                StochasticFlow::new(&geom, Flow::Nqf, &f, 1.0, sigma, SdeScheme::new(1e-3))
                    .unwrap();
            let mut r = rng::stream(seed, "c6-nqf", p as u64);
            let run = flow
                .run(MeasureState::uniform(&geom, v0), 1.0, 100, &[], &mut r)
                .unwrap();
            if run.cemetery_time.is_some() {
                continue;
            }
            let v_at = |t: f64| -> f64 {
                let idx = run
                    .times
                    .iter()
                    .position(|&x| (x - t).abs() < 1e-9)
                    .unwrap();
                run.volumes[idx]
            };
            at_01.push(v_at(0.1));
            at_1.push(v_at(1.0));
        }
        let mut r = rng::stream(seed, "c6-besq", 0);
        for (t, sims) in [(0.1, &at_01), (1.0, &at_1)] {
            let exact: Vec<f64> = (0..3000)
                .map(|_| volume::besq0_transition(v0, t, n * sigma, &mut r).unwrap())
                .collect();
            let ks = stats::ks_two_sample(sims, &exact).unwrap();
            details.push(format!("NQF vs BESQ0 at t={t}: KS p = {:.3}", ks.p_value));
            ok &= ks.p_value > 0.01;
        }
    }

    // LQF ensemble vs exact CIR.
    {
        let q_ref = -0.5;
        let geom = t2(8, 2, q_ref);
        let f = PrescribingFunction::constant(&geom, q_ref).unwrap();
        let sigma = 0.4;
        let rho = 1.0;
        let v0 = geom.volume();
        let paths = 300usize;
        let t_end = 1.0;
        let mut sims = Vec::with_capacity(paths);
        for p in 0..paths {
            let mut flow =
                StochasticFlow::new(&geom, Flow::Lqf, &f, rho, sigma, SdeScheme::new(1e-3))
                    .unwrap();
            let mut r = rng::stream(seed, "c6-lqf", p as u64);
            let run = flow
                .run(MeasureState::uniform(&geom, v0), t_end, 1000, &[], &mut r)
                .unwrap();
            if run.cemetery_time.is_none() {
                sims.push(*run.volumes.last().unwrap());
            }
        }
        let spec = volume::CirSpec::from_flow(2, q_ref, geom.volume(), rho, sigma).unwrap();
        let mut r = rng::stream(seed, "c6-cir", 0);
        let exact: Vec<f64> = (0..3000)
            .map(|_| volume::cir_transition(&spec, v0, t_end, &mut r).unwrap())
            .collect();
        let ks = stats::ks_two_sample(&sims, &exact).unwrap();
        details.push(format!("LQF vs CIR at t={t_end}: KS p = {:.3}", ks.p_value));
        ok &= ks.p_value > 0.01;
    }

    // CIR positivity in the Feller regime (σ² <= -2 Q_ref(1)).
    {
        let geom = t2(16, 3, -1.0);
        let sigma = 1.0;
        assert!(sigma * sigma <= -2.0 * geom.q_ref_total());
        let spec = volume::CirSpec::from_flow(2, -1.0, geom.volume(), 1.0, sigma).unwrap();
        let mut r = rng::stream(seed, "c6-feller", 0);
        let mut min_seen = f64::MAX;
        for _ in 0..10_000 {
            let mut v = spec.theta();
            for _ in 0..50 {
                v = volume::cir_transition(&spec, v, 0.02, &mut r).unwrap();
                min_seen = min_seen.min(v);
            }
        }
        details.push(format!(
            "CIR Feller (stated flag {}, boundary dim {:.1}): min over 1e4 paths = {min_seen:.3e}",
            spec.feller_stated,
            spec.boundary_dimension()
        ));
        ok &= min_seen > 0.0 && spec.feller_stated;
    }

    result(
        "C6",
        "volume laws: NQF = BESQ0, LQF = CIR, Feller positivity",
        ok,
        false,
        details.join("; "),
    )
}

/// Criterion 7: projected weak-solution residuals are standard normal for
/// five test functions including h = 1, both flavours.
pub fn criterion_projected_residuals(seed: u64) -> CriterionResult {
    let mut details = Vec::new();
    let mut ok = true;
    for (flavor, q_ref, f_const, label) in [
        (Flow::Nqf, 0.3, 1.0, "c7-nqf"),
        (Flow::Lqf, -0.4, -0.4, "c7-lqf"),
    ] {
        let geom = t2(16, 3, q_ref);
        let f = PrescribingFunction::constant(&geom, f_const).unwrap();
        let sigma = 0.3;
        let dt = 5e-4;
        let n = geom.dim() as f64;
        let hs: Vec<(String, FieldCoeffs)> = vec![
            ("1".into(), FieldCoeffs::constant(&geom, 1.0)),
            (
                "cos-x1".into(),
                FieldCoeffs::cosine_wave(&geom, &[1, 0]).unwrap(),
            ),
            (
                "sin-x2".into(),
                FieldCoeffs::single_mode(&geom, &[0, -1], 1.0).unwrap(),
            ),
            (
                "cos-diag".into(),
                FieldCoeffs::cosine_wave(&geom, &[1, 1]).unwrap(),
            ),
            ("mixed".into(), {
                let a = FieldCoeffs::cosine_wave(&geom, &[2, 0]).unwrap();
                let b = FieldCoeffs::constant(&geom, 0.5);
                a.add_scaled(&geom, &b, 1.0)
            }),
        ];
        let mut flow =
            StochasticFlow::new(&geom, flavor, &f, 1.0, sigma, SdeScheme::new(dt)).unwrap();
        let mut state = MeasureState::uniform(&geom, geom.volume());
        let mut r = rng::stream(seed, label, 0);
        let h_grids: Vec<Vec<f64>> = hs.iter().map(|(_, h)| geom.coeffs_to_grid(h)).collect();
        let mut residuals: Vec<Vec<f64>> = vec![Vec::with_capacity(10_000); hs.len()];
        for _ in 0..10_000 {
            let before: Vec<f64> = h_grids.iter().map(|g| state.masses.pair(g)).collect();
            let drifts: Vec<f64> = hs
                .iter()
                .map(|(_, h)| flow.projected_drift(&state, h).unwrap())
                .collect();
            let norms: Vec<f64> = h_grids
                .iter()
                .map(|g| {
                    state
                        .masses
                        .masses()
                        .iter()
                        .zip(g)
                        .map(|(m, h)| m * h * h)
                        .sum::<f64>()
                        .sqrt()
                })
                .collect();
            flow.step(&mut state, &mut r).unwrap();
            if !state.alive {
                break;
            }
            for (j, g) in h_grids.iter().enumerate() {
                let after = state.masses.pair(g);
                residuals[j].push(
                    (after - before[j] - drifts[j] * dt) / (n * sigma * norms[j] * dt.sqrt()),
                );
            }
        }
        for (j, (name, _)) in hs.iter().enumerate() {
            let ks = stats::ks_one_sample(&residuals[j], stats::normal_cdf).unwrap();
            details.push(format!("{label} h={name}: p = {:.3}", ks.p_value));
            ok &= ks.p_value > 0.01;
        }
    }
    result(
        "C7",
        "projected SDE residuals standard normal (KS, 5 test functions, both flavours)",
        ok,
        false,
        details.join("; "),
    )
}

/// Criterion 8: GMC moments — exact mean, second-moment oracle, blow-up
/// diagnostic above the threshold.
pub fn criterion_gmc_moments(seed: u64) -> CriterionResult {
    let mut details = Vec::new();
    let mut ok = true;
    let gamma = 0.5 * chaos::gamma_limit(2);

    {
        let geom = t2(32, 6, 0.0);
        let mut r = rng::stream(seed, "c8-mean", 0);
        let reps = 10_000usize;
        let mut totals = Vec::with_capacity(reps);
        let mut sq = Vec::with_capacity(reps);
        for _ in 0..reps {
            let psi = fields::sample_cgf(&geom, &mut r);
            let t = chaos::build_gmc(&geom, &psi, gamma, 0.0)
                .unwrap()
                .cells
                .total();
            totals.push(t);
            sq.push(t * t);
        }
        let (mean, se) = stats::mean_se(&totals);
        let z = (mean - geom.volume()) / se;
        details.push(format!("E[M(1)]: z = {z:.2}"));
        ok &= z.abs() < 3.0;

        let oracle = chaos::second_moment_oracle(&geom, gamma).unwrap();
        let (m2, se2) = stats::mean_se(&sq);
        let z2 = (m2 - oracle) / se2;
        details.push(format!("E[M(1)²] vs ∬e^{{γ²k_N}}: z = {z2:.2}"));
        ok &= z2.abs() < 3.0;
    }

    {
        // Exact-moment blow-up diagnostic at threshold p_c = 2.5: p = 2
        // stabilises across truncations, p = 3 > p_c grows without bound.
        let gamma_b = (2.0 * 2.0f64 / 2.5).sqrt();
        let mut m2 = Vec::new();
        let mut m3 = Vec::new();
        for trunc in [2u32, 6, 12] {
            let geom = t2(32, trunc, 0.0);
            m2.push(chaos::second_moment_oracle(&geom, gamma_b).unwrap());
            m3.push(chaos::third_moment_oracle(&geom, gamma_b).unwrap());
        }
        let stable = m2[2] / m2[0];
        let blow = m3[2] / m3[0];
        details.push(format!(
            "exact p=2 ratio {stable:.2}, exact p=3 ratio {blow:.1} (threshold p_c = 2.5)"
        ));
        ok &= stable < 1.5 && blow > 3.0;
    }

    result(
        "C8",
        "GMC moments: exact mean, second-moment oracle, supercritical blow-up",
        ok,
        false,
        details.join("; "),
    )
}

/// Criterion 9: GMC inversion — exact shift equivariance, small-γ recovery,
/// recovery correlation at γ = 0.3 √(2n).
pub fn criterion_gmc_inversion(seed: u64) -> CriterionResult {
    let mut details = Vec::new();
    let mut ok = true;

    // Shift equivariance (exact).
    {
        let geom = t2(32, 6, 0.0);
        let gamma = 0.3 * chaos::gamma_limit(2);
        let mut r = rng::stream(seed, "c9-shift", 0);
        let psi = fields::sample_cgf(&geom, &mut r);
        let m = chaos::build_gmc(&geom, &psi, gamma, 0.0).unwrap();
        let mut plan =
            InversionPlan::new(&geom, MollifierProfile::Triangular, vec![1.0, 0.7], 64).unwrap();
        let mut rc = rng::stream(seed, "c9-shift-ct", 0);
        chaos::estimate_counterterm(&geom, gamma, &mut plan, &mut rc).unwrap();
        let c = 0.53;
        let shifted = chaos::gmc_shift(&geom, &m, &FieldCoeffs::constant(&geom, c));
        let a = chaos::invert_gmc(&geom, &m, &plan).unwrap();
        let b = chaos::invert_gmc(&geom, &shifted, &plan).unwrap();
        let zero_err = (b.field.mean(&geom) - a.field.mean(&geom) - c).abs();
        let mode_err = (0..geom.num_modes())
            .filter(|&i| i != geom.zero_mode_index())
            .map(|i| (b.field.coeff(i) - a.field.coeff(i)).abs())
            .fold(0.0, f64::max);
        details.push(format!(
            "shift equivariance: zero-mode err {zero_err:.2e}, other modes {mode_err:.2e}"
        ));
        ok &= zero_err < 1e-10 && mode_err < 1e-10;
    }

    // Small-γ recovery.
    {
        let geom = t2(64, 8, 0.0);
        let gamma = 0.05 * chaos::gamma_limit(2);
        let mut r = rng::stream(seed, "c9-small", 0);
        let psi = fields::sample_cgf(&geom, &mut r);
        let m = chaos::build_gmc(&geom, &psi, gamma, 0.0).unwrap();
        let mut plan =
            InversionPlan::new(&geom, MollifierProfile::Triangular, vec![0.8, 0.5], 64).unwrap();
        let mut rc = rng::stream(seed, "c9-small-ct", 0);
        chaos::estimate_counterterm(&geom, gamma, &mut plan, &mut rc).unwrap();
        let rec = chaos::invert_gmc(&geom, &m, &plan).unwrap();
        let mut num = 0.0;
        let mut den = 0.0;
        for idx in 0..geom.num_modes() {
            if geom.frequency(idx).iter().any(|k| k.abs() > 2) || idx == geom.zero_mode_index() {
                continue;
            }
            let d = rec.field.coeff(idx) - psi.field.coeff(idx);
            num += d * d;
            den += psi.field.coeff(idx) * psi.field.coeff(idx);
        }
        let rel = (num / den).sqrt();
        details.push(format!("small-γ recovery rel L2 error {rel:.3}"));
        ok &= rel < 0.05;
    }

    // Recovery correlation across replicas.
    {
        let geom = t2(32, 6, 0.0);
        let gamma = 0.3 * chaos::gamma_limit(2);
        let mut plan =
            InversionPlan::new(&geom, MollifierProfile::Triangular, vec![1.0, 0.7], 128).unwrap();
        let mut rc = rng::stream(seed, "c9-corr-ct", 0);
        chaos::estimate_counterterm(&geom, gamma, &mut plan, &mut rc).unwrap();
        let idx = geom.mode_index(&[1, 0]).unwrap();
        let mut truth = Vec::new();
        let mut rec = Vec::new();
        let mut r = rng::stream(seed, "c9-corr", 0);
        for _ in 0..100 {
            let psi = fields::sample_cgf(&geom, &mut r);
            let m = chaos::build_gmc(&geom, &psi, gamma, 0.0).unwrap();
            let inv = chaos::invert_gmc(&geom, &m, &plan).unwrap();
            truth.push(psi.field.coeff(idx));
            rec.push(inv.field.coeff(idx));
        }
        let corr = stats::correlation(&truth, &rec);
        details.push(format!("recovery correlation {corr:.3} over 100 replicas"));
        ok &= corr > 0.9;
    }

    result(
        "C9",
        "GMC inversion: shift equivariance, small-γ recovery, correlation",
        ok,
        false,
        details.join("; "),
    )
}

/// Criterion 10 (soft): LQF stationarity in the invariant-measure regime.
pub fn criterion_lqf_stationarity(seed: u64) -> CriterionResult {
    let q_ref = -1.0;
    let geom = t2(8, 2, q_ref);
    let sigma = 0.4;
    let rho = 1.0 + geom.a_n() * geom.dim() as f64 * sigma * sigma / 4.0;
    let f = PrescribingFunction::constant(&geom, q_ref).unwrap();
    let fm = match FlowMeasure::new(&geom, Flow::Lqf, &f, sigma, rho) {
        Ok(fm) => fm,
        Err(e) => {
            return result("C10", "LQF stationarity", false, true, e.to_string());
        }
    };
    assert!(sigma * sigma <= -2.0 * geom.q_ref_total());

    // Two independent ensembles from ν_LQF (unwindowed: the measure is
    // finite in this regime).
    let ensemble = |label: &str, seed: u64| -> Vec<MeasureState> {
        let mut states = Vec::new();
        forms::sample_symmetrizing(
            &fm,
            None,
            200,
            &SamplerConfig {
                thin: 8,
                ..SamplerConfig::default()
            },
            seed,
            label,
            |state, _| {
                states.push(MeasureState::new(state.omega.cells.clone()));
            },
        )
        .unwrap();
        states
    };
    let init_a = ensemble("c10-a", seed);
    let init_b = ensemble("c10-b", seed ^ 0x5a5a);

    // Observables: V, ω(cos x1), and two windowed cylinder functionals.
    let h = FieldCoeffs::cosine_wave(&geom, &[1, 0]).unwrap();
    let h_grid = geom.coeffs_to_grid(&h);
    let mut rq = rng::stream(seed, "c10-q", 0);
    let g1 = random_windowed_functional(&geom, &mut rq, 0.005);
    let g2 = random_windowed_functional(&geom, &mut rq, 0.005);
    let observe = |st: &MeasureState| -> [f64; 4] {
        [
            st.volume(),
            st.masses.pair(&h_grid),
            g1.value(&st.masses),
            g2.value(&st.masses),
        ]
    };

    let obs_a: Vec<[f64; 4]> = init_a.iter().map(&observe).collect();

    // Evolve ensemble B to T.
    let dt = 5e-4;
    let t_end = 0.4;
    let mut obs_b = Vec::with_capacity(init_b.len());
    for (p, st) in init_b.into_iter().enumerate() {
        let mut flow =
            StochasticFlow::new(&geom, Flow::Lqf, &f, rho, sigma, SdeScheme::new(dt)).unwrap();
        let mut r = rng::stream(seed, "c10-flow", p as u64);
        let run = flow.run(st, t_end, 10_000, &[], &mut r).unwrap();
        if let Some(fin) = run.final_state {
            if fin.alive {
                obs_b.push(observe(&fin));
            }
        }
    }

    let names = ["V", "omega(cos x1)", "G1", "G2"];
    let mut details = vec![format!(
        "Polyakov-Liouville rho = {rho:.6} (flag recorded); sigma^2 = {} <= -2Q_ref(1) = {}",
        sigma * sigma,
        -2.0 * geom.q_ref_total()
    )];
    let mut ok = true;
    for (j, name) in names.iter().enumerate() {
        let a: Vec<f64> = obs_a.iter().map(|o| o[j]).collect();
        let b: Vec<f64> = obs_b.iter().map(|o| o[j]).collect();
        let ks = stats::ks_two_sample(&a, &b).unwrap();
        details.push(format!("{name}: KS p = {:.3}", ks.p_value));
        ok &= ks.p_value > 0.01;
    }
    result(
        "C10",
        "LQF stationarity in the invariant regime (soft)",
        ok,
        true,
        details.join("; "),
    )
}

/// Run the full acceptance suite with a base seed.
pub fn run_all(seed: u64) -> Vec<CriterionResult> {
    vec![
        criterion_exact_identities(seed),
        criterion_gradient_consistency(seed),
        criterion_volume_conservation(seed),
        criterion_ibp_battery(seed),
        criterion_generator_form(seed),
        criterion_volume_laws(seed),
        criterion_projected_residuals(seed),
        criterion_gmc_moments(seed),
        criterion_gmc_inversion(seed),
        criterion_lqf_stationarity(seed),
    ]
}

/// Reference seed used by the test suite and `suite run` default.
pub const REFERENCE_SEED: u64 = 20_260_613;
