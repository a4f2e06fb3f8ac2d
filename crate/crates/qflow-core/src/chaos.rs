//! Gaussian multiplicative chaos at fixed spectral truncation, and the
//! inversion map recovering the field from the measure.
//!
//! At truncation `N` the chaos measure is the exact exponential martingale
//!
//! ```text
//! M^γ(ψ)(dx) = exp(γ ψ_N(x) - (γ²/2) Var ψ_N(x)) ω_ref(dx),
//! ```
//!
//! so `E[M^γ(ψ)(h)] = ω_ref(h)` holds exactly, the shift law
//! `M^γ(ψ + h) = e^{γh} M^γ(ψ)` is an algebraic identity, and moments below
//! the `2n/γ²` threshold stabilise as `N` grows while those above blow up.
//!
//! Inversion follows the mollified-logarithm construction: for a window
//! `η_ε` the field `(1/γ) log(η_ε * m) - F(ε)` recovers `ψ` up to a
//! deterministic counter-term `F(ε)`, which on the torus is a single scalar
//! per `ε` estimated by Monte Carlo over fresh chaos samples.

use crate::error::{QflowError, Result};
use crate::fields::{self, CgfSample, MollifierFamily, MollifierProfile};
use crate::geometry::{FieldCoeffs, ModeKind, TorusGeometry};
use rand::Rng;

/// A positive measure as cell masses on the quadrature grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMeasure {
    masses: Vec<f64>,
}

impl GridMeasure {
    pub fn new(geom: &TorusGeometry, masses: Vec<f64>) -> Result<Self> {
        if masses.len() != geom.num_cells() {
            return Err(QflowError::SizeMismatch(format!(
                "measure expects {} cells, got {}",
                geom.num_cells(),
                masses.len()
            )));
        }
        Ok(GridMeasure { masses })
    }

    /// Uniform reference measure `ω_ref` itself.
    pub fn reference(geom: &TorusGeometry) -> Self {
        GridMeasure {
            masses: vec![geom.cell_volume(); geom.num_cells()],
        }
    }

    pub(crate) fn from_raw(masses: Vec<f64>) -> Self {
        GridMeasure { masses }
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn masses_mut(&mut self) -> &mut [f64] {
        &mut self.masses
    }

    /// Total mass `ω(1)`.
    pub fn total(&self) -> f64 {
        self.masses.iter().sum()
    }

    /// Pairing `ω(h) = Σ_i h(x_i) m_i` against grid values of `h`.
    pub fn pair(&self, h_grid: &[f64]) -> f64 {
        debug_assert_eq!(h_grid.len(), self.masses.len());
        self.masses.iter().zip(h_grid).map(|(m, h)| m * h).sum()
    }
}

/// A chaos measure together with the parameters that produced it.
#[derive(Debug, Clone)]
pub struct GmcMeasure {
    pub cells: GridMeasure,
    pub gamma: f64,
    pub trunc: i32,
    /// `(γ²/2) Var ψ_N(x)`, constant in `x`.
    pub counterterm: f64,
}

/// Subcritical range limit `sqrt(2n)`.
pub fn gamma_limit(dim: usize) -> f64 {
    (2.0 * dim as f64).sqrt()
}

/// The renormalisation constant `(γ²/2) Σ_{0<|k|∞<=N} L^{-n}/(a_n Λ_k)`.
pub fn counterterm(geom: &TorusGeometry, gamma: f64) -> f64 {
    0.5 * gamma * gamma * geom.truncated_field_variance()
}

fn check_gamma(geom: &TorusGeometry, gamma: f64) -> Result<()> {
    let limit = gamma_limit(geom.dim());
    if !(0.0..limit).contains(&gamma) {
        return Err(QflowError::SupercriticalGamma { gamma, limit });
    }
    Ok(())
}

/// Build `M^γ(ψ + shift_c)` as cell masses.
pub fn build_gmc(
    geom: &TorusGeometry,
    psi: &CgfSample,
    gamma: f64,
    shift_c: f64,
) -> Result<GmcMeasure> {
    check_gamma(geom, gamma)?;
    let grid = geom.coeffs_to_grid(&psi.field);
    Ok(build_gmc_from_grid(geom, &grid, gamma, shift_c))
}

/// Same as [`build_gmc`] but from precomputed grid values of the field
/// (gamma must already be validated by the caller).
pub fn build_gmc_from_grid(
    geom: &TorusGeometry,
    psi_grid: &[f64],
    gamma: f64,
    shift_c: f64,
) -> GmcMeasure {
    let ct = counterterm(geom, gamma);
    let cv = geom.cell_volume();
    let masses: Vec<f64> = psi_grid
        .iter()
        .map(|&v| cv * (gamma * (v + shift_c) - ct).exp())
        .collect();
    GmcMeasure {
        cells: GridMeasure { masses },
        gamma,
        trunc: geom.trunc(),
        counterterm: ct,
    }
}

/// Admissible deviation bound for a non-Lebesgue ground density:
/// `|λ - 1| < min(1, √(2n)/γ - 1)`.
pub fn ground_density_bound(geom: &TorusGeometry, gamma: f64) -> f64 {
    if gamma <= 0.0 {
        1.0
    } else {
        (gamma_limit(geom.dim()) / gamma - 1.0).min(1.0)
    }
}

/// Chaos measure over the weighted ground measure `λ ω_ref`: the field is
/// modulated to `λ(x) ψ(x)` (covariance multiplied by `λ(x)λ(y)`), the
/// counter-term becomes the pointwise `(γ²/2) λ(x)² Var ψ_N`, and the cell
/// mass carries the density factor:
///
/// ```text
/// m_i = cell_vol · λ_i · exp(γ (λ_i ψ_i + c) - (γ²/2) λ_i² Var ψ_N).
/// ```
///
/// `λ` must stay within the admissible band `[1-ρ, 1+ρ]` of the inversion
/// construction, `ρ < min(1, √(2n)/γ - 1)`.
pub fn build_gmc_with_density(
    geom: &TorusGeometry,
    psi_grid: &[f64],
    gamma: f64,
    shift_c: f64,
    lambda: &[f64],
) -> Result<GmcMeasure> {
    check_gamma(geom, gamma)?;
    if lambda.len() != geom.num_cells() {
        return Err(QflowError::SizeMismatch(format!(
            "density expects {} cells, got {}",
            geom.num_cells(),
            lambda.len()
        )));
    }
    let bound = ground_density_bound(geom, gamma);
    let dev = lambda.iter().map(|&l| (l - 1.0).abs()).fold(0.0, f64::max);
    if dev >= bound {
        return Err(QflowError::Config(format!(
            "ground density deviation {dev} outside the admissible band {bound}"
        )));
    }
    let var = geom.truncated_field_variance();
    let cv = geom.cell_volume();
    let masses: Vec<f64> = psi_grid
        .iter()
        .zip(lambda)
        .map(|(&v, &l)| {
            cv * l * (gamma * (l * v + shift_c) - 0.5 * gamma * gamma * l * l * var).exp()
        })
        .collect();
    Ok(GmcMeasure {
        cells: GridMeasure { masses },
        gamma,
        trunc: geom.trunc(),
        counterterm: 0.5 * gamma * gamma * var,
    })
}

/// Per-point counter-term grids `F_ε(x) = E[(1/γ) log (η_ε * M_λ(ψ'))(x)]`
/// for the weighted inversion (the density breaks translation invariance, so
/// `F` is a grid rather than a scalar).
pub fn estimate_counterterm_grid<R: Rng + ?Sized>(
    geom: &TorusGeometry,
    gamma: f64,
    plan: &InversionPlan,
    lambda: &[f64],
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    check_gamma(geom, gamma)?;
    let fams: Vec<MollifierFamily> = plan
        .eps_list
        .iter()
        .map(|&e| plan.family(geom, e))
        .collect::<Result<_>>()?;
    let mut acc: Vec<Vec<f64>> = vec![vec![0.0; geom.num_cells()]; fams.len()];
    let mut psi = FieldCoeffs::zeros(geom);
    for _ in 0..plan.mc_reps {
        fields::sample_cgf_into(geom, rng, &mut psi);
        let g = geom.coeffs_to_grid(&psi);
        let m = build_gmc_with_density(geom, &g, gamma, 0.0, lambda)?;
        for (fam, grid_acc) in fams.iter().zip(acc.iter_mut()) {
            let conv = window_average(geom, fam, &m.cells)?;
            for (a, &v) in grid_acc.iter_mut().zip(&conv) {
                *a += v.max(MASS_FLOOR).ln() / gamma;
            }
        }
    }
    for grid_acc in &mut acc {
        for a in grid_acc.iter_mut() {
            *a /= plan.mc_reps as f64;
        }
    }
    Ok(acc)
}

/// Weighted-ground inversion field `r(x) = (1/γ) log (η_ε * m)(x) - F_ε(x)`
/// on the grid (the recovered object approximates the modulated field
/// `λ ψ`).
pub fn invert_gmc_with_density(
    geom: &TorusGeometry,
    m: &GmcMeasure,
    plan: &InversionPlan,
    f_grid: &[f64],
    eps_index: usize,
) -> Result<Vec<f64>> {
    let gamma = m.gamma;
    check_gamma(geom, gamma)?;
    if gamma == 0.0 {
        return Err(QflowError::DegenerateInversion);
    }
    let fam = plan.family(geom, plan.eps_list[eps_index])?;
    let conv = window_average(geom, &fam, &m.cells)?;
    if conv.iter().any(|&v| v <= 0.0) {
        return Err(QflowError::DegenerateInversion);
    }
    Ok(conv
        .iter()
        .zip(f_grid)
        .map(|(&v, &f)| v.max(MASS_FLOOR).ln() / gamma - f)
        .collect())
}

/// Shift law: multiply cells by `e^{γ h(x)}`.
pub fn gmc_shift(geom: &TorusGeometry, m: &GmcMeasure, h: &FieldCoeffs) -> GmcMeasure {
    let h_grid = geom.coeffs_to_grid(h);
    let masses: Vec<f64> = m
        .cells
        .masses
        .iter()
        .zip(&h_grid)
        .map(|(mass, hv)| mass * (m.gamma * hv).exp())
        .collect();
    GmcMeasure {
        cells: GridMeasure { masses },
        gamma: m.gamma,
        trunc: m.trunc,
        counterterm: m.counterterm,
    }
}

/// Exact second moment of the total mass at truncation:
/// `E[(M^γ(ψ)(1))²] = L^n ∫ exp(γ² k_N(z)) dz` by grid quadrature of the
/// translation-invariant kernel profile.
pub fn second_moment_oracle(geom: &TorusGeometry, gamma: f64) -> Result<f64> {
    check_gamma(geom, gamma)?;
    let mut z = vec![0.0; geom.dim()];
    let mut vals = vec![0.0; geom.num_cells()];
    for (cell, v) in vals.iter_mut().enumerate() {
        geom.grid_point(cell, &mut z);
        *v = (gamma * gamma * geom.green_kernel_profile(&z)).exp();
    }
    Ok(geom.volume() * geom.quadrature(&vals)?)
}

/// Exact third moment of the total mass at truncation:
/// `E[(M^γ(ψ)(1))³] = L^n ∬ exp(γ² (k_N(u) + k_N(v) + k_N(u - v))) du dv`
/// by grid quadrature (translation invariance removes one integral).
pub fn third_moment_oracle(geom: &TorusGeometry, gamma: f64) -> Result<f64> {
    check_gamma(geom, gamma)?;
    let nc = geom.num_cells();
    let g2 = gamma * gamma;
    let mut z = vec![0.0; geom.dim()];
    let mut profile = vec![0.0; nc];
    for (cell, v) in profile.iter_mut().enumerate() {
        geom.grid_point(cell, &mut z);
        *v = geom.green_kernel_profile(&z);
    }
    // Wrapped difference of flat indices (row-major, per-axis mod G).
    let g = geom.grid();
    let dim = geom.dim();
    let diff_index = |a: usize, b: usize| -> usize {
        let mut ra = a;
        let mut rb = b;
        let mut digits = vec![0usize; dim];
        for ax in (0..dim).rev() {
            digits[ax] = (ra % g + g - rb % g) % g;
            ra /= g;
            rb /= g;
        }
        digits.iter().fold(0usize, |acc, &d| acc * g + d)
    };
    let mut acc = 0.0f64;
    for u in 0..nc {
        let ku = profile[u];
        for v in 0..nc {
            acc += (g2 * (ku + profile[v] + profile[diff_index(u, v)])).exp();
        }
    }
    let cv = geom.cell_volume();
    Ok(geom.volume() * acc * cv * cv)
}

/// One row of a moment scan.
#[derive(Debug, Clone, serde::Serialize)]
pub struct MomentEntry {
    pub p: f64,
    pub trunc: u32,
    pub mean: f64,
    pub se: f64,
}

/// Empirical moments `E[(M(1))^p]` across truncations, with standard errors.
/// Estimates for `p` well below `2n/γ²` stabilise in `N`; above they grow.
pub fn gmc_moment_scan(
    dim: usize,
    period: f64,
    grid: usize,
    gamma: f64,
    p_list: &[f64],
    trunc_list: &[u32],
    reps: usize,
    seed: u64,
) -> Result<Vec<MomentEntry>> {
    if reps < 1000 {
        return Err(QflowError::InsufficientSamples(format!(
            "moment scan needs >= 1000 reps, got {reps}"
        )));
    }
    let mut out = Vec::new();
    for (gi, &trunc) in trunc_list.iter().enumerate() {
        let geom = TorusGeometry::new(dim, period, grid, trunc, 0.0)?;
        check_gamma(&geom, gamma)?;
        let mut rng = crate::rng::stream(seed, "gmc-moments", gi as u64);
        let mut totals = Vec::with_capacity(reps);
        let mut psi = FieldCoeffs::zeros(&geom);
        for _ in 0..reps {
            fields::sample_cgf_into(&geom, &mut rng, &mut psi);
            let g = geom.coeffs_to_grid(&psi);
            let m = build_gmc_from_grid(&geom, &g, gamma, 0.0);
            totals.push(m.cells.total());
        }
        for &p in p_list {
            let xs: Vec<f64> = totals.iter().map(|&t| t.powf(p)).collect();
            let (mean, se) = crate::stats::mean_se(&xs);
            out.push(MomentEntry { p, trunc, mean, se });
        }
    }
    Ok(out)
}

/// Plan for the inversion map: window profile, mollification radii, and the
/// Monte Carlo counter-terms `F(ε)`.
#[derive(Debug, Clone)]
pub struct InversionPlan {
    pub profile: MollifierProfile,
    /// Decreasing mollification radii; each must exceed two grid cells.
    pub eps_list: Vec<f64>,
    /// Monte Carlo replicas for the counter-term estimate.
    pub mc_reps: usize,
    /// Estimated counter-term per `ε` (filled by [`estimate_counterterm`]).
    pub f_const: Option<Vec<f64>>,
}

impl InversionPlan {
    pub fn new(
        geom: &TorusGeometry,
        profile: MollifierProfile,
        eps_list: Vec<f64>,
        mc_reps: usize,
    ) -> Result<Self> {
        let h = geom.period() / geom.grid() as f64;
        if eps_list.is_empty() {
            return Err(QflowError::Config("empty eps list".into()));
        }
        for w in eps_list.windows(2) {
            if w[1] >= w[0] {
                return Err(QflowError::Config("eps list must decrease".into()));
            }
        }
        for &eps in &eps_list {
            if eps <= 2.0 * h {
                return Err(QflowError::Config(format!(
                    "eps {eps} does not exceed two grid cells ({})",
                    2.0 * h
                )));
            }
        }
        Ok(InversionPlan {
            profile,
            eps_list,
            mc_reps,
            f_const: None,
        })
    }

    fn family(&self, geom: &TorusGeometry, eps: f64) -> Result<MollifierFamily> {
        MollifierFamily::new(geom, self.profile, 1.0 / eps)
    }
}

/// `(η_ε * m)(x)` on the grid: circular convolution of the window density
/// with the cell masses.
fn window_average(
    geom: &TorusGeometry,
    fam: &MollifierFamily,
    m: &GridMeasure,
) -> Result<Vec<f64>> {
    let cv = geom.cell_volume();
    let density: Vec<f64> = m.masses.iter().map(|&v| v / cv).collect();
    fields::convolve(geom, fam, &density)
}

/// Result of one inversion: the recovered field (zero mode carries the
/// recovered constant) and degeneracy diagnostics.
#[derive(Debug, Clone)]
pub struct InversionResult {
    pub field: FieldCoeffs,
    /// Cells whose window average hit the positivity floor.
    pub floored_cells: usize,
    /// Radius actually used.
    pub eps: f64,
}

const MASS_FLOOR: f64 = 1e-300;

/// Estimate the counter-terms `F(ε) = E[(1/γ) log (η_ε * M^γ(ψ'))(x₀)]`
/// over fresh chaos samples, one scalar per `ε` (translation invariance).
/// Returns `(estimates, standard errors)` and stores the estimates in the
/// plan.
pub fn estimate_counterterm<R: Rng + ?Sized>(
    geom: &TorusGeometry,
    gamma: f64,
    plan: &mut InversionPlan,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_gamma(geom, gamma)?;
    let mut estimates = Vec::with_capacity(plan.eps_list.len());
    let mut ses = Vec::with_capacity(plan.eps_list.len());
    let fams: Vec<MollifierFamily> = plan
        .eps_list
        .iter()
        .map(|&e| plan.family(geom, e))
        .collect::<Result<_>>()?;
    let mut per_eps: Vec<Vec<f64>> = vec![Vec::with_capacity(plan.mc_reps); fams.len()];
    let mut psi = FieldCoeffs::zeros(geom);
    for _ in 0..plan.mc_reps {
        fields::sample_cgf_into(geom, rng, &mut psi);
        let g = geom.coeffs_to_grid(&psi);
        let m = build_gmc_from_grid(geom, &g, gamma, 0.0);
        for (fam, acc) in fams.iter().zip(per_eps.iter_mut()) {
            let conv = window_average(geom, fam, &m.cells)?;
            acc.push(conv[0].max(MASS_FLOOR).ln() / gamma);
        }
    }
    for acc in &per_eps {
        let (mean, se) = crate::stats::mean_se(acc);
        estimates.push(mean);
        ses.push(se);
    }
    plan.f_const = Some(estimates.clone());
    Ok((estimates, ses))
}

/// Recover the field from a chaos measure at the given `ε` index:
/// `r(x) = (1/γ) log (η_ε * m)(x) - F(ε)`, projected to truncated
/// coefficients with the window transfer divided out of the nonzero modes.
/// The zero mode of the result carries the recovered constant.
pub fn invert_gmc_at(
    geom: &TorusGeometry,
    m: &GmcMeasure,
    plan: &InversionPlan,
    eps_index: usize,
) -> Result<InversionResult> {
    let gamma = m.gamma;
    check_gamma(geom, gamma)?;
    if gamma == 0.0 {
        return Err(QflowError::SupercriticalGamma {
            gamma,
            limit: gamma_limit(geom.dim()),
        });
    }
    let f_const = plan
        .f_const
        .as_ref()
        .ok_or_else(|| QflowError::Config("counter-term not estimated".into()))?;
    let eps = plan.eps_list[eps_index];
    let fam = plan.family(geom, eps)?;
    let conv = window_average(geom, &fam, &m.cells)?;
    if conv.iter().any(|&v| v <= 0.0) {
        return Err(QflowError::DegenerateInversion);
    }
    let mut floored = 0usize;
    let r: Vec<f64> = conv
        .iter()
        .map(|&v| {
            let v = if v < MASS_FLOOR {
                floored += 1;
                MASS_FLOOR
            } else {
                v
            };
            v.ln() / gamma - f_const[eps_index]
        })
        .collect();
    let mut coeffs = geom.grid_to_coeffs(&r)?;
    for idx in 0..geom.num_modes() {
        if geom.mode_kind(idx) == ModeKind::Zero {
            continue;
        }
        let t = fam.transfer_at_mode(geom, idx);
        if t.abs() > 1e-8 {
            let v = coeffs.coeff(idx) / t;
            coeffs.set_coeff(geom, idx, v);
        }
    }
    Ok(InversionResult {
        field: coeffs,
        floored_cells: floored,
        eps,
    })
}

/// Inversion at the smallest admissible radius.
pub fn invert_gmc(
    geom: &TorusGeometry,
    m: &GmcMeasure,
    plan: &InversionPlan,
) -> Result<InversionResult> {
    invert_gmc_at(geom, m, plan, plan.eps_list.len() - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::sample_cgf;
    use crate::rng;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    fn t2(grid: usize, trunc: u32) -> TorusGeometry {
        TorusGeometry::new(2, 2.0 * PI, grid, trunc, 0.0).unwrap()
    }

    #[test]
    fn zero_gamma_gives_reference_measure() {
        let geom = t2(16, 4);
        let mut r = rng::stream(20, "gmc", 0);
        let psi = sample_cgf(&geom, &mut r);
        let m = build_gmc(&geom, &psi, 0.0, 0.0).unwrap();
        assert_abs_diff_eq!(m.cells.total(), geom.volume(), epsilon = 1e-10);
        assert_eq!(m.counterterm, 0.0);
    }

    #[test]
    fn supercritical_gamma_rejected() {
        let geom = t2(16, 4);
        let mut r = rng::stream(21, "gmc", 0);
        let psi = sample_cgf(&geom, &mut r);
        let lim = gamma_limit(2);
        assert!(matches!(
            build_gmc(&geom, &psi, lim, 0.0),
            Err(QflowError::SupercriticalGamma { .. })
        ));
        assert!(build_gmc(&geom, &psi, lim - 1e-9, 0.0).is_ok());
    }

    #[test]
    fn counterterm_small_truncation_value() {
        // n=2, L=2π, N=1: brute-force Σ e_k(x)²/(a_n Λ_k) = 3/π (eight modes:
        // four with Λ=1, four with Λ=2), so ct = (γ²/2)(3/π).
        let geom = t2(8, 1);
        let gamma = 0.7;
        assert_abs_diff_eq!(
            counterterm(&geom, gamma),
            0.5 * gamma * gamma * 3.0 / PI,
            epsilon = 1e-12
        );
    }

    #[test]
    fn mean_total_mass_is_exact_martingale() {
        // E[M(1)] = L^n e^{γ·c} within 3 SE over 10⁴ samples.
        let geom = t2(16, 4);
        let gamma = 0.8;
        let shift = 0.3;
        let mut r = rng::stream(22, "gmc-mean", 0);
        let reps = 10_000usize;
        let mut totals = Vec::with_capacity(reps);
        for _ in 0..reps {
            let psi = sample_cgf(&geom, &mut r);
            totals.push(build_gmc(&geom, &psi, gamma, shift).unwrap().cells.total());
        }
        let (mean, se) = crate::stats::mean_se(&totals);
        let want = geom.volume() * (gamma * shift).exp();
        assert!(
            (mean - want).abs() < 3.0 * se,
            "mean {mean}, want {want}, se {se}"
        );
    }

    #[test]
    fn shift_property_is_algebraic_identity() {
        let geom = t2(16, 4);
        let gamma = 0.9;
        let mut r = rng::stream(23, "gmc-shift", 0);
        let psi = sample_cgf(&geom, &mut r);
        let m = build_gmc(&geom, &psi, gamma, 0.0).unwrap();

        // h = 0 is the identity.
        let zero = FieldCoeffs::zeros(&geom);
        let same = gmc_shift(&geom, &m, &zero);
        assert_eq!(same.cells, m.cells);

        // Constant shift multiplies total mass by e^{γc} exactly.
        let c = FieldCoeffs::constant(&geom, 0.45);
        let shifted = gmc_shift(&geom, &m, &c);
        assert_abs_diff_eq!(
            shifted.cells.total(),
            m.cells.total() * (gamma * 0.45).exp(),
            epsilon = 1e-10 * m.cells.total()
        );

        // Random low-mode h: both construction orders agree cellwise.
        let h = {
            let a = FieldCoeffs::cosine_wave(&geom, &[1, 0]).unwrap();
            let b = FieldCoeffs::cosine_wave(&geom, &[2, 1]).unwrap();
            a.add_scaled(&geom, &b, -0.7)
        };
        let shifted_field = psi.field.add_scaled(&geom, &h, 1.0);
        let rebuilt = build_gmc_from_grid(&geom, &geom.coeffs_to_grid(&shifted_field), gamma, 0.0);
        let via_shift = gmc_shift(&geom, &m, &h);
        for (a, b) in rebuilt.cells.masses().iter().zip(via_shift.cells.masses()) {
            assert!(
                ((a - b) / a).abs() < 1e-12,
                "cellwise relative discrepancy {a} vs {b}"
            );
        }
    }

    #[test]
    fn trivial_moments() {
        let geom = t2(16, 4);
        let entries = gmc_moment_scan(2, 2.0 * PI, 16, 0.7, &[0.0, 1.0], &[4], 1000, 77).unwrap();
        let p0 = entries.iter().find(|e| e.p == 0.0).unwrap();
        assert_abs_diff_eq!(p0.mean, 1.0, epsilon = 1e-12);
        assert!(p0.se < 1e-12);
        let p1 = entries.iter().find(|e| e.p == 1.0).unwrap();
        assert!((p1.mean - geom.volume()).abs() < 3.0 * p1.se);
    }

    #[test]
    fn second_moment_matches_double_integral_oracle() {
        // γ = 0.5 √(2n), p = 2 < 2n/γ² = 4: MC estimate vs the exact
        // double-integral form.
        let gamma = 0.5 * gamma_limit(2);
        let geom = t2(32, 6);
        let oracle = second_moment_oracle(&geom, gamma).unwrap();
        let mut r = rng::stream(24, "gmc-m2", 0);
        let reps = 20_000usize;
        let mut sq = Vec::with_capacity(reps);
        for _ in 0..reps {
            let psi = sample_cgf(&geom, &mut r);
            let t = build_gmc(&geom, &psi, gamma, 0.0).unwrap().cells.total();
            sq.push(t * t);
        }
        let (mean, se) = crate::stats::mean_se(&sq);
        assert!(
            (mean - oracle).abs() < 3.0 * se,
            "mean {mean}, oracle {oracle}, se {se}"
        );
    }

    #[test]
    fn moment_blowup_above_threshold() {
        // Choose γ with threshold p_c = 2n/γ² = 2.5: the exact p = 2 moment
        // stabilises across truncations while the exact p = 3 moment grows
        // without bound. (Naive Monte Carlo cannot see the blow-up — the
        // supercritical moment is carried by rare diagonal clusters — so the
        // diagnostic uses the closed multi-integral forms.)
        let gamma = (2.0 * 2.0f64 / 2.5).sqrt();
        let mut m2 = Vec::new();
        let mut m3 = Vec::new();
        for trunc in [2u32, 6, 12] {
            let geom = t2(32, trunc);
            m2.push(second_moment_oracle(&geom, gamma).unwrap());
            m3.push(third_moment_oracle(&geom, gamma).unwrap());
        }
        let stable_ratio = m2[2] / m2[0];
        let blow_ratio = m3[2] / m3[0];
        assert!(stable_ratio < 1.5, "p=2 ratio {stable_ratio}");
        assert!(blow_ratio > 3.0, "p=3 ratio {blow_ratio}");
        // Monotone growth in N.
        assert!(m3[1] > m3[0] && m3[2] > m3[1]);
    }

    #[test]
    fn inversion_shift_equivariance() {
        let geom = t2(32, 6);
        let gamma = 0.3 * gamma_limit(2);
        let mut r = rng::stream(25, "inv-shift", 0);
        let psi = sample_cgf(&geom, &mut r);
        let m = build_gmc(&geom, &psi, gamma, 0.0).unwrap();
        let mut plan =
            InversionPlan::new(&geom, MollifierProfile::Triangular, vec![1.2, 0.8], 64).unwrap();
        let mut r2 = rng::stream(25, "inv-shift-ct", 0);
        estimate_counterterm(&geom, gamma, &mut plan, &mut r2).unwrap();

        let c = 0.62;
        let shifted = gmc_shift(&geom, &m, &FieldCoeffs::constant(&geom, c));
        let base = invert_gmc(&geom, &m, &plan).unwrap();
        let moved = invert_gmc(&geom, &shifted, &plan).unwrap();
        // Zero mode moves by c (in field value), all other modes unchanged.
        assert_abs_diff_eq!(
            moved.field.mean(&geom) - base.field.mean(&geom),
            c,
            epsilon = 1e-10
        );
        for idx in 0..geom.num_modes() {
            if idx == geom.zero_mode_index() {
                continue;
            }
            assert_abs_diff_eq!(
                moved.field.coeff(idx),
                base.field.coeff(idx),
                epsilon = 1e-10
            );
        }
    }

    #[test]
    fn small_gamma_recovery() {
        // γ = 0.05 √(2n): recovered low modes match ψ̂ with relative L² error
        // < 0.05 at the smallest ε. Oracle: (1/γ)log(η_ε * m) ≈ η_ε * ψ_N +
        // O(γ), and the window transfer is divided out.
        let geom = t2(64, 8);
        let gamma = 0.05 * gamma_limit(2);
        let mut r = rng::stream(26, "inv-small", 0);
        let psi = sample_cgf(&geom, &mut r);
        let m = build_gmc(&geom, &psi, gamma, 0.0).unwrap();
        let mut plan =
            InversionPlan::new(&geom, MollifierProfile::Triangular, vec![0.8, 0.5], 64).unwrap();
        let mut r2 = rng::stream(26, "inv-small-ct", 0);
        estimate_counterterm(&geom, gamma, &mut plan, &mut r2).unwrap();
        let rec = invert_gmc(&geom, &m, &plan).unwrap();
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
        assert!(rel < 0.05, "relative recovery error {rel}");
    }

    #[test]
    fn weighted_ground_inversion_small_gamma() {
        // Non-Lebesgue ground density λ = 1 + 0.1 cos(x₁): at small γ the
        // recovered field r - F matches the λ-weighted window average of the
        // modulated field, (η_ε * λ²ψ)/(η_ε * λ), to first order in γ.
        let geom = t2(32, 6);
        let gamma = 0.015 * gamma_limit(2);
        let lam_field = FieldCoeffs::cosine_wave(&geom, &[1, 0]).unwrap();
        let lambda: Vec<f64> = geom
            .coeffs_to_grid(&lam_field)
            .iter()
            .map(|v| 1.0 + 0.1 * v)
            .collect();
        let mut r = rng::stream(28, "inv-weighted", 0);
        let psi = sample_cgf(&geom, &mut r);
        let psi_grid = geom.coeffs_to_grid(&psi.field);
        let m = build_gmc_with_density(&geom, &psi_grid, gamma, 0.0, &lambda).unwrap();
        let plan =
            InversionPlan::new(&geom, MollifierProfile::Triangular, vec![0.6], 4000).unwrap();
        let mut rc = rng::stream(28, "inv-weighted-ct", 0);
        let f_grids = estimate_counterterm_grid(&geom, gamma, &plan, &lambda, &mut rc).unwrap();
        let rec = invert_gmc_with_density(&geom, &m, &plan, &f_grids[0], 0).unwrap();

        let fam =
            crate::fields::MollifierFamily::new(&geom, MollifierProfile::Triangular, 1.0 / 0.6)
                .unwrap();
        let weighted: Vec<f64> = lambda
            .iter()
            .zip(&psi_grid)
            .map(|(&l, &p)| l * l * p)
            .collect();
        let num = crate::fields::convolve(&geom, &fam, &weighted).unwrap();
        let den = crate::fields::convolve(&geom, &fam, &lambda).unwrap();
        let mut err = 0.0;
        let mut scale = 0.0;
        for i in 0..geom.num_cells() {
            let oracle = num[i] / den[i];
            err += (rec[i] - oracle) * (rec[i] - oracle);
            scale += oracle * oracle;
        }
        let rel = (err / scale).sqrt();
        assert!(rel < 0.05, "weighted recovery rel error {rel}");

        // Density outside the admissible band is rejected.
        let gamma_big = 0.9 * gamma_limit(2);
        let bad: Vec<f64> = lambda.iter().map(|&l| 1.0 + 3.0 * (l - 1.0)).collect();
        assert!(matches!(
            build_gmc_with_density(&geom, &psi_grid, gamma_big, 0.0, &bad),
            Err(QflowError::Config(_))
        ));
    }

    #[test]
    fn recovery_correlation_and_eps_consistency() {
        // γ = 0.3 √(2n): correlation across replicas between recovered and
        // true coefficients of a fixed low mode exceeds 0.9 at the smallest
        // ε, and the mean recovery error decreases along the eps list.
        let geom = t2(32, 6);
        let gamma = 0.3 * gamma_limit(2);
        let mut plan =
            InversionPlan::new(&geom, MollifierProfile::Triangular, vec![1.0, 0.7], 128).unwrap();
        let mut rct = rng::stream(27, "inv-corr-ct", 0);
        estimate_counterterm(&geom, gamma, &mut plan, &mut rct).unwrap();
        let idx = geom.mode_index(&[1, 0]).unwrap();
        let mut truth = Vec::new();
        let mut rec0 = Vec::new();
        let mut rec1 = Vec::new();
        let mut err0 = 0.0;
        let mut err1 = 0.0;
        let mut r = rng::stream(227, "inv-corr", 0);
        let replicas = 100;
        for _ in 0..replicas {
            let psi = sample_cgf(&geom, &mut r);
            let m = build_gmc(&geom, &psi, gamma, 0.0).unwrap();
            let a = invert_gmc_at(&geom, &m, &plan, 0).unwrap();
            let b = invert_gmc_at(&geom, &m, &plan, 1).unwrap();
            truth.push(psi.field.coeff(idx));
            rec0.push(a.field.coeff(idx));
            rec1.push(b.field.coeff(idx));
            err0 += (a.field.coeff(idx) - psi.field.coeff(idx)).powi(2);
            err1 += (b.field.coeff(idx) - psi.field.coeff(idx)).powi(2);
        }
        let corr = crate::stats::correlation(&truth, &rec1);
        assert!(corr > 0.9, "recovery correlation {corr}");
        assert!(
            err1 <= err0 * 1.1,
            "smaller eps should not be much worse: {err1} vs {err0}"
        );
    }
}
