//! Cylinder functionals, integration-by-parts checks, generators, and
//! samplers for the symmetrising measures.
//!
//! A cylinder functional is `G(ω) = q(ω(h₀), …, ω(h_k))` with `h₀ ≡ 1` and
//! `q` a C² function with compact support in the first coordinate (the
//! total-mass window). The state is the ungrounded pair `(ψ, c)` with
//! `ω = e^{γc} M^γ(ψ)`.
//!
//! The symmetrising measures on `(ψ, c)` relative to `μ_ref(dψ) dc` are
//!
//! * NQF: `M^γ(ψ)(f)^{2 Q_ref(1)/(n σ²)}` (independent of `c`),
//! * LQF: `exp(-c ρ q_ref √(2 a_n/σ²) L^n + (2/(n σ²)) e^{γc} M^γ(ψ)(f))`,
//!
//! with `γ = n σ √(a_n/2)`. Expectations are taken on total-mass windows
//! `ω(1) ∈ (ε, 1/ε)`; in the log-total-mass coordinate `v = γc + log M(1)`
//! the window is a box. Sampling uses importance weights from `μ_ref` when
//! the effective sample size allows and a pCN-within-Gibbs chain otherwise.

use crate::chaos::{self, GmcMeasure, GridMeasure};
use crate::curvature::{Flow, PrescribingFunction, SignClass};
use crate::error::{QflowError, Result};
use crate::fields;
use crate::geometry::{FieldCoeffs, TorusGeometry};
use crate::stats;
use rand::Rng;
use rand_distr::StandardNormal;
use std::sync::Arc;

/// Chaos coupling derived from the noise amplitude: `γ = n σ √(a_n/2)`.
pub fn gamma_from_sigma(geom: &TorusGeometry, sigma: f64) -> f64 {
    geom.dim() as f64 * sigma * (geom.a_n() / 2.0).sqrt()
}

/// Total Q-curvature of the round sphere, `Q_r(1) = (4π)^{n/2}(n/2-1)! = 2/a_n`.
pub fn sphere_q_total(geom: &TorusGeometry) -> f64 {
    2.0 / geom.a_n()
}

/// Strict noise bound `σ² < 2 (4π)^{n/2} (n/2-1)!/n = 4/(n a_n)`.
pub fn sigma_squared_bound(geom: &TorusGeometry) -> f64 {
    4.0 / (geom.dim() as f64 * geom.a_n())
}

// ---------------------------------------------------------------------------
// The q-function library: polynomial × C² window bump.
// ---------------------------------------------------------------------------

/// C² window factor on `(lo, hi)`, zero outside.
#[derive(Debug, Clone, Copy)]
pub enum WindowBump {
    /// `((y - lo)(hi - y))³ / norm`.
    Cubic { lo: f64, hi: f64, norm: f64 },
    /// Quintic-smoothstep shoulders with a flat interior plateau of value 1;
    /// on the plateau all derivatives vanish exactly.
    Plateau { lo: f64, hi: f64, margin: f64 },
}

impl WindowBump {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo < hi) {
            return Err(QflowError::Config(format!(
                "bump needs lo < hi, got [{lo}, {hi}]"
            )));
        }
        let half = (hi - lo) / 2.0;
        Ok(WindowBump::Cubic {
            lo,
            hi,
            norm: (half * half).powi(3),
        })
    }

    pub fn plateau(lo: f64, hi: f64, margin: f64) -> Result<Self> {
        if !(lo < hi) || !(margin > 0.0) || 2.0 * margin >= hi - lo {
            return Err(QflowError::Config(format!(
                "plateau needs lo < hi and 0 < margin < (hi-lo)/2, got [{lo}, {hi}], {margin}"
            )));
        }
        Ok(WindowBump::Plateau { lo, hi, margin })
    }

    /// Window `(ε, 1/ε)` in the total-mass coordinate.
    pub fn mass_window(eps: f64) -> Result<Self> {
        if !(0.0 < eps && eps < 1.0) {
            return Err(QflowError::Config(format!(
                "window eps must be in (0,1), got {eps}"
            )));
        }
        Self::new(eps, 1.0 / eps)
    }

    pub fn support(&self) -> (f64, f64) {
        match *self {
            WindowBump::Cubic { lo, hi, .. } => (lo, hi),
            WindowBump::Plateau { lo, hi, .. } => (lo, hi),
        }
    }

    pub fn value(&self, y: f64) -> f64 {
        match *self {
            WindowBump::Cubic { lo, hi, norm } => {
                if y <= lo || y >= hi {
                    0.0
                } else {
                    ((y - lo) * (hi - y)).powi(3) / norm
                }
            }
            WindowBump::Plateau { lo, hi, margin } => {
                if y <= lo || y >= hi {
                    0.0
                } else if y < lo + margin {
                    smoothstep((y - lo) / margin).0
                } else if y > hi - margin {
                    smoothstep((hi - y) / margin).0
                } else {
                    1.0
                }
            }
        }
    }

    pub fn d1(&self, y: f64) -> f64 {
        match *self {
            WindowBump::Cubic { lo, hi, norm } => {
                if y <= lo || y >= hi {
                    0.0
                } else {
                    let u = (y - lo) * (hi - y);
                    let du = lo + hi - 2.0 * y;
                    3.0 * u * u * du / norm
                }
            }
            WindowBump::Plateau { lo, hi, margin } => {
                if y <= lo || y >= hi {
                    0.0
                } else if y < lo + margin {
                    smoothstep((y - lo) / margin).1 / margin
                } else if y > hi - margin {
                    -smoothstep((hi - y) / margin).1 / margin
                } else {
                    0.0
                }
            }
        }
    }

    pub fn d2(&self, y: f64) -> f64 {
        match *self {
            WindowBump::Cubic { lo, hi, norm } => {
                if y <= lo || y >= hi {
                    0.0
                } else {
                    let u = (y - lo) * (hi - y);
                    let du = lo + hi - 2.0 * y;
                    (6.0 * u * du * du - 6.0 * u * u) / norm
                }
            }
            WindowBump::Plateau { lo, hi, margin } => {
                if y <= lo || y >= hi {
                    0.0
                } else if y < lo + margin {
                    smoothstep((y - lo) / margin).2 / (margin * margin)
                } else if y > hi - margin {
                    smoothstep((hi - y) / margin).2 / (margin * margin)
                } else {
                    0.0
                }
            }
        }
    }
}

/// Quintic smoothstep `6t⁵ - 15t⁴ + 10t³` with first and second derivative
/// (C² at both ends).
fn smoothstep(t: f64) -> (f64, f64, f64) {
    let t = t.clamp(0.0, 1.0);
    let v = t * t * t * (10.0 + t * (-15.0 + 6.0 * t));
    let d1 = 30.0 * t * t * (1.0 - t) * (1.0 - t);
    let d2 = 60.0 * t * (1.0 - t) * (1.0 - 2.0 * t);
    (v, d1, d2)
}

/// Sparse multivariate polynomial: Σ coeff · Π y_a^{e_a}.
#[derive(Debug, Clone)]
pub struct Polynomial {
    pub terms: Vec<(f64, Vec<u32>)>,
}

impl Polynomial {
    pub fn constant(c: f64, arity: usize) -> Self {
        Polynomial {
            terms: vec![(c, vec![0; arity])],
        }
    }

    pub fn eval(&self, args: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|(c, es)| {
                c * es
                    .iter()
                    .zip(args)
                    .map(|(&e, &y)| y.powi(e as i32))
                    .product::<f64>()
            })
            .sum()
    }

    pub fn partial(&self, i: usize) -> Polynomial {
        let terms = self
            .terms
            .iter()
            .filter(|(_, es)| es[i] > 0)
            .map(|(c, es)| {
                let mut es2 = es.clone();
                es2[i] -= 1;
                (c * es[i] as f64, es2)
            })
            .collect();
        Polynomial { terms }
    }
}

/// Scalar C² function of the pairing vector with symbolic partials.
pub trait CylinderQ: Send + Sync {
    fn arity(&self) -> usize;
    fn value(&self, args: &[f64]) -> f64;
    fn partial(&self, i: usize, args: &[f64]) -> f64;
    fn partial2(&self, i: usize, j: usize, args: &[f64]) -> f64;
}

/// `q(y) = poly(y) · bump(y₀)`.
#[derive(Debug, Clone)]
pub struct WindowedQ {
    pub poly: Polynomial,
    pub bump: WindowBump,
    arity: usize,
}

impl WindowedQ {
    pub fn new(poly: Polynomial, bump: WindowBump) -> Result<Self> {
        let arity = poly
            .terms
            .first()
            .map(|(_, es)| es.len())
            .ok_or_else(|| QflowError::Config("empty polynomial".into()))?;
        if poly.terms.iter().any(|(_, es)| es.len() != arity) {
            return Err(QflowError::Config("inconsistent polynomial arity".into()));
        }
        Ok(WindowedQ { poly, bump, arity })
    }
}

impl CylinderQ for WindowedQ {
    fn arity(&self) -> usize {
        self.arity
    }

    fn value(&self, args: &[f64]) -> f64 {
        self.poly.eval(args) * self.bump.value(args[0])
    }

    fn partial(&self, i: usize, args: &[f64]) -> f64 {
        let b = self.bump.value(args[0]);
        let mut out = self.poly.partial(i).eval(args) * b;
        if i == 0 {
            out += self.poly.eval(args) * self.bump.d1(args[0]);
        }
        out
    }

    fn partial2(&self, i: usize, j: usize, args: &[f64]) -> f64 {
        let b = self.bump.value(args[0]);
        let pij = self.poly.partial(i).partial(j).eval(args);
        let mut out = pij * b;
        if i == 0 {
            out += self.poly.partial(j).eval(args) * self.bump.d1(args[0]);
        }
        if j == 0 {
            out += self.poly.partial(i).eval(args) * self.bump.d1(args[0]);
        }
        if i == 0 && j == 0 {
            out += self.poly.eval(args) * self.bump.d2(args[0]);
        }
        out
    }
}

/// Product `q₁ · q₂` with partials by the product rule (used by the
/// carré-du-champ identity tests).
pub struct ProductQ {
    pub a: Arc<dyn CylinderQ>,
    pub b: Arc<dyn CylinderQ>,
}

impl CylinderQ for ProductQ {
    fn arity(&self) -> usize {
        self.a.arity()
    }

    fn value(&self, args: &[f64]) -> f64 {
        self.a.value(args) * self.b.value(args)
    }

    fn partial(&self, i: usize, args: &[f64]) -> f64 {
        self.a.partial(i, args) * self.b.value(args) + self.a.value(args) * self.b.partial(i, args)
    }

    fn partial2(&self, i: usize, j: usize, args: &[f64]) -> f64 {
        self.a.partial2(i, j, args) * self.b.value(args)
            + self.a.partial(i, args) * self.b.partial(j, args)
            + self.a.partial(j, args) * self.b.partial(i, args)
            + self.a.value(args) * self.b.partial2(i, j, args)
    }
}

// ---------------------------------------------------------------------------
// Cylinder functionals over the ungrounded chaos state.
// ---------------------------------------------------------------------------

/// `G(ω) = q(ω(h₀), …, ω(h_k))` with `h₀ ≡ 1`.
pub struct CylinderFunctional {
    pub h_list: Vec<FieldCoeffs>,
    h_grids: Vec<Vec<f64>>,
    pub q: Arc<dyn CylinderQ>,
}

impl CylinderFunctional {
    /// `extra_h` are `h₁, …, h_k`; the constant `h₀ ≡ 1` is prepended.
    pub fn new(
        geom: &TorusGeometry,
        extra_h: Vec<FieldCoeffs>,
        q: Arc<dyn CylinderQ>,
    ) -> Result<Self> {
        let mut h_list = vec![FieldCoeffs::constant(geom, 1.0)];
        h_list.extend(extra_h);
        if q.arity() != h_list.len() {
            return Err(QflowError::Config(format!(
                "q arity {} does not match {} test functions",
                q.arity(),
                h_list.len()
            )));
        }
        let h_grids = h_list.iter().map(|h| geom.coeffs_to_grid(h)).collect();
        Ok(CylinderFunctional { h_list, h_grids, q })
    }

    pub fn arity(&self) -> usize {
        self.h_list.len()
    }

    pub fn h_grid(&self, i: usize) -> &[f64] {
        &self.h_grids[i]
    }

    /// Pairing vector `(ω(h₀), …, ω(h_k))`.
    pub fn args(&self, omega: &GridMeasure) -> Vec<f64> {
        self.h_grids.iter().map(|g| omega.pair(g)).collect()
    }

    pub fn value(&self, omega: &GridMeasure) -> f64 {
        self.q.value(&self.args(omega))
    }
}

/// Ungrounded chaos state `(ψ, c)` with its measure `ω = e^{γc} M^γ(ψ)`.
#[derive(Debug, Clone)]
pub struct ChaosState {
    pub psi: FieldCoeffs,
    pub c: f64,
    pub gamma: f64,
    pub omega: GmcMeasure,
}

impl ChaosState {
    pub fn new(geom: &TorusGeometry, psi: FieldCoeffs, c: f64, gamma: f64) -> Result<Self> {
        let sample = fields::CgfSample {
            field: psi.clone(),
            seed_path: String::new(),
            trunc: geom.trunc(),
        };
        let omega = chaos::build_gmc(geom, &sample, gamma, c)?;
        Ok(ChaosState {
            psi,
            c,
            gamma,
            omega,
        })
    }

    /// Assemble from a chaos measure already built at level zero
    /// (rescales the cells by `e^{γc}` instead of redoing the transform).
    pub fn from_grounded_measure(psi: FieldCoeffs, c: f64, m0: &GmcMeasure) -> Self {
        let scale = (m0.gamma * c).exp();
        let masses: Vec<f64> = m0.cells.masses().iter().map(|m| m * scale).collect();
        ChaosState {
            psi,
            c,
            gamma: m0.gamma,
            omega: GmcMeasure {
                cells: GridMeasure::from_raw(masses),
                gamma: m0.gamma,
                trunc: m0.trunc,
                counterterm: m0.counterterm,
            },
        }
    }
}

/// Fréchet derivative in direction `h`:
/// `D_h G(ψ) = γ Σ_i ∂_i q(args) ω(h_i h)`.
pub fn frechet_derivative(
    geom: &TorusGeometry,
    g: &CylinderFunctional,
    state: &ChaosState,
    h: &FieldCoeffs,
) -> f64 {
    let h_grid = geom.coeffs_to_grid(h);
    frechet_derivative_grid(g, state, &h_grid)
}

fn frechet_derivative_grid(g: &CylinderFunctional, state: &ChaosState, h_grid: &[f64]) -> f64 {
    let args = g.args(&state.omega.cells);
    let mut out = 0.0;
    for i in 0..g.arity() {
        let di = g.q.partial(i, &args);
        if di == 0.0 {
            continue;
        }
        let pair: f64 = state
            .omega
            .cells
            .masses()
            .iter()
            .zip(g.h_grid(i))
            .zip(h_grid)
            .map(|((m, hi), h)| m * hi * h)
            .sum();
        out += di * pair;
    }
    state.gamma * out
}

// ---------------------------------------------------------------------------
// Flow measures and generators.
// ---------------------------------------------------------------------------

/// A symmetrising measure with validated parameters.
pub struct FlowMeasure<'a> {
    pub geom: &'a TorusGeometry,
    pub flavor: Flow,
    pub f: &'a PrescribingFunction,
    pub sigma: f64,
    pub rho: f64,
    pub gamma: f64,
    /// `σ²` below the subcriticality bound (informational).
    pub sigma_subcritical: bool,
}

impl<'a> FlowMeasure<'a> {
    pub fn new(
        geom: &'a TorusGeometry,
        flavor: Flow,
        f: &'a PrescribingFunction,
        sigma: f64,
        rho: f64,
    ) -> Result<Self> {
        if sigma <= 0.0 {
            return Err(QflowError::Config(format!(
                "sigma must be positive, got {sigma}"
            )));
        }
        match flavor {
            Flow::Nqf => {
                if f.sign_class != SignClass::StrictlyPositive {
                    return Err(QflowError::Config(
                        "NQF requires a strictly positive prescribing function".into(),
                    ));
                }
                if geom.q_ref_total() >= sphere_q_total(geom) {
                    return Err(QflowError::MomentCondition(format!(
                        "Q_ref(1) = {} >= Q_r(1) = {}",
                        geom.q_ref_total(),
                        sphere_q_total(geom)
                    )));
                }
            }
            Flow::Lqf => {
                if f.sign_class != SignClass::Nonpositive {
                    return Err(QflowError::Config(
                        "LQF requires a nonpositive prescribing function".into(),
                    ));
                }
                if rho < 1.0 {
                    return Err(QflowError::Config(format!("rho must be >= 1, got {rho}")));
                }
                if rho * geom.q_ref_total() >= sphere_q_total(geom) {
                    return Err(QflowError::MomentCondition(format!(
                        "ρ Q_ref(1) = {} >= Q_r(1) = {}",
                        rho * geom.q_ref_total(),
                        sphere_q_total(geom)
                    )));
                }
            }
        }
        let gamma = gamma_from_sigma(geom, sigma);
        let limit = chaos::gamma_limit(geom.dim());
        if gamma >= limit {
            return Err(QflowError::SupercriticalGamma { gamma, limit });
        }
        Ok(FlowMeasure {
            geom,
            flavor,
            f,
            sigma,
            rho,
            gamma,
            sigma_subcritical: sigma * sigma < sigma_squared_bound(geom),
        })
    }

    /// NQF density exponent `α = 2 Q_ref(1)/(n σ²)`.
    pub fn nqf_exponent(&self) -> f64 {
        2.0 * self.geom.q_ref_total() / (self.geom.dim() as f64 * self.sigma * self.sigma)
    }

    /// LQF linear coefficient `A = ρ q_ref √(2 a_n/σ²) L^n`
    /// (density carries `e^{-A c}`).
    pub fn lqf_linear_coef(&self) -> f64 {
        self.rho
            * self.geom.q_ref_const()
            * (2.0 * self.geom.a_n() / (self.sigma * self.sigma)).sqrt()
            * self.geom.volume()
    }

    /// LQF chaos coefficient `B = 2/(n σ²)` (density carries
    /// `exp(B e^{γc} M(ψ)(f))`).
    pub fn lqf_chaos_coef(&self) -> f64 {
        2.0 / (self.geom.dim() as f64 * self.sigma * self.sigma)
    }

    /// Log density with respect to `μ_ref(dψ) dc`, given the grounded-chaos
    /// pairings `m_f = M^γ(ψ)(f)` and the level `c`.
    pub fn log_density(&self, m_f: f64, c: f64) -> f64 {
        match self.flavor {
            Flow::Nqf => self.nqf_exponent() * m_f.max(1e-300).ln(),
            Flow::Lqf => {
                -self.lqf_linear_coef() * c + self.lqf_chaos_coef() * (self.gamma * c).exp() * m_f
            }
        }
    }
}

/// Literal evaluation of the generator `L_NQF` / `L_LQF` at a state.
pub fn apply_generator(
    fm: &FlowMeasure<'_>,
    g: &CylinderFunctional,
    state: &ChaosState,
) -> Result<f64> {
    let geom = fm.geom;
    let n = geom.dim() as f64;
    let s2 = fm.sigma * fm.sigma;
    let args = g.args(&state.omega.cells);
    let omega = &state.omega.cells;

    let mut first = 0.0;
    let mut grounded_pair = 0.0;
    let mut ref_pair = 0.0;
    let mut second = 0.0;

    let omega_f = omega.pair(&fm.f.grid);
    for i in 0..g.arity() {
        let di = g.q.partial(i, &args);
        if di != 0.0 {
            // ω(f g_i)
            let w_f_gi: f64 = omega
                .masses()
                .iter()
                .zip(&fm.f.grid)
                .zip(g.h_grid(i))
                .map(|((m, f), h)| m * f * h)
                .sum();
            first += match fm.flavor {
                Flow::Nqf => {
                    if omega_f == 0.0 {
                        return Err(QflowError::NumericalAbort(
                            "omega(f) = 0 in generator".into(),
                        ));
                    }
                    di * n * geom.q_ref_total() * w_f_gi / omega_f
                }
                Flow::Lqf => di * n * w_f_gi,
            };
            grounded_pair += di * geom.pairing_e(&g.h_list[i], &state.psi);
            ref_pair += di * g.h_list[i].mean(geom) * geom.volume();
        }
        for j in 0..g.arity() {
            let dij = g.q.partial2(i, j, &args);
            if dij == 0.0 {
                continue;
            }
            let w_gi_gj: f64 = omega
                .masses()
                .iter()
                .zip(g.h_grid(i))
                .zip(g.h_grid(j))
                .map(|((m, a), b)| m * a * b)
                .sum();
            second += dij * w_gi_gj;
        }
    }
    let rho_eff = match fm.flavor {
        Flow::Nqf => 1.0,
        Flow::Lqf => fm.rho,
    };
    Ok(first + 0.5 * n * n * s2 * second
        - n * rho_eff * geom.q_ref_const() * ref_pair
        - 0.5 * n * n * s2 / fm.gamma * grounded_pair)
}

/// Carré-du-champ integrand of the Dirichlet form,
/// `(n²σ²/2) Σ_{ij} ∂_i p ∂_j q ω(f_i g_j)` (equal to
/// `(n²σ²/2γ²) ⟨DF, DG⟩_{L²(ω)}`).
pub fn form_integrand(
    fm: &FlowMeasure<'_>,
    f_fun: &CylinderFunctional,
    g_fun: &CylinderFunctional,
    state: &ChaosState,
) -> f64 {
    let n = fm.geom.dim() as f64;
    let s2 = fm.sigma * fm.sigma;
    let args_f = f_fun.args(&state.omega.cells);
    let args_g = g_fun.args(&state.omega.cells);
    let mut total = 0.0;
    for i in 0..f_fun.arity() {
        let dpi = f_fun.q.partial(i, &args_f);
        if dpi == 0.0 {
            continue;
        }
        for j in 0..g_fun.arity() {
            let dqj = g_fun.q.partial(j, &args_g);
            if dqj == 0.0 {
                continue;
            }
            let w: f64 = state
                .omega
                .cells
                .masses()
                .iter()
                .zip(f_fun.h_grid(i))
                .zip(g_fun.h_grid(j))
                .map(|((m, a), b)| m * a * b)
                .sum();
            total += dpi * dqj * w;
        }
    }
    0.5 * n * n * s2 * total
}

// ---------------------------------------------------------------------------
// Samplers for the symmetrising measures.
// ---------------------------------------------------------------------------

/// Tunables for the windowed sampler.
#[derive(Debug, Clone, Copy)]
pub struct SamplerConfig {
    pub pcn_beta: f64,
    /// Random-walk step for the level coordinate in windowed LQF sampling.
    pub level_step: f64,
    pub burn_in: usize,
    pub thin: usize,
    /// Pilot size for the IS effective-sample-size decision.
    pub pilot: usize,
    /// Minimum ESS to allow importance sampling (frozen threshold).
    pub min_ess: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            pcn_beta: 0.25,
            level_step: 0.4,
            burn_in: 500,
            thin: 4,
            pilot: 512,
            min_ess: 100.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum SamplerMethod {
    ImportanceSampling,
    PcnGibbs,
}

/// Post-run sampler diagnostics.
#[derive(Debug, Clone, serde::Serialize)]
pub struct SamplerReport {
    pub method: SamplerMethod,
    pub retained: usize,
    pub acceptance_psi: f64,
    pub acceptance_level: f64,
    /// ESS of the pilot importance weights (whatever method was chosen).
    pub pilot_ess: f64,
    /// Estimate of the window mass in sampler units (see module docs).
    pub window_mass: f64,
    /// Lag-1 autocorrelation of the total-mass series (chain quality).
    pub lag1_autocorr: f64,
}

/// Draw samples from the symmetrising measure restricted to the total-mass
/// window `ω(1) ∈ (ε, 1/ε)`; `window_eps = None` samples the unrestricted
/// measure (valid only for LQF in the finite regime `q_ref < 0`, `f <= 0`).
///
/// The visitor receives each retained state with its importance weight
/// (1 for chain samples).
pub fn sample_symmetrizing<F>(
    fm: &FlowMeasure<'_>,
    window_eps: Option<f64>,
    count: usize,
    cfg: &SamplerConfig,
    seed: u64,
    label: &str,
    mut visitor: F,
) -> Result<SamplerReport>
where
    F: FnMut(&ChaosState, f64),
{
    let geom = fm.geom;
    if count < 10 {
        return Err(QflowError::InsufficientSamples(
            "sampler needs count >= 10".into(),
        ));
    }
    let window = match window_eps {
        Some(eps) => {
            if !(0.0 < eps && eps < 1.0) {
                return Err(QflowError::Config(format!(
                    "window eps in (0,1), got {eps}"
                )));
            }
            Some((eps.ln(), -eps.ln()))
        }
        None => {
            if fm.flavor != Flow::Lqf || fm.geom.q_ref_const() >= 0.0 {
                return Err(QflowError::MomentCondition(
                    "unwindowed sampling is only defined for LQF with q_ref < 0".into(),
                ));
            }
            None
        }
    };

    let mut rng = crate::rng::stream(seed, label, 0);
    let mut psi = FieldCoeffs::zeros(geom);

    // Pilot: importance weights from μ_ref ⊗ Uniform(v-box) (windowed) or
    // μ_ref ⊗ exact level conditional (unwindowed LQF, weight on ψ only).
    let mut pilot_logw = Vec::with_capacity(cfg.pilot);
    for _ in 0..cfg.pilot {
        fields::sample_cgf_into(geom, &mut rng, &mut psi);
        let grid = geom.coeffs_to_grid(&psi);
        let m = chaos::build_gmc_from_grid(geom, &grid, fm.gamma, 0.0);
        let m_f = m.cells.pair(&fm.f.grid);
        let m_1 = m.cells.total();
        let logw = match window {
            Some((v_lo, v_hi)) => {
                let v = v_lo + rng.random::<f64>() * (v_hi - v_lo);
                let c = (v - m_1.ln()) / fm.gamma;
                fm.log_density(m_f, c)
            }
            None => lqf_level_log_marginal(fm, m_f)?,
        };
        pilot_logw.push(logw);
    }
    let max_logw = pilot_logw.iter().cloned().fold(f64::MIN, f64::max);
    let ws: Vec<f64> = pilot_logw.iter().map(|lw| (lw - max_logw).exp()).collect();
    let sum_w: f64 = ws.iter().sum();
    let sum_w2: f64 = ws.iter().map(|w| w * w).sum();
    let pilot_ess = sum_w * sum_w / sum_w2;
    let window_mass = sum_w / cfg.pilot as f64 * max_logw.exp();

    if pilot_ess >= cfg.min_ess {
        // Importance sampling route.
        for _ in 0..count {
            fields::sample_cgf_into(geom, &mut rng, &mut psi);
            let grid = geom.coeffs_to_grid(&psi);
            let m = chaos::build_gmc_from_grid(geom, &grid, fm.gamma, 0.0);
            let m_f = m.cells.pair(&fm.f.grid);
            let m_1 = m.cells.total();
            let (c, logw) = match window {
                Some((v_lo, v_hi)) => {
                    let v = v_lo + rng.random::<f64>() * (v_hi - v_lo);
                    let c = (v - m_1.ln()) / fm.gamma;
                    (c, fm.log_density(m_f, c))
                }
                None => {
                    let c = sample_lqf_level(fm, m_f, &mut rng)?;
                    (c, lqf_level_log_marginal(fm, m_f)?)
                }
            };
            let state = ChaosState::from_grounded_measure(psi.clone(), c, &m);
            visitor(&state, (logw - max_logw).exp());
        }
        return Ok(SamplerReport {
            method: SamplerMethod::ImportanceSampling,
            retained: count,
            acceptance_psi: 1.0,
            acceptance_level: 1.0,
            pilot_ess,
            window_mass,
            lag1_autocorr: 0.0,
        });
    }

    // pCN-within-Gibbs chain over (ψ, level).
    let beta = cfg.pcn_beta;
    let mix = (1.0 - beta * beta).sqrt();
    let mut xi = FieldCoeffs::zeros(geom);
    fields::sample_cgf_into(geom, &mut rng, &mut psi);
    let mut grid = geom.coeffs_to_grid(&psi);
    let mut m = chaos::build_gmc_from_grid(geom, &grid, fm.gamma, 0.0);
    let mut m_f = m.cells.pair(&fm.f.grid);
    let mut m_1 = m.cells.total();
    // Level coordinate: v in the window box, or c directly (unwindowed).
    let mut level = match window {
        Some((v_lo, v_hi)) => 0.5 * (v_lo + v_hi),
        None => sample_lqf_level(fm, m_f, &mut rng)?,
    };
    let mut acc_psi = 0usize;
    let mut acc_level = 0usize;
    let mut tries_psi = 0usize;
    let mut tries_level = 0usize;
    let total_sweeps = cfg.burn_in + count * cfg.thin;
    let mut retained = 0usize;
    let mut mass_series = Vec::with_capacity(count);

    let log_target = |fm: &FlowMeasure<'_>, m_f: f64, m_1: f64, level: f64| -> f64 {
        match window {
            Some(_) => {
                let c = (level - m_1.ln()) / fm.gamma;
                fm.log_density(m_f, c)
            }
            None => fm.log_density(m_f, level),
        }
    };

    for sweep in 0..total_sweeps {
        // ψ update (pCN, prior-reversible).
        tries_psi += 1;
        fields::sample_cgf_into(geom, &mut rng, &mut xi);
        let prop = {
            let mut p = psi.clone();
            for idx in 0..geom.num_modes() {
                let v = mix * psi.coeff(idx) + beta * xi.coeff(idx);
                p.set_coeff(geom, idx, v);
            }
            p
        };
        let prop_grid = geom.coeffs_to_grid(&prop);
        let prop_m = chaos::build_gmc_from_grid(geom, &prop_grid, fm.gamma, 0.0);
        let prop_f = prop_m.cells.pair(&fm.f.grid);
        let prop_1 = prop_m.cells.total();
        let log_ratio = log_target(fm, prop_f, prop_1, level) - log_target(fm, m_f, m_1, level);
        if log_ratio >= 0.0 || rng.random::<f64>() < log_ratio.exp() {
            psi = prop;
            grid = prop_grid;
            m = prop_m;
            m_f = prop_f;
            m_1 = prop_1;
            acc_psi += 1;
        }

        // Level update.
        match window {
            Some((v_lo, v_hi)) => {
                tries_level += 1;
                let z: f64 = rng.sample(StandardNormal);
                let prop_v = level + cfg.level_step * z;
                if prop_v > v_lo && prop_v < v_hi {
                    let lr = log_target(fm, m_f, m_1, prop_v) - log_target(fm, m_f, m_1, level);
                    if lr >= 0.0 || rng.random::<f64>() < lr.exp() {
                        level = prop_v;
                        acc_level += 1;
                    }
                }
            }
            None => {
                tries_level += 1;
                level = sample_lqf_level(fm, m_f, &mut rng)?;
                acc_level += 1;
            }
        }

        if sweep >= cfg.burn_in && (sweep - cfg.burn_in) % cfg.thin == 0 && retained < count {
            let c = match window {
                Some(_) => (level - m_1.ln()) / fm.gamma,
                None => level,
            };
            let _ = &grid;
            let state = ChaosState::from_grounded_measure(psi.clone(), c, &m);
            mass_series.push(state.omega.cells.total());
            visitor(&state, 1.0);
            retained += 1;
        }
    }

    let lag1 = if mass_series.len() > 3 {
        stats::correlation(&mass_series[..mass_series.len() - 1], &mass_series[1..])
    } else {
        0.0
    };
    Ok(SamplerReport {
        method: SamplerMethod::PcnGibbs,
        retained,
        acceptance_psi: acc_psi as f64 / tries_psi.max(1) as f64,
        acceptance_level: acc_level as f64 / tries_level.max(1) as f64,
        pilot_ess,
        window_mass,
        lag1_autocorr: lag1,
    })
}

/// Exact conditional level draw for unwindowed LQF: `u = e^{γc}` is
/// `Gamma(A/γ, 1/(-B m_f))` with `A` and `B` the density coefficients.
fn sample_lqf_level<R: Rng + ?Sized>(fm: &FlowMeasure<'_>, m_f: f64, rng: &mut R) -> Result<f64> {
    // Density in c is e^{-A c + B e^{γc} m_f}; in u = e^{γc} that is
    // Gamma(-A/γ, rate B(-m_f)), proper exactly when q_ref < 0 and m_f < 0.
    let shape = -fm.lqf_linear_coef() / fm.gamma;
    let rate = -fm.lqf_chaos_coef() * m_f;
    if shape <= 0.0 || rate <= 0.0 {
        return Err(QflowError::MomentCondition(format!(
            "LQF level conditional not normalizable (shape = {shape}, rate = {rate})"
        )));
    }
    let dist = rand_distr::Gamma::new(shape, 1.0 / rate)
        .map_err(|e| QflowError::Config(format!("gamma: {e}")))?;
    let u: f64 = rng.sample(dist);
    Ok(u.ln() / fm.gamma)
}

/// Log of the marginal density of ψ after integrating the level out of the
/// unwindowed LQF measure: `Γ(A/γ) / (γ (B(-m_f))^{A/γ})` up to constants.
fn lqf_level_log_marginal(fm: &FlowMeasure<'_>, m_f: f64) -> Result<f64> {
    let shape = -fm.lqf_linear_coef() / fm.gamma;
    let rate = -fm.lqf_chaos_coef() * m_f;
    if shape <= 0.0 || rate <= 0.0 {
        return Err(QflowError::MomentCondition(format!(
            "LQF level marginal not normalizable (shape = {shape}, rate = {rate})"
        )));
    }
    Ok(-shape * rate.ln())
}

// ---------------------------------------------------------------------------
// Integration-by-parts checks.
// ---------------------------------------------------------------------------

/// Two-sided Monte Carlo report for one IBP identity.
#[derive(Debug, Clone, serde::Serialize)]
pub struct IbpReport {
    pub lhs: f64,
    pub lhs_se: f64,
    pub rhs: f64,
    pub rhs_se: f64,
    pub z: f64,
    pub samples: usize,
}

impl IbpReport {
    fn from_sides(lhs: (f64, f64), rhs: (f64, f64), samples: usize) -> Self {
        let z = (lhs.0 - rhs.0) / (lhs.1 * lhs.1 + rhs.1 * rhs.1).sqrt().max(1e-300);
        IbpReport {
            lhs: lhs.0,
            lhs_se: lhs.1,
            rhs: rhs.0,
            rhs_se: rhs.1,
            z,
            samples,
        }
    }
}

/// Which IBP identity to exercise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IbpTarget {
    /// Grounded field: `E[D_h G - D_h̄ G] = E[G ⟨h, ψ⟩_E]`.
    Grounded,
    /// Ungrounded field with a compactly supported level factor `r`:
    /// `E[D_h(rG)] = E[r G ⟨h, ψ⟩_E]`.
    Ungrounded,
    /// The NQF measure identity.
    Nqf,
    /// The LQF measure identity (`h` must be grounded).
    Lqf,
}

/// Grounded-CGF IBP with both sides estimated from independent streams.
pub fn ibp_grounded(
    geom: &TorusGeometry,
    gamma: f64,
    g: &CylinderFunctional,
    h: &FieldCoeffs,
    reps: usize,
    seed: u64,
) -> Result<IbpReport> {
    if reps < 100 {
        return Err(QflowError::InsufficientSamples(
            "ibp needs reps >= 100".into(),
        ));
    }
    let h_grid = geom.coeffs_to_grid(h);
    let h_bar = h.mean(geom);
    let side = |label: &str, lhs: bool| -> Result<(f64, f64)> {
        let mut rng = crate::rng::stream(seed, label, 0);
        let mut psi = FieldCoeffs::zeros(geom);
        let mut vals = Vec::with_capacity(reps);
        for _ in 0..reps {
            fields::sample_cgf_into(geom, &mut rng, &mut psi);
            let state = ChaosState::new(geom, psi.clone(), 0.0, gamma)?;
            if lhs {
                let dh = frechet_derivative_grid(g, &state, &h_grid);
                // D_h̄ G for the constant h̄.
                let args = g.args(&state.omega.cells);
                let mut dbar = 0.0;
                for i in 0..g.arity() {
                    dbar += g.q.partial(i, &args) * args[i];
                }
                dbar *= gamma * h_bar;
                vals.push(dh - dbar);
            } else {
                let gv = g.value(&state.omega.cells);
                vals.push(gv * geom.pairing_e(h, &psi));
            }
        }
        Ok(stats::mean_se(&vals))
    };
    let lhs = side("ibp-lhs", true)?;
    let rhs = side("ibp-rhs", false)?;
    Ok(IbpReport::from_sides(lhs, rhs, reps))
}

/// Paired one-stream estimate of the grounded identity (the battery form):
/// `z = mean(D_h G - D_h̄ G - G ⟨h, ψ⟩_E) / se`.
pub fn ibp_grounded_paired(
    geom: &TorusGeometry,
    gamma: f64,
    g: &CylinderFunctional,
    h: &FieldCoeffs,
    reps: usize,
    seed: u64,
) -> Result<IbpReport> {
    if reps < 100 {
        return Err(QflowError::InsufficientSamples(
            "ibp needs reps >= 100".into(),
        ));
    }
    let h_grid = geom.coeffs_to_grid(h);
    let h_bar = h.mean(geom);
    let mut rng = crate::rng::stream(seed, "ibp-paired", 0);
    let mut psi = FieldCoeffs::zeros(geom);
    let mut diffs = Vec::with_capacity(reps);
    for _ in 0..reps {
        fields::sample_cgf_into(geom, &mut rng, &mut psi);
        let state = ChaosState::new(geom, psi.clone(), 0.0, gamma)?;
        let dh = frechet_derivative_grid(g, &state, &h_grid);
        let args = g.args(&state.omega.cells);
        let mut dbar = 0.0;
        for i in 0..g.arity() {
            dbar += g.q.partial(i, &args) * args[i];
        }
        dbar *= gamma * h_bar;
        let gv = g.q.value(&args);
        diffs.push(dh - dbar - gv * geom.pairing_e(h, &psi));
    }
    let (mean, se) = stats::mean_se(&diffs);
    Ok(IbpReport {
        lhs: mean,
        lhs_se: se,
        rhs: 0.0,
        rhs_se: 0.0,
        z: mean / se.max(1e-300),
        samples: reps,
    })
}

/// Ungrounded-CGF IBP: for a compactly supported level factor `r` (a C²
/// bump in the coordinate `ω_ref(ψ) = c L^n`),
/// `E[D_h(r G)] = E[r G ⟨h, ψ⟩_E]` under `μ_ref(dψ) ⊗ dc`. Both sides are
/// estimated with `c` uniform on the bump support (the common range factor
/// cancels in the comparison).
pub fn ibp_ungrounded(
    geom: &TorusGeometry,
    gamma: f64,
    g: &CylinderFunctional,
    h: &FieldCoeffs,
    level_bump: &WindowBump,
    reps: usize,
    seed: u64,
) -> Result<IbpReport> {
    if reps < 100 {
        return Err(QflowError::InsufficientSamples(
            "ibp needs reps >= 100".into(),
        ));
    }
    let h_grid = geom.coeffs_to_grid(h);
    let omega_ref_h = h.mean(geom) * geom.volume();
    let vol = geom.volume();
    let (c_lo_x, c_hi_x) = level_bump.support();
    let (c_lo, c_hi) = (c_lo_x / vol, c_hi_x / vol);
    let side = |label: &str, lhs: bool| -> Result<(f64, f64)> {
        let mut rng = crate::rng::stream(seed, label, 0);
        let mut psi = FieldCoeffs::zeros(geom);
        let mut vals = Vec::with_capacity(reps);
        for _ in 0..reps {
            fields::sample_cgf_into(geom, &mut rng, &mut psi);
            let c = c_lo + rng.random::<f64>() * (c_hi - c_lo);
            let state = ChaosState::new(geom, psi.clone(), c, gamma)?;
            let r_val = level_bump.value(c * vol);
            let x = if lhs {
                let dg = frechet_derivative_grid(g, &state, &h_grid);
                level_bump.d1(c * vol) * omega_ref_h * g.value(&state.omega.cells) + r_val * dg
            } else {
                r_val * g.value(&state.omega.cells) * geom.pairing_e(h, &psi)
            };
            vals.push(x);
        }
        Ok(stats::mean_se(&vals))
    };
    let lhs = side("ibp-ung-lhs", true)?;
    let rhs = side("ibp-ung-rhs", false)?;
    Ok(IbpReport::from_sides(lhs, rhs, reps))
}

/// Flow-measure IBP (NQF or LQF): both sides estimated from independent
/// sampler streams on the window of `g`.
pub fn ibp_flow(
    fm: &FlowMeasure<'_>,
    g: &CylinderFunctional,
    h: &FieldCoeffs,
    window_eps: f64,
    reps: usize,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<IbpReport> {
    if fm.flavor == Flow::Lqf && h.mean(fm.geom).abs() > 1e-12 {
        return Err(QflowError::Config(
            "the LQF identity requires a grounded direction h".into(),
        ));
    }
    let geom = fm.geom;
    let n = geom.dim() as f64;
    let s2 = fm.sigma * fm.sigma;
    let h_grid = geom.coeffs_to_grid(h);
    let omega_ref_h = h.mean(geom) * geom.volume();

    let run_side = |label: &str, lhs: bool| -> Result<(f64, f64)> {
        let mut vals = Vec::with_capacity(reps);
        let mut weights = Vec::with_capacity(reps);
        sample_symmetrizing(fm, Some(window_eps), reps, cfg, seed, label, |state, w| {
            let gv = g.value(&state.omega.cells);
            let x = if lhs {
                gv * geom.pairing_e(h, &state.psi)
            } else {
                let dh = frechet_derivative_grid(g, state, &h_grid);
                let omega = &state.omega.cells;
                let w_fh: f64 = omega
                    .masses()
                    .iter()
                    .zip(&fm.f.grid)
                    .zip(&h_grid)
                    .map(|((m, f), h)| m * f * h)
                    .sum();
                match fm.flavor {
                    Flow::Nqf => {
                        let w_f = omega.pair(&fm.f.grid);
                        dh + 2.0 * fm.gamma * geom.q_ref_total() / (n * s2) * gv * w_fh / w_f
                            - 2.0 * fm.gamma * geom.q_ref_const() / (n * s2) * omega_ref_h * gv
                    }
                    Flow::Lqf => {
                        dh + 2.0 * fm.gamma / (n * s2) * gv * w_fh
                            - fm.rho
                                * geom.q_ref_const()
                                * (2.0 * geom.a_n() / s2).sqrt()
                                * omega_ref_h
                                * gv
                    }
                }
            };
            vals.push(x);
            weights.push(w);
        })?;
        Ok(weighted_mean_se(&vals, &weights))
    };
    let lhs = run_side("ibp-flow-lhs", true)?;
    let rhs = run_side("ibp-flow-rhs", false)?;
    Ok(IbpReport::from_sides(lhs, rhs, reps))
}

/// Paired single-stream flow IBP: per retained sample compute
/// `X = G ⟨h, ψ⟩_E - (D_h G + background terms)` and test `E_ν[X] = 0`.
pub fn ibp_flow_paired(
    fm: &FlowMeasure<'_>,
    g: &CylinderFunctional,
    h: &FieldCoeffs,
    window_eps: f64,
    reps: usize,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<IbpReport> {
    if fm.flavor == Flow::Lqf && h.mean(fm.geom).abs() > 1e-12 {
        return Err(QflowError::Config(
            "the LQF identity requires a grounded direction h".into(),
        ));
    }
    let geom = fm.geom;
    let n = geom.dim() as f64;
    let s2 = fm.sigma * fm.sigma;
    let h_grid = geom.coeffs_to_grid(h);
    let omega_ref_h = h.mean(geom) * geom.volume();
    let mut vals = Vec::with_capacity(reps);
    let mut weights = Vec::with_capacity(reps);
    sample_symmetrizing(
        fm,
        Some(window_eps),
        reps,
        cfg,
        seed,
        "ibp-paired",
        |state, w| {
            let gv = g.value(&state.omega.cells);
            let lhs = gv * geom.pairing_e(h, &state.psi);
            let dh = frechet_derivative_grid(g, state, &h_grid);
            let omega = &state.omega.cells;
            let w_fh: f64 = omega
                .masses()
                .iter()
                .zip(&fm.f.grid)
                .zip(&h_grid)
                .map(|((m, f), h)| m * f * h)
                .sum();
            let rhs = match fm.flavor {
                Flow::Nqf => {
                    let w_f = omega.pair(&fm.f.grid);
                    dh + 2.0 * fm.gamma * geom.q_ref_total() / (n * s2) * gv * w_fh / w_f
                        - 2.0 * fm.gamma * geom.q_ref_const() / (n * s2) * omega_ref_h * gv
                }
                Flow::Lqf => {
                    dh + 2.0 * fm.gamma / (n * s2) * gv * w_fh
                        - fm.rho
                            * geom.q_ref_const()
                            * (2.0 * geom.a_n() / s2).sqrt()
                            * omega_ref_h
                            * gv
                }
            };
            vals.push(lhs - rhs);
            weights.push(w);
        },
    )?;
    let (mean, se) = weighted_mean_se(&vals, &weights);
    Ok(IbpReport {
        lhs: mean,
        lhs_se: se,
        rhs: 0.0,
        rhs_se: 0.0,
        z: mean / se.max(1e-300),
        samples: reps,
    })
}

/// Weighted mean with a ratio-estimator standard error (batch means for
/// unit weights).
pub fn weighted_mean_se(vals: &[f64], weights: &[f64]) -> (f64, f64) {
    let unit_weights = weights.iter().all(|&w| w == 1.0);
    if unit_weights {
        // Batch means: robust to chain autocorrelation.
        let b = (vals.len() / 20).clamp(1, 50);
        let batch = vals.len() / b;
        let means: Vec<f64> = (0..b)
            .map(|k| {
                let s = &vals[k * batch..(k + 1) * batch];
                s.iter().sum::<f64>() / s.len() as f64
            })
            .collect();
        stats::mean_se(&means)
    } else {
        let sw: f64 = weights.iter().sum();
        let mean = vals.iter().zip(weights).map(|(x, w)| x * w).sum::<f64>() / sw;
        let var: f64 = vals
            .iter()
            .zip(weights)
            .map(|(x, w)| (w * (x - mean)) * (w * (x - mean)))
            .sum::<f64>();
        (mean, var.sqrt() / sw)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    fn t2(grid: usize, trunc: u32, q_ref: f64) -> TorusGeometry {
        TorusGeometry::new(2, 2.0 * PI, grid, trunc, q_ref).unwrap()
    }

    fn simple_functional(geom: &TorusGeometry, eps: f64) -> CylinderFunctional {
        // q(y0, y1, y2) = (1 + y1 + 0.3 y1 y2 + 0.1 y2²) · bump(y0).
        let poly = Polynomial {
            terms: vec![
                (1.0, vec![0, 0, 0]),
                (1.0, vec![0, 1, 0]),
                (0.3, vec![0, 1, 1]),
                (0.1, vec![0, 0, 2]),
            ],
        };
        let q = WindowedQ::new(poly, WindowBump::mass_window(eps).unwrap()).unwrap();
        let h1 = FieldCoeffs::cosine_wave(geom, &[1, 0]).unwrap();
        let h2 = FieldCoeffs::cosine_wave(geom, &[0, 1]).unwrap();
        CylinderFunctional::new(geom, vec![h1, h2], Arc::new(q)).unwrap()
    }

    #[test]
    fn bump_is_c2_with_correct_derivatives() {
        let b = WindowBump::new(0.5, 2.0).unwrap();
        for y in [0.7, 1.0, 1.3, 1.9] {
            let h = 1e-6;
            let fd1 = (b.value(y + h) - b.value(y - h)) / (2.0 * h);
            assert_abs_diff_eq!(b.d1(y), fd1, epsilon = 1e-6);
            // Wider step for the second difference to stay above roundoff.
            let h2 = 1e-4;
            let fd2 = (b.value(y + h2) - 2.0 * b.value(y) + b.value(y - h2)) / (h2 * h2);
            assert_abs_diff_eq!(b.d2(y), fd2, epsilon = 1e-4);
        }
        // C² at the support boundary: value and both derivatives vanish.
        for y in [0.5, 2.0] {
            assert_eq!(b.value(y), 0.0);
            assert_eq!(b.d1(y), 0.0);
            assert_eq!(b.d2(y), 0.0);
        }
        assert_eq!(b.value(0.49), 0.0);
        assert_eq!(b.d1(2.01), 0.0);
    }

    #[test]
    fn gamma_matches_closed_form() {
        // γ = n σ √(a_n/2) = n σ / ((4π)^{n/4} √((n/2-1)!)).
        let geom = t2(8, 2, 0.0);
        let sigma = 1.2;
        let direct = 2.0 * sigma / (4.0 * PI).powf(0.5);
        assert_abs_diff_eq!(gamma_from_sigma(&geom, sigma), direct, epsilon = 1e-12);
        // σ² bound at n = 2 is 4π; Q_r(1) = 4π.
        assert_abs_diff_eq!(sigma_squared_bound(&geom), 4.0 * PI, epsilon = 1e-12);
        assert_abs_diff_eq!(sphere_q_total(&geom), 4.0 * PI, epsilon = 1e-12);
    }

    #[test]
    fn frechet_matches_finite_differences_with_richardson() {
        let geom = t2(16, 3, 0.0);
        let gamma = 0.6;
        let eps = 0.02; // window (0.02, 50) brackets the torus volume 4π²
        let g = simple_functional(&geom, eps);
        let mut r = rng::stream(80, "frechet", 0);
        let psi = fields::sample_cgf(&geom, &mut r).field;
        // Recentre the level so the total mass sits mid-window.
        let m1 = ChaosState::new(&geom, psi.clone(), 0.0, gamma)
            .unwrap()
            .omega
            .cells
            .total();
        let c = (5.0 / m1).ln() / gamma;
        let state = ChaosState::new(&geom, psi.clone(), c, gamma).unwrap();
        let h = FieldCoeffs::cosine_wave(&geom, &[1, 1]).unwrap();
        let d = frechet_derivative(&geom, &g, &state, &h);
        assert!(d != 0.0);

        let g_at = |t: f64| -> f64 {
            let shifted = psi.add_scaled(&geom, &h, t);
            let st = ChaosState::new(&geom, shifted, c, gamma).unwrap();
            g.value(&st.omega.cells)
        };
        let base = g_at(0.0);
        let e3 = (g_at(1e-3) - base) / 1e-3 - d;
        let e4 = (g_at(1e-4) - base) / 1e-4 - d;
        // One-sided differences have O(t) error: the Richardson ratio is ~10.
        let ratio = e3.abs() / e4.abs().max(1e-14);
        assert!(
            (5.0..20.0).contains(&ratio),
            "richardson ratio {ratio} (errors {e3}, {e4})"
        );

        // h = 0 direction gives zero.
        let zero = FieldCoeffs::zeros(&geom);
        assert_eq!(frechet_derivative(&geom, &g, &state, &zero), 0.0);

        // Windowed bound |D_h G| <= γ (k+1) sup|∂q| sup|h| / ε.
        let sup_h = geom
            .coeffs_to_grid(&h)
            .iter()
            .cloned()
            .fold(0.0f64, |a, b| a.max(b.abs()));
        let dq_sup = 200.0; // coarse bound for this q on its window
        assert!(
            d.abs() <= gamma * 3.0 * dq_sup * sup_h / eps,
            "bound violated: {d}"
        );
    }

    #[test]
    fn grounded_ibp_h_equals_one_vanishes() {
        let geom = t2(16, 3, 0.0);
        let g = simple_functional(&geom, 0.02);
        let gamma = 0.5;
        let mut r = rng::stream(81, "ibp1", 0);
        for _ in 0..20 {
            let psi = fields::sample_cgf(&geom, &mut r).field;
            let state = ChaosState::new(&geom, psi.clone(), 0.0, gamma).unwrap();
            let one = FieldCoeffs::constant(&geom, 1.0);
            let one_grid = geom.coeffs_to_grid(&one);
            let dh = frechet_derivative_grid(&g, &state, &one_grid);
            let args = g.args(&state.omega.cells);
            let mut dbar = 0.0;
            for i in 0..g.arity() {
                dbar += g.q.partial(i, &args) * args[i];
            }
            dbar *= gamma;
            assert_abs_diff_eq!(dh - dbar, 0.0, epsilon = 1e-10);
            assert_eq!(geom.pairing_e(&one, &psi), 0.0);
        }
    }

    #[test]
    fn grounded_ibp_two_sided() {
        let geom = t2(16, 3, 0.0);
        let g = simple_functional(&geom, 0.02);
        let gamma = 0.5;
        let h = {
            let a = FieldCoeffs::cosine_wave(&geom, &[1, 0]).unwrap();
            let b = FieldCoeffs::cosine_wave(&geom, &[1, 1]).unwrap();
            let mut h = a.add_scaled(&geom, &b, 0.7);
            let zi = geom.zero_mode_index();
            h.set_coeff(&geom, zi, 0.4); // include a mean component
            h
        };
        let rep = ibp_grounded(&geom, gamma, &g, &h, 60_000, 82).unwrap();
        assert!(rep.z.abs() < 3.0, "z = {} ({rep:?})", rep.z);
        let paired = ibp_grounded_paired(&geom, gamma, &g, &h, 60_000, 83).unwrap();
        assert!(paired.z.abs() < 3.0, "paired z = {}", paired.z);
    }

    #[test]
    fn ungrounded_ibp_two_sided() {
        let geom = t2(16, 3, 0.0);
        let g = simple_functional(&geom, 0.02);
        let gamma = 0.5;
        let mut h = FieldCoeffs::cosine_wave(&geom, &[1, 0]).unwrap();
        let zi = geom.zero_mode_index();
        h.set_coeff(&geom, zi, 0.6);
        let vol = geom.volume();
        let level = WindowBump::new(-1.2 * vol, 1.2 * vol).unwrap();
        let rep = ibp_ungrounded(&geom, gamma, &g, &h, &level, 60_000, 92).unwrap();
        assert!(rep.z.abs() < 3.0, "z = {} ({rep:?})", rep.z);
    }

    #[test]
    fn generator_vanishes_on_window_constants() {
        // G ≡ const on its window (plateau bump): every partial vanishes on
        // the plateau, so LG = 0 exactly there.
        let geom = t2(16, 3, 0.3);
        let f = PrescribingFunction::constant(&geom, 1.5).unwrap();
        let fm = FlowMeasure::new(&geom, Flow::Nqf, &f, 0.8, 1.0).unwrap();
        let poly = Polynomial::constant(3.7, 1);
        let bump = WindowBump::plateau(0.02, 80.0, 5.0).unwrap();
        let q = WindowedQ::new(poly, bump).unwrap();
        let g = CylinderFunctional::new(&geom, vec![], Arc::new(q)).unwrap();
        let mut r = rng::stream(84, "gen0", 0);
        let psi = fields::sample_cgf(&geom, &mut r).field;
        // Recentre the level so the total mass sits on the plateau.
        let m1 = ChaosState::new(&geom, psi.clone(), 0.0, fm.gamma)
            .unwrap()
            .omega
            .cells
            .total();
        let c = (30.0 / m1).ln() / fm.gamma;
        let state = ChaosState::new(&geom, psi, c, fm.gamma).unwrap();
        assert_eq!(g.value(&state.omega.cells), 3.7);
        let lg = apply_generator(&fm, &g, &state).unwrap();
        assert_eq!(lg, 0.0, "generator on a window constant: {lg}");
    }

    #[test]
    fn generator_product_rule_is_carre_du_champ() {
        // L(FG) - F LG - G LF = n²σ² Σ ∂p ∂q ω(f_i g_j), exactly per state.
        let geom = t2(16, 3, -0.4);
        let f = PrescribingFunction::constant(&geom, -0.6).unwrap();
        let fm = FlowMeasure::new(&geom, Flow::Lqf, &f, 0.7, 1.0).unwrap();
        let g1 = simple_functional(&geom, 0.02);
        let poly2 = Polynomial {
            terms: vec![
                (0.5, vec![0, 0, 0]),
                (0.2, vec![0, 2, 0]),
                (-0.4, vec![0, 0, 1]),
            ],
        };
        let q2 = WindowedQ::new(poly2, WindowBump::mass_window(0.02).unwrap()).unwrap();
        let g2 = CylinderFunctional::new(
            &geom,
            vec![
                FieldCoeffs::cosine_wave(&geom, &[1, 0]).unwrap(),
                FieldCoeffs::cosine_wave(&geom, &[0, 1]).unwrap(),
            ],
            Arc::new(q2),
        )
        .unwrap();
        let product = CylinderFunctional::new(
            &geom,
            vec![
                FieldCoeffs::cosine_wave(&geom, &[1, 0]).unwrap(),
                FieldCoeffs::cosine_wave(&geom, &[0, 1]).unwrap(),
            ],
            Arc::new(ProductQ {
                a: g1.q.clone(),
                b: g2.q.clone(),
            }),
        )
        .unwrap();

        let mut r = rng::stream(85, "gen-prod", 0);
        for _ in 0..10 {
            let psi = fields::sample_cgf(&geom, &mut r).field;
            // Keep the state inside both windows by recentring c.
            let m1 = ChaosState::new(&geom, psi.clone(), 0.0, fm.gamma)
                .unwrap()
                .omega
                .cells
                .total();
            let c = (5.0 / m1).ln() / fm.gamma;
            let state = ChaosState::new(&geom, psi, c, fm.gamma).unwrap();
            let lhs = apply_generator(&fm, &product, &state).unwrap()
                - g1.value(&state.omega.cells) * apply_generator(&fm, &g2, &state).unwrap()
                - g2.value(&state.omega.cells) * apply_generator(&fm, &g1, &state).unwrap();
            let rhs = 2.0 * form_integrand(&fm, &g1, &g2, &state);
            assert!(
                (lhs - rhs).abs() <= 1e-9 * rhs.abs().max(1.0),
                "product rule defect {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn pcn_with_unit_density_preserves_prior() {
        // pCN proposals with always-accept leave μ_ref invariant: the chain
        // marginal of ⟨h, ψ⟩_E matches fresh CGF samples.
        let geom = t2(16, 3, 0.0);
        let h = FieldCoeffs::cosine_wave(&geom, &[1, 0]).unwrap();
        let beta: f64 = 0.3;
        let mix = (1.0 - beta * beta).sqrt();
        let mut r = rng::stream(86, "pcn-prior", 0);
        let mut psi = fields::sample_cgf(&geom, &mut r).field;
        let mut xi = FieldCoeffs::zeros(&geom);
        let mut chain = Vec::new();
        for step in 0..6000 {
            fields::sample_cgf_into(&geom, &mut r, &mut xi);
            for idx in 0..geom.num_modes() {
                let v = mix * psi.coeff(idx) + beta * xi.coeff(idx);
                psi.set_coeff(&geom, idx, v);
            }
            if step % 3 == 0 {
                chain.push(geom.pairing_e(&h, &psi));
            }
        }
        let fresh: Vec<f64> = (0..2000)
            .map(|_| geom.pairing_e(&h, &fields::sample_cgf(&geom, &mut r).field))
            .collect();
        let ks = stats::ks_two_sample(&chain, &fresh).unwrap();
        assert!(ks.p_value > 0.01, "KS p = {}", ks.p_value);
    }

    #[test]
    fn nqf_sampler_with_flat_background_is_plain_cgf() {
        // q_ref = 0 makes the NQF density constant: ψ-samples are CGF draws
        // and the log-total-mass is uniform on the window box.
        let geom = t2(16, 3, 0.0);
        let f = PrescribingFunction::constant(&geom, 1.0).unwrap();
        let fm = FlowMeasure::new(&geom, Flow::Nqf, &f, 0.8, 1.0).unwrap();
        let h = FieldCoeffs::cosine_wave(&geom, &[1, 0]).unwrap();
        let eps = 0.05;
        let mut pairings = Vec::new();
        let mut vs = Vec::new();
        let report = sample_symmetrizing(
            &fm,
            Some(eps),
            4000,
            &SamplerConfig::default(),
            87,
            "nqf-flat",
            |state, _w| {
                pairings.push(fm.geom.pairing_e(&h, &state.psi));
                vs.push(state.omega.cells.total().ln());
            },
        )
        .unwrap();
        // Flat density → the IS pilot sees constant weights → IS route.
        assert_eq!(report.method, SamplerMethod::ImportanceSampling);
        let mut r = rng::stream(88, "fresh", 0);
        let fresh: Vec<f64> = (0..3000)
            .map(|_| geom.pairing_e(&h, &fields::sample_cgf(&geom, &mut r).field))
            .collect();
        let ks = stats::ks_two_sample(&pairings, &fresh).unwrap();
        assert!(ks.p_value > 0.01, "psi marginal off: p = {}", ks.p_value);
        // Uniformity of log total mass across the window box.
        let (_, p) = stats::chi2_uniformity(&vs, eps.ln(), -eps.ln(), 12).unwrap();
        assert!(p > 0.01, "log-mass not flat: p = {p}");
    }

    #[test]
    fn window_mass_monotone_in_eps() {
        let geom = t2(16, 3, 0.2);
        let f = PrescribingFunction::constant(&geom, 1.0).unwrap();
        let fm = FlowMeasure::new(&geom, Flow::Nqf, &f, 0.8, 1.0).unwrap();
        let mass_at = |eps: f64, seed: u64| -> f64 {
            sample_symmetrizing(
                &fm,
                Some(eps),
                16,
                &SamplerConfig::default(),
                seed,
                "wm",
                |_, _| {},
            )
            .unwrap()
            .window_mass
                * (-2.0 * eps.ln() / fm.gamma)
        };
        // Nested windows: ν(window ε₁) <= ν(window ε₂) for ε₁ > ε₂.
        let m_wide = mass_at(0.02, 89);
        let m_narrow = mass_at(0.1, 89);
        assert!(
            m_narrow <= m_wide * 1.05,
            "window masses not monotone: {m_narrow} vs {m_wide}"
        );
    }

    #[test]
    fn lqf_unwindowed_sampler_volume_is_cir_stationary() {
        // With f = q_ref < 0 constant, the ν_LQF volume marginal is exactly
        // the CIR stationary Gamma law.
        let geom = t2(16, 3, -1.0);
        let f = PrescribingFunction::constant(&geom, -1.0).unwrap();
        let sigma = 1.0;
        let fm = FlowMeasure::new(&geom, Flow::Lqf, &f, sigma, 1.0).unwrap();
        let mut vols = Vec::new();
        sample_symmetrizing(
            &fm,
            None,
            4000,
            &SamplerConfig::default(),
            90,
            "lqf-free",
            |state, _| vols.push(state.omega.cells.total()),
        )
        .unwrap();
        let spec = crate::volume::CirSpec::from_flow(2, -1.0, geom.volume(), 1.0, sigma).unwrap();
        let law = crate::volume::cir_stationary(&spec).unwrap();
        let mut r = rng::stream(91, "gamma", 0);
        let gamma_draws: Vec<f64> = (0..4000).map(|_| law.sample(&mut r)).collect();
        let ks = stats::ks_two_sample(&vols, &gamma_draws).unwrap();
        assert!(ks.p_value > 0.01, "KS p = {}", ks.p_value);
    }

    #[test]
    fn moment_condition_rejected() {
        // Push ρ Q_ref(1) past Q_r(1) = 4π.
        let geom = t2(8, 2, -1.0);
        let f = PrescribingFunction::constant(&geom, -1.0).unwrap();
        assert!(FlowMeasure::new(&geom, Flow::Lqf, &f, 0.5, 1.0).is_ok());
        let geom_bad = t2(8, 2, 0.5); // Q_ref(1) = 0.5·4π² > 4π
        let f_pos = PrescribingFunction::constant(&geom_bad, 1.0).unwrap();
        assert!(matches!(
            FlowMeasure::new(&geom_bad, Flow::Nqf, &f_pos, 0.5, 1.0),
            Err(QflowError::MomentCondition(_))
        ));
    }
}
