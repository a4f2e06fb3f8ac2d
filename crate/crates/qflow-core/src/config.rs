//! Run configuration: parsing, validation, and derived constants.
//!
//! A run is described by one JSON file with five blocks (geometry, model,
//! scheme, experiment, output). Validation computes every derived constant
//! (`a_n`, `γ`, the sphere total `Q_r(1)`, the σ² bound, moment-condition
//! margins) and produces a canonical form whose SHA-256 hash identifies the
//! run. The chaos coupling `γ` is always derived from `σ`; a config that
//! supplies an inconsistent `γ` is rejected.

use crate::curvature::{Flow, PrescribingFunction, Scheme, SignClass};
use crate::error::{QflowError, Result};
use crate::forms;
use crate::geometry::{FieldCoeffs, TorusGeometry};
use crate::stochastic::NoiseMode;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryConfig {
    pub n: usize,
    #[serde(rename = "L")]
    pub period: f64,
    pub grid: usize,
    pub trunc: u32,
    #[serde(default)]
    pub q_ref_const: f64,
}

/// Prescribing function as a constant plus cosine modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FSpec {
    pub constant: f64,
    #[serde(default)]
    pub modes: Vec<ModeAmp>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeAmp {
    pub freq: Vec<i32>,
    pub amp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub flavor: Flow,
    pub sigma: f64,
    #[serde(default = "one")]
    pub rho: f64,
    pub f: FSpec,
    /// Optional: if present it must equal the derived value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    /// Initial conformal factor for flow runs (defaults to zero).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi0: Option<FSpec>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeConfig {
    pub dt: f64,
    pub t_end: f64,
    #[serde(default = "default_scheme")]
    pub scheme: Scheme,
    #[serde(default = "default_noise")]
    pub noise_mode: NoiseMode,
    #[serde(default = "default_mass_floor")]
    pub mass_floor_factor: f64,
    #[serde(default = "default_v_floor")]
    pub v_floor_factor: f64,
    #[serde(default = "default_v_ceil")]
    pub v_ceil_factor: f64,
    #[serde(default = "default_window")]
    pub window_eps: f64,
}

fn default_scheme() -> Scheme {
    Scheme::Imex
}
fn default_noise() -> NoiseMode {
    NoiseMode::Cellwise
}
fn default_mass_floor() -> f64 {
    1e-12
}
fn default_v_floor() -> f64 {
    1e-8
}
fn default_v_ceil() -> f64 {
    1e8
}
fn default_window() -> f64 {
    0.02
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default = "default_reps")]
    pub reps: usize,
    #[serde(default = "default_paths")]
    pub paths: usize,
    /// Experiment names for `suite run` (empty = none).
    #[serde(default)]
    pub checks: Vec<String>,
}

fn default_reps() -> usize {
    10_000
}
fn default_paths() -> usize {
    256
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputConfig {
    #[serde(default)]
    pub dir: Option<String>,
    #[serde(default = "default_cadence")]
    pub cadence: usize,
    #[serde(default)]
    pub write_cells: bool,
}

fn default_cadence() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub geometry: GeometryConfig,
    pub model: ModelConfig,
    pub scheme: SchemeConfig,
    pub experiment: ExperimentConfig,
    #[serde(default = "default_output")]
    pub output: OutputConfig,
}

fn default_output() -> OutputConfig {
    OutputConfig {
        dir: None,
        cadence: default_cadence(),
        write_cells: false,
    }
}

/// Constants derived during validation.
#[derive(Debug, Clone, Serialize)]
pub struct DerivedConstants {
    pub a_n: f64,
    pub gamma: f64,
    /// `Q_r(1) = (4π)^{n/2} (n/2-1)!`.
    pub sphere_q_total: f64,
    /// `Q_ref(1) = q_ref_const L^n`.
    pub q_ref_total: f64,
    pub sigma_squared_bound: f64,
    pub sigma_subcritical: bool,
    /// Margin `Q_r(1) - ρ_eff Q_ref(1)` of the moment condition
    /// (ρ_eff = 1 for NQF).
    pub moment_margin: f64,
    /// `ρ = 1 + a_n n σ²/4` within 1e-10.
    pub polyakov_liouville: bool,
}

/// A validated configuration with its canonical hash.
#[derive(Debug, Clone)]
pub struct NormalizedConfig {
    pub raw: RunConfig,
    pub derived: DerivedConstants,
    pub warnings: Vec<String>,
    pub hash: String,
}

impl NormalizedConfig {
    pub fn geometry(&self) -> Result<TorusGeometry> {
        let g = &self.raw.geometry;
        TorusGeometry::new(g.n, g.period, g.grid, g.trunc, g.q_ref_const)
    }

    pub fn prescribing(&self, geom: &TorusGeometry) -> Result<PrescribingFunction> {
        build_prescribing(geom, &self.raw.model.f, self.raw.model.flavor)
    }
}

/// Assemble a truncated field from a constant plus cosine modes.
pub fn build_field(geom: &TorusGeometry, f: &FSpec) -> Result<FieldCoeffs> {
    let mut field = FieldCoeffs::constant(geom, f.constant);
    for m in &f.modes {
        let wave = FieldCoeffs::cosine_wave(geom, &m.freq)
            .ok_or_else(|| QflowError::Config(format!("mode {:?} outside truncation", m.freq)))?;
        field = field.add_scaled(geom, &wave, m.amp);
    }
    Ok(field)
}

pub fn build_prescribing(
    geom: &TorusGeometry,
    f: &FSpec,
    flavor: Flow,
) -> Result<PrescribingFunction> {
    let field = build_field(geom, f)?;
    let class = match flavor {
        Flow::Nqf => SignClass::StrictlyPositive,
        Flow::Lqf => SignClass::Nonpositive,
    };
    PrescribingFunction::new(geom, field, class)
}

/// Validate and normalise a parsed configuration.
pub fn validate_config(cfg: RunConfig) -> Result<NormalizedConfig> {
    let g = &cfg.geometry;
    if g.n % 2 != 0 || g.n < 2 {
        return Err(QflowError::Config(format!(
            "dimension must be even and >= 2, got {}",
            g.n
        )));
    }
    if g.grid < 2 * g.trunc as usize {
        return Err(QflowError::Config(format!(
            "grid {} < 2·trunc = {}",
            g.grid,
            2 * g.trunc
        )));
    }
    let geom = TorusGeometry::new(g.n, g.period, g.grid, g.trunc, g.q_ref_const)?;

    let mut warnings = Vec::new();
    if g.grid < 4 * g.trunc as usize {
        warnings.push(format!(
            "grid {} below the dealiasing recommendation 4·trunc = {}",
            g.grid,
            4 * g.trunc
        ));
    }

    let m = &cfg.model;
    if m.sigma <= 0.0 {
        return Err(QflowError::Config(format!(
            "sigma must be positive, got {}",
            m.sigma
        )));
    }
    if m.rho < 1.0 {
        return Err(QflowError::Config(format!(
            "rho must be >= 1, got {}",
            m.rho
        )));
    }
    let gamma = forms::gamma_from_sigma(&geom, m.sigma);
    if let Some(given) = m.gamma {
        if (given - gamma).abs() > 1e-12 * gamma.max(1.0) {
            return Err(QflowError::Config(format!(
                "config gamma {given} inconsistent with derived n σ √(a_n/2) = {gamma}"
            )));
        }
    }

    // Sign class is enforced on the grid by construction.
    build_prescribing(&geom, &m.f, m.flavor)?;

    let sigma_sq_bound = forms::sigma_squared_bound(&geom);
    let sigma_subcritical = m.sigma * m.sigma < sigma_sq_bound;
    if !sigma_subcritical {
        warnings.push(format!(
            "sigma² = {} is not below the strict bound {}; run is exploratory",
            m.sigma * m.sigma,
            sigma_sq_bound
        ));
    }

    let rho_eff = match m.flavor {
        Flow::Nqf => 1.0,
        Flow::Lqf => m.rho,
    };
    let moment_margin = forms::sphere_q_total(&geom) - rho_eff * geom.q_ref_total();
    if moment_margin <= 0.0 {
        warnings.push(format!(
            "moment condition violated: ρ_eff Q_ref(1) exceeds Q_r(1) by {}",
            -moment_margin
        ));
    }

    let pl_rho = 1.0 + geom.a_n() * g.n as f64 * m.sigma * m.sigma / 4.0;
    let derived = DerivedConstants {
        a_n: geom.a_n(),
        gamma,
        sphere_q_total: forms::sphere_q_total(&geom),
        q_ref_total: geom.q_ref_total(),
        sigma_squared_bound: sigma_sq_bound,
        sigma_subcritical,
        moment_margin,
        polyakov_liouville: (m.rho - pl_rho).abs() < 1e-10,
    };

    if cfg.scheme.dt <= 0.0 || cfg.scheme.t_end <= 0.0 {
        return Err(QflowError::Config("dt and t_end must be positive".into()));
    }
    if !(0.0 < cfg.scheme.window_eps && cfg.scheme.window_eps < 1.0) {
        return Err(QflowError::Config(format!(
            "window_eps must lie in (0,1), got {}",
            cfg.scheme.window_eps
        )));
    }

    let hash = config_hash(&cfg)?;
    Ok(NormalizedConfig {
        raw: cfg,
        derived,
        warnings,
        hash,
    })
}

/// Canonical SHA-256 of the serialised config.
pub fn config_hash(cfg: &RunConfig) -> Result<String> {
    let canon = serde_json::to_string(cfg)?;
    let mut hasher = Sha256::new();
    hasher.update(canon.as_bytes());
    let digest = hasher.finalize();
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

pub fn parse_config(text: &str) -> Result<NormalizedConfig> {
    let cfg: RunConfig = serde_json::from_str(text)?;
    validate_config(cfg)
}

pub fn emit_config(cfg: &RunConfig) -> Result<String> {
    Ok(serde_json::to_string_pretty(cfg)?)
}
