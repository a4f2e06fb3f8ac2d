//! Browser bindings for the interactive demo page (`www/index.html`).
//!
//! Three exported operations, all deterministic given their seeds:
//!
//! * [`ChaosExplorer`] — sample a co-polyharmonic Gaussian field on `T²` and
//!   build its multiplicative chaos measure at adjustable `γ`.
//! * [`FlowAnimator`] — relax a random initial conformal factor under the
//!   deterministic normalised Q flow and watch `‖Q‖` decay.
//! * [`VolumeSimulator`] — exact squared-Bessel / CIR sample paths of the
//!   stochastic flows' total volume.
//!
//! Build with `wasm-pack build crates/qflow-wasm --target web` and serve the
//! `www/` directory (see the README).

use qflow_core::chaos;
use qflow_core::curvature::{integrate, ConformalState, Flow, PrescribingFunction, Scheme};
use qflow_core::fields;
use qflow_core::geometry::TorusGeometry;
use qflow_core::rng;
use qflow_core::volume;
use wasm_bindgen::prelude::*;

fn t2(grid: usize, trunc: u32, q_ref: f64) -> Result<TorusGeometry, JsError> {
    TorusGeometry::new(2, 2.0 * std::f64::consts::PI, grid, trunc, q_ref)
        .map_err(|e| JsError::new(&e.to_string()))
}

/// Gaussian field + chaos measure explorer on `T²`.
#[wasm_bindgen]
pub struct ChaosExplorer {
    geom: TorusGeometry,
    psi_grid: Vec<f64>,
    gamma: f64,
}

#[wasm_bindgen]
impl ChaosExplorer {
    #[wasm_bindgen(constructor)]
    pub fn new(grid: usize, trunc: u32, seed: u64) -> Result<ChaosExplorer, JsError> {
        let geom = t2(grid, trunc, 0.0)?;
        let mut r = rng::stream(seed, "wasm-chaos", 0);
        let psi = fields::sample_cgf(&geom, &mut r);
        let psi_grid = geom.coeffs_to_grid(&psi.field);
        Ok(ChaosExplorer {
            geom,
            psi_grid,
            gamma: 0.5,
        })
    }

    pub fn resample(&mut self, seed: u64) {
        let mut r = rng::stream(seed, "wasm-chaos", 0);
        let psi = fields::sample_cgf(&self.geom, &mut r);
        self.psi_grid = self.geom.coeffs_to_grid(&psi.field);
    }

    /// Set `γ` as a fraction of the subcritical limit `√(2n)`.
    pub fn set_gamma_fraction(&mut self, frac: f64) {
        self.gamma = frac.clamp(0.0, 0.99) * chaos::gamma_limit(2);
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn grid(&self) -> usize {
        self.geom.grid()
    }

    /// Field values on the grid (row-major).
    pub fn field(&self) -> Vec<f64> {
        self.psi_grid.clone()
    }

    /// Chaos cell masses at the current `γ` (row-major).
    pub fn measure(&self) -> Vec<f64> {
        chaos::build_gmc_from_grid(&self.geom, &self.psi_grid, self.gamma, 0.0)
            .cells
            .masses()
            .to_vec()
    }

    pub fn total_mass(&self) -> f64 {
        self.measure().iter().sum()
    }
}

/// Deterministic normalised Q-flow relaxation from a random start.
#[wasm_bindgen]
pub struct FlowAnimator {
    geom: TorusGeometry,
    state: ConformalState,
    f: PrescribingFunction,
    dt: f64,
    t: f64,
}

#[wasm_bindgen]
impl FlowAnimator {
    #[wasm_bindgen(constructor)]
    pub fn new(
        grid: usize,
        trunc: u32,
        seed: u64,
        amplitude: f64,
    ) -> Result<FlowAnimator, JsError> {
        let geom = t2(grid, trunc, 0.0)?;
        let mut r = rng::stream(seed, "wasm-flow", 0);
        let mut psi = fields::sample_cgf(&geom, &mut r).field;
        // Normalise the random start to the requested amplitude.
        let max = geom
            .coeffs_to_grid(&psi)
            .iter()
            .fold(0.0f64, |a, &b| a.max(b.abs()));
        if max > 0.0 {
            psi.scale(amplitude / max);
        }
        let f =
            PrescribingFunction::constant(&geom, 1.0).map_err(|e| JsError::new(&e.to_string()))?;
        let state = ConformalState::new(&geom, psi);
        Ok(FlowAnimator {
            geom,
            state,
            f,
            dt: 2e-3,
            t: 0.0,
        })
    }

    /// Advance `steps` imex steps; returns the current `‖Q‖_{L²}`.
    pub fn step(&mut self, steps: usize) -> Result<f64, JsError> {
        let traj = integrate(
            &self.geom,
            Flow::Nqf,
            self.state.clone(),
            &self.f,
            1.0,
            self.dt,
            self.dt * steps as f64,
            Scheme::Imex,
            steps,
            &[],
        )
        .map_err(|e| JsError::new(&e.to_string()))?;
        self.t += self.dt * steps as f64;
        self.state = traj.final_state;
        Ok(traj.points.last().map(|p| p.q_l2).unwrap_or(0.0))
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn volume(&self) -> f64 {
        self.state.volume(&self.geom)
    }

    pub fn grid(&self) -> usize {
        self.geom.grid()
    }

    /// Current conformal factor on the grid (row-major).
    pub fn phi(&self) -> Vec<f64> {
        self.state.phi_grid.clone()
    }
}

/// Exact volume-process paths: squared Bessel (NQF) or CIR (LQF).
#[wasm_bindgen]
pub struct VolumeSimulator {
    sigma: f64,
    q_ref: f64,
    rho: f64,
    v_ref: f64,
}

#[wasm_bindgen]
impl VolumeSimulator {
    #[wasm_bindgen(constructor)]
    pub fn new(sigma: f64, q_ref: f64, rho: f64) -> VolumeSimulator {
        VolumeSimulator {
            sigma: sigma.max(1e-3),
            q_ref,
            rho: rho.max(1.0),
            v_ref: (2.0 * std::f64::consts::PI).powi(2),
        }
    }

    /// Simulate `paths` exact paths on `steps` points over `[0, t_end]`,
    /// starting at `V_ref`. Returns the flattened `paths × (steps+1)` array.
    /// `liouville = false` gives the driftless NQF volume (BESQ⁰),
    /// `liouville = true` the CIR volume with the configured background.
    pub fn paths(
        &self,
        liouville: bool,
        paths: usize,
        steps: usize,
        t_end: f64,
        seed: u64,
    ) -> Result<Vec<f64>, JsError> {
        let n = 2.0;
        let dt = t_end / steps as f64;
        let spec = if liouville {
            Some(
                volume::CirSpec::from_flow(
                    2,
                    self.q_ref.min(-1e-6),
                    self.v_ref,
                    self.rho,
                    self.sigma,
                )
                .map_err(|e| JsError::new(&e.to_string()))?,
            )
        } else {
            None
        };
        let mut out = Vec::with_capacity(paths * (steps + 1));
        for p in 0..paths {
            let mut r = rng::stream(seed, "wasm-vol", p as u64);
            let mut v = self.v_ref;
            out.push(v);
            for _ in 0..steps {
                v = match &spec {
                    Some(spec) => volume::cir_transition(spec, v, dt, &mut r)
                        .map_err(|e| JsError::new(&e.to_string()))?,
                    None => volume::besq0_transition(v, dt, n * self.sigma, &mut r)
                        .map_err(|e| JsError::new(&e.to_string()))?,
                };
                out.push(v);
            }
        }
        Ok(out)
    }

    /// Stationary Gamma law `(shape, scale)` of the CIR volume, when it
    /// exists.
    pub fn stationary(&self) -> Vec<f64> {
        volume::CirSpec::from_flow(2, self.q_ref, self.v_ref, self.rho, self.sigma)
            .ok()
            .and_then(|s| volume::cir_stationary(&s).ok())
            .map(|law| vec![law.shape, law.scale])
            .unwrap_or_default()
    }

    pub fn v_ref(&self) -> f64 {
        self.v_ref
    }
}
