//! Q-curvature pairings, flow energies, and the deterministic flows.
//!
//! For a smooth conformal factor `φ` (truncated) the distributional
//! Q-curvature of `g = e^{2φ} g_ref` acts on test functions as
//! `Q_g(h) = ω_ref(Q_ref h + φ P_ref h)`; as a grid function it is
//! `Q_g = e^{-nφ}(Q_ref + P_ref φ)`. The two flows are gradient flows of
//!
//! ```text
//! E¹_f[φ] = ½ ω_ref(φ P φ) + ω_ref(Q_ref φ) - (1/n) Q_ref(1) log ω_φ(f)
//! E²_f[φ] = ½ ω_ref(φ P φ) + ρ ω_ref(Q_ref φ) - (1/n) ω_φ(f)
//! ```
//!
//! with respect to the `L²(ω_φ)` metric, where `ω_φ = e^{nφ} ω_ref`. The
//! `ρ` adjustment applies to the Liouville flow only.

use crate::error::{QflowError, Result};
use crate::geometry::{FieldCoeffs, Operator, TorusGeometry};

/// Sign regime of the prescribing function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SignClass {
    /// Required by the normalised flow.
    StrictlyPositive,
    /// Required by the Liouville flow.
    Nonpositive,
}

/// Prescribing function `f` with its verified sign class.
#[derive(Debug, Clone)]
pub struct PrescribingFunction {
    pub field: FieldCoeffs,
    pub grid: Vec<f64>,
    pub sign_class: SignClass,
}

impl PrescribingFunction {
    pub fn new(geom: &TorusGeometry, field: FieldCoeffs, sign_class: SignClass) -> Result<Self> {
        let grid = geom.coeffs_to_grid(&field);
        match sign_class {
            SignClass::StrictlyPositive => {
                let min = grid.iter().cloned().fold(f64::MAX, f64::min);
                if min <= 0.0 {
                    return Err(QflowError::Config(format!(
                        "prescribing function not strictly positive (min {min})"
                    )));
                }
            }
            SignClass::Nonpositive => {
                let max = grid.iter().cloned().fold(f64::MIN, f64::max);
                if max > 0.0 {
                    return Err(QflowError::Config(format!(
                        "prescribing function not nonpositive (max {max})"
                    )));
                }
            }
        }
        Ok(PrescribingFunction {
            field,
            grid,
            sign_class,
        })
    }

    pub fn constant(geom: &TorusGeometry, value: f64) -> Result<Self> {
        let class = if value > 0.0 {
            SignClass::StrictlyPositive
        } else {
            SignClass::Nonpositive
        };
        Self::new(geom, FieldCoeffs::constant(geom, value), class)
    }
}

/// Truncated conformal factor with cached grid data.
#[derive(Debug, Clone)]
pub struct ConformalState {
    pub phi: FieldCoeffs,
    pub phi_grid: Vec<f64>,
    /// `e^{nφ}` on the grid (density of `ω_φ` against `ω_ref`).
    pub density: Vec<f64>,
}

impl ConformalState {
    pub fn new(geom: &TorusGeometry, phi: FieldCoeffs) -> Self {
        let phi_grid = geom.coeffs_to_grid(&phi);
        let n = geom.dim() as f64;
        let density = phi_grid.iter().map(|&p| (n * p).exp()).collect();
        ConformalState {
            phi,
            phi_grid,
            density,
        }
    }

    /// Total volume `ω_φ(1)`.
    pub fn volume(&self, geom: &TorusGeometry) -> f64 {
        geom.cell_volume() * self.density.iter().sum::<f64>()
    }

    /// `ω_φ(h)` for grid values of `h`.
    pub fn omega_pair(&self, geom: &TorusGeometry, h_grid: &[f64]) -> f64 {
        geom.cell_volume()
            * self
                .density
                .iter()
                .zip(h_grid)
                .map(|(d, h)| d * h)
                .sum::<f64>()
    }
}

/// Flow flavour.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Flow {
    Nqf,
    Lqf,
}

/// Energy functional selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Energy {
    E1,
    E2,
}

/// Distributional Q-pairing `Q_g(h) = q_ref ω_ref(h) + ω_ref(φ P h)`.
pub fn q_pairing(geom: &TorusGeometry, state: &ConformalState, h: &FieldCoeffs) -> Result<f64> {
    let ph = geom.apply_operator(Operator::P, h)?;
    // Both terms are spectrally exact for truncated fields.
    let omega_h = h.mean(geom) * geom.volume();
    Ok(geom.q_ref_const() * omega_h + geom.l2_inner(&state.phi, &ph))
}

/// Pointwise Q-curvature `e^{-nφ}(ρ_eff q_ref + P φ)` on the grid.
/// `ρ_eff` is 1 for the plain curvature and `ρ` for the adjusted Liouville
/// drift.
pub fn q_curvature_grid(
    geom: &TorusGeometry,
    state: &ConformalState,
    rho_eff: f64,
) -> Result<Vec<f64>> {
    let p_phi = geom.apply_operator(Operator::P, &state.phi)?;
    let p_grid = geom.coeffs_to_grid(&p_phi);
    let n = geom.dim() as f64;
    Ok(state
        .phi_grid
        .iter()
        .zip(&p_grid)
        .map(|(&phi, &pp)| (-n * phi).exp() * (rho_eff * geom.q_ref_const() + pp))
        .collect())
}

/// Evaluate `E¹_f` or `E²_f` at the state. `rho` enters `E²` only.
pub fn energy(
    geom: &TorusGeometry,
    which: Energy,
    state: &ConformalState,
    f: &PrescribingFunction,
    rho: f64,
) -> Result<f64> {
    let p_phi = geom.apply_operator(Operator::P, &state.phi)?;
    let quad = 0.5 * geom.l2_inner(&state.phi, &p_phi);
    let omega_ref_phi = state.phi.mean(geom) * geom.volume();
    let omega_f = state.omega_pair(geom, &f.grid);
    let n = geom.dim() as f64;
    match which {
        Energy::E1 => {
            if f.sign_class != SignClass::StrictlyPositive {
                return Err(QflowError::NonpositiveLog(
                    "E1 requires a strictly positive prescribing function".into(),
                ));
            }
            if omega_f <= 0.0 {
                return Err(QflowError::NonpositiveLog(format!(
                    "omega_phi(f) = {omega_f}"
                )));
            }
            Ok(quad + geom.q_ref_const() * omega_ref_phi - geom.q_ref_total() / n * omega_f.ln())
        }
        Energy::E2 => Ok(quad + rho * geom.q_ref_const() * omega_ref_phi - omega_f / n),
    }
}

/// Right-hand side of the flow for `φ`, as grid values:
/// NQF: `-(Q_φ - Q(1) f / ω_φ(f))`; LQF: `-(e^{-nφ}(ρ q_ref + Pφ) - f)`.
pub fn flow_rhs_grid(
    geom: &TorusGeometry,
    which: Flow,
    state: &ConformalState,
    f: &PrescribingFunction,
    rho: f64,
) -> Result<Vec<f64>> {
    match which {
        Flow::Nqf => {
            let q = q_curvature_grid(geom, state, 1.0)?;
            let omega_f = state.omega_pair(geom, &f.grid);
            if omega_f == 0.0 {
                return Err(QflowError::NumericalAbort(
                    "omega_t(f) vanished in the NQF normalisation".into(),
                ));
            }
            let ratio = geom.q_ref_total() / omega_f;
            Ok(q.iter()
                .zip(&f.grid)
                .map(|(&qv, &fv)| -(qv - ratio * fv))
                .collect())
        }
        Flow::Lqf => {
            let q = q_curvature_grid(geom, state, rho)?;
            Ok(q.iter().zip(&f.grid).map(|(&qv, &fv)| -(qv - fv)).collect())
        }
    }
}

/// Projected (truncated) flow right-hand side.
pub fn flow_rhs(
    geom: &TorusGeometry,
    which: Flow,
    state: &ConformalState,
    f: &PrescribingFunction,
    rho: f64,
) -> Result<FieldCoeffs> {
    let grid = flow_rhs_grid(geom, which, state, f, rho)?;
    geom.grid_to_coeffs(&grid)
}

/// `⟨rhs, h⟩_{L²(ω_φ)}`, the pairing that must equal minus the directional
/// derivative of the energy (gradient-flow identity).
pub fn rhs_energy_pairing(
    geom: &TorusGeometry,
    which: Flow,
    state: &ConformalState,
    f: &PrescribingFunction,
    rho: f64,
    h: &FieldCoeffs,
) -> Result<f64> {
    let rhs = flow_rhs_grid(geom, which, state, f, rho)?;
    let h_grid = geom.coeffs_to_grid(h);
    let prod: Vec<f64> = rhs
        .iter()
        .zip(&h_grid)
        .zip(&state.density)
        .map(|((r, h), d)| r * h * d)
        .collect();
    geom.quadrature(&prod)
}

/// Central-difference directional derivative of the energy (step `eps`).
pub fn energy_directional_derivative(
    geom: &TorusGeometry,
    which: Energy,
    state: &ConformalState,
    f: &PrescribingFunction,
    rho: f64,
    h: &FieldCoeffs,
    eps: f64,
) -> Result<f64> {
    let plus = ConformalState::new(geom, state.phi.add_scaled(geom, h, eps));
    let minus = ConformalState::new(geom, state.phi.add_scaled(geom, h, -eps));
    let ep = energy(geom, which, &plus, f, rho)?;
    let em = energy(geom, which, &minus, f, rho)?;
    Ok((ep - em) / (2.0 * eps))
}

/// Time integrator choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Scheme {
    Rk4,
    /// Implicit diagonal `P`, explicit nonlinearity. For NQF the step is
    /// followed by an exact volume renormalisation (a constant shift of φ),
    /// so the conserved volume is enforced to machine precision.
    Imex,
}

/// One recorded trajectory point.
#[derive(Debug, Clone, serde::Serialize)]
pub struct TrajectoryPoint {
    pub t: f64,
    pub volume: f64,
    pub energy: f64,
    /// `L²(ω_ref)` norm of the pointwise Q-curvature.
    pub q_l2: f64,
    /// Conformal invariant `Q_φ(1)`.
    pub q_total: f64,
    /// `ω_φ(h_j)` for the configured observables.
    pub pairings: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub points: Vec<TrajectoryPoint>,
    pub final_state: ConformalState,
}

/// Integrate the deterministic flow on `[0, t_end]`.
pub fn integrate(
    geom: &TorusGeometry,
    which: Flow,
    state0: ConformalState,
    f: &PrescribingFunction,
    rho: f64,
    dt: f64,
    t_end: f64,
    scheme: Scheme,
    record_every: usize,
    observables: &[FieldCoeffs],
) -> Result<Trajectory> {
    if dt <= 0.0 || t_end <= 0.0 {
        return Err(QflowError::Config(format!(
            "integration needs dt > 0 and t_end > 0 (got {dt}, {t_end})"
        )));
    }
    let energy_kind = match which {
        Flow::Nqf => Energy::E1,
        Flow::Lqf => Energy::E2,
    };
    let record_every = record_every.max(1);
    let obs_grids: Vec<Vec<f64>> = observables.iter().map(|h| geom.coeffs_to_grid(h)).collect();
    let steps = (t_end / dt).round() as usize;
    let v0 = state0.volume(geom);
    let n = geom.dim() as f64;

    let record = |t: f64, st: &ConformalState, out: &mut Vec<TrajectoryPoint>| -> Result<()> {
        let q = q_curvature_grid(geom, st, 1.0)?;
        let q_sq: Vec<f64> = q.iter().map(|&x| x * x).collect();
        let one = FieldCoeffs::constant(geom, 1.0);
        out.push(TrajectoryPoint {
            t,
            volume: st.volume(geom),
            energy: energy(geom, energy_kind, st, f, rho)?,
            q_l2: geom.quadrature(&q_sq)?.sqrt(),
            q_total: q_pairing(geom, st, &one)?,
            pairings: obs_grids.iter().map(|g| st.omega_pair(geom, g)).collect(),
        });
        Ok(())
    };

    let mut points = Vec::new();
    let mut state = state0;
    record(0.0, &state, &mut points)?;

    for step in 1..=steps {
        state = match scheme {
            Scheme::Rk4 => {
                let phi = &state.phi;
                let k1 = flow_rhs(geom, which, &state, f, rho)?;
                let s2 = ConformalState::new(geom, phi.add_scaled(geom, &k1, dt / 2.0));
                let k2 = flow_rhs(geom, which, &s2, f, rho)?;
                let s3 = ConformalState::new(geom, phi.add_scaled(geom, &k2, dt / 2.0));
                let k3 = flow_rhs(geom, which, &s3, f, rho)?;
                let s4 = ConformalState::new(geom, phi.add_scaled(geom, &k3, dt));
                let k4 = flow_rhs(geom, which, &s4, f, rho)?;
                let mut phi_next = phi.clone();
                for idx in 0..geom.num_modes() {
                    let incr =
                        (k1.coeff(idx) + 2.0 * k2.coeff(idx) + 2.0 * k3.coeff(idx) + k4.coeff(idx))
                            * dt
                            / 6.0;
                    phi_next.set_coeff(geom, idx, phi_next.coeff(idx) + incr);
                }
                ConformalState::new(geom, phi_next)
            }
            Scheme::Imex => {
                // Stabilising coefficient: the largest e^{-nφ} multiplying P.
                let alpha = state
                    .phi_grid
                    .iter()
                    .map(|&p| (-n * p).exp())
                    .fold(0.0, f64::max);
                let rhs = flow_rhs(geom, which, &state, f, rho)?;
                let mut phi_next = state.phi.clone();
                for idx in 0..geom.num_modes() {
                    let lam = geom.p_eigenvalue(idx);
                    let explicit = rhs.coeff(idx) + alpha * lam * state.phi.coeff(idx);
                    let v = (state.phi.coeff(idx) + dt * explicit) / (1.0 + dt * alpha * lam);
                    phi_next.set_coeff(geom, idx, v);
                }
                let mut next = ConformalState::new(geom, phi_next);
                if which == Flow::Nqf {
                    // Exact volume renormalisation (constant shift of φ).
                    let v = next.volume(geom);
                    let shift = (v0 / v).ln() / n;
                    let mut phi = next.phi.clone();
                    let zi = geom.zero_mode_index();
                    phi.set_coeff(geom, zi, phi.coeff(zi) + shift * geom.volume().sqrt());
                    next = ConformalState::new(geom, phi);
                }
                next
            }
        };
        let v = state.volume(geom);
        if !v.is_finite() || v <= 0.0 {
            return Err(QflowError::NumericalAbort(format!(
                "volume {v} at t = {}",
                step as f64 * dt
            )));
        }
        if step % record_every == 0 || step == steps {
            record(step as f64 * dt, &state, &mut points)?;
        }
    }

    Ok(Trajectory {
        points,
        final_state: state,
    })
}
