//! Numerical laboratory for stochastic Q-curvature flows on flat even-dimensional tori.
//!
//! The crate is organised around a spectral representation of the flat torus
//! `T^n = (R / L Z)^n`:
//!
//! * [`geometry`] — the reference torus, truncated Fourier fields, the
//!   co-polyharmonic operator `P = (-Δ)^{n/2}` and its grounded Green inverse,
//!   Sobolev norms and quadrature.
//! * [`fields`] — samplers for grounded co-polyharmonic Gaussian fields
//!   (covariance `p^{-1}`) and the mollified approximations used by the
//!   chaos construction.
//! * [`chaos`] — renormalised Gaussian multiplicative chaos measures
//!   `M^γ(ψ)`, their shift/moment identities, and the inversion map that
//!   recovers the field from the measure.
//! * [`curvature`] — Q-curvature pairings, the energy functionals behind the
//!   normalised and Liouville Q flows, and deterministic integrators.
//! * [`stochastic`] — the measure-valued Euler–Maruyama scheme for the
//!   stochastic flows, with cemetery handling and projected-SDE diagnostics.
//! * [`forms`] — cylinder functionals, Fréchet derivatives, generators,
//!   integration-by-parts checks and samplers for the symmetrising measures.
//! * [`volume`] — exact squared-Bessel and CIR reference laws for the total
//!   volume processes.
//! * [`stats`] — Kolmogorov–Smirnov tests and small statistical helpers.
//! * [`config`] / [`report`] — run configuration, validation, and persisted
//!   run records.
//!
//! Everything is deterministic given a seed: randomness flows through named
//! counter-based ChaCha streams (see [`rng`]).

pub mod acceptance;
pub mod chaos;
pub mod config;
pub mod curvature;
pub mod error;
pub mod fft;
pub mod fields;
pub mod forms;
pub mod geometry;
pub mod report;
pub mod rng;
pub mod stats;
pub mod stochastic;
pub mod volume;

pub use error::{QflowError, Result};
pub use geometry::{FieldCoeffs, TorusGeometry};
