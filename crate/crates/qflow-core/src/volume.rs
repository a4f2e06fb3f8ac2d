//! Exact reference laws for the total-volume processes.
//!
//! The NQF volume solves `dV = c √V dB` (no drift), a squared Bessel process
//! of dimension 0 after the space-time scaling `V_t = X_{(c²/4) t}` onto the
//! standard normalisation `dX = 2√X dB`. Its transition from `v0` is the
//! Poisson–Gamma mixture `N ~ Poisson(2 v0/(c² t))`, `V_t | N ~ Γ(N, c² t/2)`
//! with the `N = 0` atom absorbed at zero, so the absorption probability is
//! `exp(-2 v0 / (c² t))`.
//!
//! The LQF volume solves `dV = -n Q_ref(1)(ρ - V/V_ref) dt + n σ √V dB`,
//! a CIR process with `κ = -n q_ref`, `θ = ρ V_ref`, `s = n σ`. Its exact
//! transition is the scaled noncentral chi-squared sampled as a
//! Poisson-mixed Gamma, and its stationary law is
//! `Γ(2κθ/s², scale s²/(2κ))`.
//!
//! These closed forms are standard; the test suite validates each against a
//! brute-force Euler discretisation before they are used as oracles
//! elsewhere.

use crate::error::{QflowError, Result};
use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson};

/// Absorption probability of `dV = c√V dB` started at `v0`, by time `t`.
pub fn besq0_absorption_prob(v0: f64, t: f64, diffusion_coeff: f64) -> Result<f64> {
    if v0 < 0.0 || t <= 0.0 || diffusion_coeff <= 0.0 {
        return Err(QflowError::Config(format!(
            "besq0 needs v0 >= 0, t > 0, c > 0 (got {v0}, {t}, {diffusion_coeff})"
        )));
    }
    Ok((-2.0 * v0 / (diffusion_coeff * diffusion_coeff * t)).exp())
}

/// Exact transition sample of `dV = c√V dB`.
pub fn besq0_transition<R: Rng + ?Sized>(
    v0: f64,
    t: f64,
    diffusion_coeff: f64,
    rng: &mut R,
) -> Result<f64> {
    if v0 < 0.0 || t <= 0.0 || diffusion_coeff <= 0.0 {
        return Err(QflowError::Config(format!(
            "besq0 needs v0 >= 0, t > 0, c > 0 (got {v0}, {t}, {diffusion_coeff})"
        )));
    }
    if v0 == 0.0 {
        return Ok(0.0);
    }
    let c2t = diffusion_coeff * diffusion_coeff * t;
    let lambda = 2.0 * v0 / c2t;
    let n = Poisson::new(lambda)
        .map_err(|e| QflowError::Config(format!("poisson: {e}")))?
        .sample(rng);
    if n < 0.5 {
        return Ok(0.0);
    }
    let gamma = Gamma::new(n, c2t / 2.0).map_err(|e| QflowError::Config(format!("gamma: {e}")))?;
    Ok(gamma.sample(rng))
}

/// CIR volume-process parameters in the flow's own variables.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct CirSpec {
    /// `a = n Q_ref(1) / V_ref` (negative in the mean-reverting regime).
    pub a: f64,
    /// Level `b = ρ V_ref`.
    pub b: f64,
    /// Volatility coefficient `s = n σ`.
    pub s: f64,
    /// The positivity inequality in the looser stated form:
    /// `2 (-q_ref)(ρ V_ref) >= σ²`.
    pub feller_stated: bool,
    /// The boundary classification of the stated SDE itself:
    /// `2κθ >= s²`, i.e. `2 (-q_ref)(ρ V_ref) >= n σ²`.
    pub feller_exact: bool,
}

impl CirSpec {
    pub fn from_flow(
        dim: usize,
        q_ref_const: f64,
        v_ref: f64,
        rho: f64,
        sigma: f64,
    ) -> Result<Self> {
        if sigma <= 0.0 || v_ref <= 0.0 {
            return Err(QflowError::Config(format!(
                "CIR spec needs sigma > 0 and V_ref > 0 (got {sigma}, {v_ref})"
            )));
        }
        let n = dim as f64;
        // a = n Q_ref(1)/V_ref = n q_ref for the constant background.
        let a = n * q_ref_const;
        Ok(CirSpec {
            a,
            b: rho * v_ref,
            s: n * sigma,
            feller_stated: 2.0 * (-q_ref_const) * (rho * v_ref) >= sigma * sigma,
            feller_exact: 2.0 * (-q_ref_const) * (rho * v_ref) >= n * sigma * sigma,
        })
    }

    /// Mean-reversion rate `κ = -a`.
    pub fn kappa(&self) -> f64 {
        -self.a
    }

    /// Long-run level `θ = b`.
    pub fn theta(&self) -> f64 {
        self.b
    }

    /// Boundary dimension `δ = 4κθ/s²` of the process.
    pub fn boundary_dimension(&self) -> f64 {
        4.0 * self.kappa() * self.theta() / (self.s * self.s)
    }
}

fn cir_ct(spec: &CirSpec, t: f64) -> f64 {
    let kappa = spec.kappa();
    let s2 = spec.s * spec.s;
    if (kappa * t).abs() < 1e-8 {
        // κ -> 0 limit: c_t -> 2/(s² t), with the first-order correction.
        2.0 / (s2 * t * (1.0 - 0.5 * kappa * t))
    } else {
        2.0 * kappa / (s2 * (1.0 - (-kappa * t).exp()))
    }
}

/// Exact CIR transition via the noncentral chi-squared representation.
pub fn cir_transition<R: Rng + ?Sized>(
    spec: &CirSpec,
    v0: f64,
    t: f64,
    rng: &mut R,
) -> Result<f64> {
    if t <= 0.0 {
        return Err(QflowError::Config(format!("cir needs t > 0, got {t}")));
    }
    if v0 < 0.0 {
        return Err(QflowError::Config(format!("cir needs v0 >= 0, got {v0}")));
    }
    let d = spec.boundary_dimension();
    if d < 0.0 {
        return Err(QflowError::Config(format!(
            "boundary dimension 4κθ/s² = {d} is negative; not a CIR regime"
        )));
    }
    let ct = cir_ct(spec, t);
    let lambda = 2.0 * ct * v0 * (-spec.kappa() * t).exp();
    let n = if lambda > 0.0 {
        Poisson::new(0.5 * lambda)
            .map_err(|e| QflowError::Config(format!("poisson: {e}")))?
            .sample(rng)
    } else {
        0.0
    };
    let shape = 0.5 * d + n;
    if shape <= 0.0 {
        return Ok(0.0);
    }
    let chi2 = Gamma::new(shape, 2.0)
        .map_err(|e| QflowError::Config(format!("gamma: {e}")))?
        .sample(rng);
    Ok(chi2 / (2.0 * ct))
}

/// Closed-form transition mean and variance of CIR.
pub fn cir_mean_var(spec: &CirSpec, v0: f64, t: f64) -> (f64, f64) {
    let kappa = spec.kappa();
    let theta = spec.theta();
    let s2 = spec.s * spec.s;
    let e = (-kappa * t).exp();
    let mean = theta + (v0 - theta) * e;
    let var = if kappa.abs() < 1e-12 {
        s2 * v0 * t + 0.5 * s2 * theta * kappa * t * t
    } else {
        v0 * (s2 / kappa) * (e - e * e) + theta * (s2 / (2.0 * kappa)) * (1.0 - e) * (1.0 - e)
    };
    (mean, var)
}

/// Stationary Gamma law of a mean-reverting CIR.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct GammaLaw {
    pub shape: f64,
    pub scale: f64,
}

impl GammaLaw {
    pub fn mean(&self) -> f64 {
        self.shape * self.scale
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        Gamma::new(self.shape, self.scale).unwrap().sample(rng)
    }
}

pub fn cir_stationary(spec: &CirSpec) -> Result<GammaLaw> {
    let kappa = spec.kappa();
    if kappa <= 0.0 {
        return Err(QflowError::Config(format!(
            "stationary law needs κ > 0, got {kappa}"
        )));
    }
    let s2 = spec.s * spec.s;
    Ok(GammaLaw {
        shape: 2.0 * kappa * spec.theta() / s2,
        scale: s2 / (2.0 * kappa),
    })
}

/// Euler–Maruyama path endpoint for `dV = drift(V) dt + c √V dB`, clamped
/// at zero. Brute-force oracle for validating the exact samplers.
pub fn euler_sqrt_sde<R: Rng + ?Sized, F: Fn(f64) -> f64>(
    drift: F,
    diffusion_coeff: f64,
    v0: f64,
    t: f64,
    dt: f64,
    rng: &mut R,
) -> f64 {
    let steps = (t / dt).round() as usize;
    let sdt = dt.sqrt();
    let mut v: f64 = v0;
    for _ in 0..steps {
        let z: f64 = rng.sample(rand_distr::StandardNormal);
        v += drift(v) * dt + diffusion_coeff * v.max(0.0).sqrt() * sdt * z;
        v = v.max(0.0);
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::stats;
    use approx::assert_abs_diff_eq;

    #[test]
    fn absorbed_at_zero_stays() {
        let mut r = rng::stream(40, "besq", 0);
        for _ in 0..100 {
            assert_eq!(besq0_transition(0.0, 1.0, 2.0, &mut r).unwrap(), 0.0);
        }
    }

    #[test]
    fn besq0_is_martingale() {
        let mut r = rng::stream(41, "besq-mart", 0);
        let (v0, t, c) = (3.0, 0.7, 1.4);
        let xs: Vec<f64> = (0..40_000)
            .map(|_| besq0_transition(v0, t, c, &mut r).unwrap())
            .collect();
        let (mean, se) = stats::mean_se(&xs);
        assert!((mean - v0).abs() < 3.0 * se, "mean {mean}, want {v0}");
    }

    #[test]
    fn absorption_probability_matches_euler_oracle() {
        // dV = c √V dB with dt = 1e-5; the exact constant is 2/(c²t).
        let (v0, t, c) = (0.4, 0.25, 1.3);
        let want = besq0_absorption_prob(v0, t, c).unwrap();
        let mut r = rng::stream(42, "besq-euler", 0);
        let reps = 3000usize;
        let mut hits = 0usize;
        for _ in 0..reps {
            let v = euler_sqrt_sde(|_| 0.0, c, v0, t, 1e-5, &mut r);
            if v == 0.0 {
                hits += 1;
            }
        }
        let p_hat = hits as f64 / reps as f64;
        let se = (want * (1.0 - want) / reps as f64).sqrt();
        assert!(
            (p_hat - want).abs() < 3.0 * se + 0.01,
            "euler {p_hat}, exact {want}"
        );
    }

    #[test]
    fn exact_sampler_matches_euler_law() {
        let (v0, t, c) = (1.0, 0.5, 1.1);
        let mut r = rng::stream(43, "besq-ks", 0);
        let exact: Vec<f64> = (0..4000)
            .map(|_| besq0_transition(v0, t, c, &mut r).unwrap())
            .collect();
        let euler: Vec<f64> = (0..800)
            .map(|_| euler_sqrt_sde(|_| 0.0, c, v0, t, 1e-4, &mut r))
            .collect();
        let ks = stats::ks_two_sample(&exact, &euler).unwrap();
        assert!(ks.p_value > 0.01, "KS p = {}", ks.p_value);
    }

    #[test]
    fn besq_scale_consistency() {
        // V_t for dV = c√V dB equals X_{(c²/4)t} for the standard dX = 2√X dB.
        let (v0, t, c) = (2.0, 0.8, 1.7);
        let mut r = rng::stream(44, "besq-scale", 0);
        let direct: Vec<f64> = (0..5000)
            .map(|_| besq0_transition(v0, t, c, &mut r).unwrap())
            .collect();
        let scaled: Vec<f64> = (0..5000)
            .map(|_| besq0_transition(v0, c * c / 4.0 * t, 2.0, &mut r).unwrap())
            .collect();
        let ks = stats::ks_two_sample(&direct, &scaled).unwrap();
        assert!(ks.p_value > 0.01, "KS p = {}", ks.p_value);
    }

    fn lqf_spec() -> CirSpec {
        // n=2, q_ref = -1, V_ref = 4π², ρ = 1, σ = 1.
        CirSpec::from_flow(2, -1.0, 4.0 * std::f64::consts::PI.powi(2), 1.0, 1.0).unwrap()
    }

    #[test]
    fn cir_spec_flags() {
        let spec = lqf_spec();
        assert_abs_diff_eq!(spec.kappa(), 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(
            spec.theta(),
            4.0 * std::f64::consts::PI.powi(2),
            epsilon = 1e-12
        );
        assert!(spec.feller_stated);
        assert!(spec.feller_exact);
        assert!(spec.boundary_dimension() >= 2.0);
    }

    #[test]
    fn cir_mean_reversion_to_level() {
        let spec = lqf_spec();
        let mut r = rng::stream(45, "cir-level", 0);
        let xs: Vec<f64> = (0..20_000)
            .map(|_| cir_transition(&spec, 1.0, 30.0, &mut r).unwrap())
            .collect();
        let (mean, se) = stats::mean_se(&xs);
        assert!(
            (mean - spec.theta()).abs() < 3.0 * se,
            "mean {mean}, level {}",
            spec.theta()
        );
    }

    #[test]
    fn cir_transition_moments_match_closed_forms() {
        let spec = lqf_spec();
        let (v0, t) = (10.0, 0.3);
        let (want_mean, want_var) = cir_mean_var(&spec, v0, t);
        let mut r = rng::stream(46, "cir-mom", 0);
        let xs: Vec<f64> = (0..40_000)
            .map(|_| cir_transition(&spec, v0, t, &mut r).unwrap())
            .collect();
        let (mean, se) = stats::mean_se(&xs);
        assert!((mean - want_mean).abs() < 3.0 * se);
        let var = stats::variance(&xs);
        // SE of the sample variance ≈ var·sqrt(2/(n-1)) for near-Gaussian
        // tails; inflate modestly for the chi-squared skew.
        let se_var = var * (2.0 / (xs.len() as f64 - 1.0)).sqrt() * 2.0;
        assert!(
            (var - want_var).abs() < 3.0 * se_var,
            "var {var}, want {want_var}"
        );

        // Closed forms themselves validated against brute-force Euler.
        let euler: Vec<f64> = (0..2000)
            .map(|_| {
                euler_sqrt_sde(
                    |v| -spec.kappa() * (v - spec.theta()),
                    spec.s,
                    v0,
                    t,
                    1e-4,
                    &mut r,
                )
            })
            .collect();
        let (e_mean, e_se) = stats::mean_se(&euler);
        assert!(
            (e_mean - want_mean).abs() < 4.0 * e_se,
            "euler mean {e_mean} vs {want_mean}"
        );
        let ks = stats::ks_two_sample(&xs, &euler).unwrap();
        assert!(ks.p_value > 0.01, "KS p = {}", ks.p_value);
    }

    #[test]
    fn feller_regime_paths_stay_positive() {
        // σ² ≤ -2 Q_ref(1) with the exact boundary classification satisfied:
        // no zero hits over 10⁴ exact paths on a fine grid.
        let spec = lqf_spec();
        assert!(spec.feller_exact);
        let mut r = rng::stream(47, "cir-feller", 0);
        let mut min_seen = f64::MAX;
        for _ in 0..10_000 {
            let mut v = spec.theta();
            for _ in 0..50 {
                v = cir_transition(&spec, v, 0.02, &mut r).unwrap();
                min_seen = min_seen.min(v);
            }
        }
        assert!(min_seen > 0.0, "boundary hit: min {min_seen}");
    }

    #[test]
    fn cir_degenerates_to_besq() {
        // κ -> 0 with κθ -> 0 approaches the driftless square-root diffusion.
        let spec = CirSpec {
            a: -1e-10,
            b: 1e-6,
            s: 1.3,
            feller_stated: false,
            feller_exact: false,
        };
        let (v0, t) = (1.5, 0.6);
        let mut r = rng::stream(48, "cir-degen", 0);
        let cir: Vec<f64> = (0..5000)
            .map(|_| cir_transition(&spec, v0, t, &mut r).unwrap())
            .collect();
        let besq: Vec<f64> = (0..5000)
            .map(|_| besq0_transition(v0, t, spec.s, &mut r).unwrap())
            .collect();
        let ks = stats::ks_two_sample(&cir, &besq).unwrap();
        assert!(ks.p_value > 0.01, "KS p = {}", ks.p_value);
    }

    #[test]
    fn stationary_law_parameters() {
        let spec = lqf_spec();
        let law = cir_stationary(&spec).unwrap();
        // shape = 2κθ/s², scale = s²/(2κ); mean = θ.
        assert_abs_diff_eq!(law.shape, spec.boundary_dimension() / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(law.mean(), spec.theta(), epsilon = 1e-9);
        // Long-time transitions reach the stationary law.
        let mut r = rng::stream(49, "cir-stat", 0);
        let trans: Vec<f64> = (0..4000)
            .map(|_| cir_transition(&spec, 5.0, 40.0, &mut r).unwrap())
            .collect();
        let stat: Vec<f64> = (0..4000).map(|_| law.sample(&mut r)).collect();
        let ks = stats::ks_two_sample(&trans, &stat).unwrap();
        assert!(ks.p_value > 0.01, "KS p = {}", ks.p_value);
    }

    #[test]
    fn invalid_inputs_rejected() {
        let mut r = rng::stream(50, "vol-err", 0);
        assert!(besq0_transition(-1.0, 1.0, 1.0, &mut r).is_err());
        assert!(besq0_absorption_prob(1.0, 0.0, 1.0).is_err());
        let spec = lqf_spec();
        assert!(cir_transition(&spec, 1.0, 0.0, &mut r).is_err());
        assert!(cir_transition(&spec, -1.0, 1.0, &mut r).is_err());
    }
}
