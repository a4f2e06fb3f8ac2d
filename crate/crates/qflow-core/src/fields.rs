//! Grounded co-polyharmonic Gaussian fields and mollified approximations.
//!
//! A CGF sample is a truncated field with independent coefficients
//! `ψ̂_k ~ N(0, 1/(a_n Λ_k))` on the nonzero modes and exact zero mean, so its
//! covariance is the truncated Green kernel of `p = a_n P`. Mollification
//! `ψ^j = q^j * ψ` uses the row-stochastic kernel
//! `q^j(x, y) = η(j d(x, y)) / N^j(x)`; on the torus the kernel is
//! translation invariant and both the convolution and the mollified-kernel
//! diagonal reduce to a single radial profile.

use crate::error::{QflowError, Result};
use crate::geometry::{FieldCoeffs, ModeKind, TorusGeometry};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

/// One sample of the grounded co-polyharmonic Gaussian field.
#[derive(Debug, Clone)]
pub struct CgfSample {
    pub field: FieldCoeffs,
    /// Stream identifier recorded for provenance.
    pub seed_path: String,
    /// Truncation radius used by the sampler.
    pub trunc: i32,
}

/// Draw a CGF sample: independent `N(0, 1/(a_n Λ_k))` per nonzero mode.
pub fn sample_cgf<R: Rng + ?Sized>(geom: &TorusGeometry, rng: &mut R) -> CgfSample {
    let mut field = FieldCoeffs::zeros(geom);
    sample_cgf_into(geom, rng, &mut field);
    CgfSample {
        field,
        seed_path: String::new(),
        trunc: geom.trunc(),
    }
}

/// Fill `field` with a fresh CGF draw, reusing its allocation.
pub fn sample_cgf_into<R: Rng + ?Sized>(
    geom: &TorusGeometry,
    rng: &mut R,
    field: &mut FieldCoeffs,
) {
    let a_n = geom.a_n();
    for idx in 0..geom.num_modes() {
        let c = if geom.mode_kind(idx) == ModeKind::Zero {
            0.0
        } else {
            let sd = 1.0 / (a_n * geom.p_eigenvalue(idx)).sqrt();
            let z: f64 = rng.sample(StandardNormal);
            sd * z
        };
        field.coeffs_mut()[idx] = c;
    }
    field.ground(geom);
}

/// Cameron–Martin pairing `⟨h, ψ⟩_E` of a test field with a sample.
pub fn pair_with_e(geom: &TorusGeometry, h: &FieldCoeffs, psi: &CgfSample) -> f64 {
    geom.pairing_e(h, &psi.field)
}

/// Nonincreasing compactly supported mollifier profile on `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum MollifierProfile {
    /// `η(r) = (1 - r)_+`.
    Triangular,
    /// `η(r) = (1 - r²)²_+`, a C¹ bump.
    Quartic,
}

impl MollifierProfile {
    pub fn eval(self, r: f64) -> f64 {
        match self {
            MollifierProfile::Triangular => (1.0 - r).max(0.0),
            MollifierProfile::Quartic => {
                let t = (1.0 - r * r).max(0.0);
                t * t
            }
        }
    }
}

/// The mollification family `q^j` at one scale, precomputed on the grid.
#[derive(Debug)]
pub struct MollifierFamily {
    pub profile: MollifierProfile,
    /// Scale index: the kernel support has radius `1/j`.
    pub j: f64,
    /// Normaliser `N^j = ∫ η(j d(0, y)) ω_ref(dy)` (translation invariant).
    pub normalizer: f64,
    /// Kernel values `q^j(0, x)` on the grid.
    kernel: Vec<f64>,
    /// Spectral transfer function on the full spectral grid
    /// (`F[kernel] · cell_vol`, real for the even kernel).
    transfer: Vec<Complex64>,
}

impl MollifierFamily {
    /// Build the family at scale `j`. Errors if the kernel support `1/j`
    /// does not exceed one grid cell.
    pub fn new(geom: &TorusGeometry, profile: MollifierProfile, j: f64) -> Result<Self> {
        let h = geom.period() / geom.grid() as f64;
        if !(j > 0.0) || 1.0 / j <= h {
            return Err(QflowError::MollifierTooNarrow);
        }
        let origin = vec![0.0; geom.dim()];
        let mut x = vec![0.0; geom.dim()];
        let mut kernel = vec![0.0; geom.num_cells()];
        for (cell, k) in kernel.iter_mut().enumerate() {
            geom.grid_point(cell, &mut x);
            *k = profile.eval(j * geom.distance(&origin, &x));
        }
        let normalizer = geom.quadrature(&kernel)?;
        if normalizer <= 0.0 {
            return Err(QflowError::MollifierTooNarrow);
        }
        for k in &mut kernel {
            *k /= normalizer;
        }
        let transfer = transfer_of(geom, &kernel);
        Ok(MollifierFamily {
            profile,
            j,
            normalizer,
            kernel,
            transfer,
        })
    }

    pub fn kernel(&self) -> &[f64] {
        &self.kernel
    }

    /// Quadrature of one kernel row (should be 1 up to rounding).
    pub fn row_mass(&self, geom: &TorusGeometry) -> f64 {
        geom.quadrature(&self.kernel).unwrap()
    }

    /// Transfer coefficient at truncated mode `idx` (real part; the
    /// imaginary part vanishes for the even kernel).
    pub fn transfer_at_mode(&self, geom: &TorusGeometry, idx: usize) -> f64 {
        self.transfer[spec_of(geom, idx)].re
    }
}

fn spec_of(geom: &TorusGeometry, idx: usize) -> usize {
    // Reconstruct the spectral flat index of mode idx from its frequency.
    let g = geom.grid() as i32;
    let mut flat = 0usize;
    for &k in geom.frequency(idx) {
        flat = flat * geom.grid() + k.rem_euclid(g) as usize;
    }
    flat
}

/// Forward transform of a grid kernel times the cell volume: the circular
/// convolution `(kernel * v)(x) = ∫ kernel(x - y) v(y) ω_ref(dy)` becomes a
/// pointwise product with this table in spectral space.
fn transfer_of(geom: &TorusGeometry, kernel: &[f64]) -> Vec<Complex64> {
    let fft = geom.fft();
    let mut buf: Vec<Complex64> = kernel.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft.forward(&mut buf);
    let cv = geom.cell_volume();
    for c in &mut buf {
        *c *= cv;
    }
    buf
}

/// Circular convolution of grid values with the mollifier kernel.
pub fn convolve(geom: &TorusGeometry, fam: &MollifierFamily, values: &[f64]) -> Result<Vec<f64>> {
    if values.len() != geom.num_cells() {
        return Err(QflowError::SizeMismatch(format!(
            "convolve expects {} grid values, got {}",
            geom.num_cells(),
            values.len()
        )));
    }
    let fft = geom.fft();
    let mut buf: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft.forward(&mut buf);
    for (c, t) in buf.iter_mut().zip(&fam.transfer) {
        *c *= t;
    }
    fft.inverse(&mut buf);
    let scale = 1.0 / geom.num_cells() as f64;
    Ok(buf.into_iter().map(|c| c.re * scale).collect())
}

/// Mollified field `ψ^j = q^j * ψ` on the grid.
pub fn mollified_field(
    geom: &TorusGeometry,
    fam: &MollifierFamily,
    psi: &CgfSample,
) -> Result<Vec<f64>> {
    let grid = geom.coeffs_to_grid(&psi.field);
    convolve(geom, fam, &grid)
}

/// Diagonal of the mollified Green kernel,
/// `k^j(x, x) = Σ_{k≠0} t_k² e_k(x)² / (a_n Λ_k)`, constant in `x` by
/// translation invariance. Returned as grid values.
pub fn mollified_kernel_diag(geom: &TorusGeometry, fam: &MollifierFamily) -> Vec<f64> {
    let mut s = 0.0;
    for idx in 0..geom.num_modes() {
        if geom.mode_kind(idx) == ModeKind::Zero {
            continue;
        }
        let t = fam.transfer_at_mode(geom, idx);
        s += t * t / (geom.volume() * geom.a_n() * geom.p_eigenvalue(idx));
    }
    vec![s; geom.num_cells()]
}

/// Mollified Green kernel value `k^j(x, y)` at separation `z = x - y`
/// (direct spectral sum; used as an off-diagonal convergence diagnostic).
pub fn mollified_kernel_profile(geom: &TorusGeometry, fam: &MollifierFamily, z: &[f64]) -> f64 {
    let two_pi_over_l = 2.0 * std::f64::consts::PI / geom.period();
    let mut s = 0.0;
    for idx in 0..geom.num_modes() {
        if geom.mode_kind(idx) == ModeKind::Zero {
            continue;
        }
        let mut phase = 0.0;
        for (a, &k) in geom.frequency(idx).iter().enumerate() {
            phase += two_pi_over_l * k as f64 * z[a];
        }
        let t = fam.transfer_at_mode(geom, idx);
        s += t * t * phase.cos() / (geom.volume() * geom.a_n() * geom.p_eigenvalue(idx));
    }
    s
}
