//! Flat-torus reference geometry and the spectral calculus on it.
//!
//! The reference manifold is `T^n = (R / L Z)^n` with `n` even, carrying the
//! flat metric, volume `L^n`, and a uniform `G^n` quadrature grid. Fields are
//! truncated real Fourier series indexed by integer frequency vectors `k`
//! with `|k|_∞ <= N`. The real basis is orthonormal in `L^2(ω_ref)`:
//!
//! * `e_0(x) = L^{-n/2}`,
//! * `e_k(x) = sqrt(2) L^{-n/2} cos(2π k·x / L)` for lexicographically
//!   positive `k`,
//! * `e_k(x) = sqrt(2) L^{-n/2} sin(2π (-k)·x / L)` for lexicographically
//!   negative `k`.
//!
//! On this basis the Laplacian has eigenvalues `λ_k = |2πk/L|²`, the
//! co-polyharmonic operator `P = (-Δ)^{n/2}` has `Λ_k = λ_k^{n/2}`, and the
//! normalised operator is `p = a_n P` with
//! `a_n = 2 / ((n/2-1)! (4π)^{n/2})`. The grounded Green operator inverts `p`
//! on mean-zero fields.

use crate::error::{QflowError, Result};
use crate::fft::NdFft;
use num_complex::Complex64;

/// Basis classification of one truncated mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModeKind {
    /// The constant mode `k = 0`.
    Zero,
    /// Lexicographically positive `k`: cosine basis function.
    Cos,
    /// Lexicographically negative `k`: sine basis function at frequency `-k`.
    Sin,
}

/// Which diagonal spectral operator to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Operator {
    Laplacian,
    /// Co-polyharmonic operator `P = (-Δ)^{n/2}`.
    P,
    /// Normalised co-polyharmonic operator `p = a_n P`.
    PNorm,
    /// Grounded inverse of `p` (the Green operator).
    Green,
}

/// Normalising constant `a_n = 2 / ((n/2 - 1)! (4π)^{n/2})`.
pub fn a_n(dim: usize) -> f64 {
    assert!(dim >= 2 && dim % 2 == 0, "dimension must be even and >= 2");
    let mut fact = 1.0;
    for m in 2..=(dim / 2 - 1) {
        fact *= m as f64;
    }
    2.0 / (fact * (4.0 * std::f64::consts::PI).powi(dim as i32 / 2))
}

/// The discretised flat torus with its spectral tables.
///
/// Immutable after construction; cheap to share behind a reference.
#[derive(Debug)]
pub struct TorusGeometry {
    dim: usize,
    period: f64,
    grid: usize,
    trunc: i32,
    q_ref_const: f64,
    a_n: f64,
    vol: f64,
    cell_vol: f64,
    num_cells: usize,
    num_modes: usize,
    /// Flat frequency table, stride `dim`.
    freqs: Vec<i32>,
    lambda: Vec<f64>,
    p_eig: Vec<f64>,
    kind: Vec<ModeKind>,
    partner: Vec<u32>,
    spec_index: Vec<u32>,
    zero_index: usize,
    fft: NdFft,
    /// `sqrt(2) / L^{n/2}`, amplitude of the paired basis functions.
    amp: f64,
    /// `1 / L^{n/2}`, amplitude of the constant basis function.
    e0: f64,
}

impl TorusGeometry {
    /// Build the geometry. `grid` must be a power of two with
    /// `trunc <= grid/2 - 1`; `dim` must be even.
    pub fn new(dim: usize, period: f64, grid: usize, trunc: u32, q_ref_const: f64) -> Result<Self> {
        if dim < 2 || dim % 2 != 0 {
            return Err(QflowError::InvalidGeometry(format!(
                "dimension must be even and >= 2, got {dim}"
            )));
        }
        if !(period.is_finite() && period > 0.0) {
            return Err(QflowError::InvalidGeometry(format!(
                "period must be positive, got {period}"
            )));
        }
        if !grid.is_power_of_two() || grid < 4 {
            return Err(QflowError::InvalidGeometry(format!(
                "grid must be a power of two >= 4, got {grid}"
            )));
        }
        if trunc as usize > grid / 2 - 1 {
            return Err(QflowError::InvalidGeometry(format!(
                "truncation {trunc} exceeds grid/2 - 1 = {}",
                grid / 2 - 1
            )));
        }
        let num_cells = (grid as u64)
            .checked_pow(dim as u32)
            .ok_or_else(|| QflowError::InvalidGeometry("grid^dim overflows".into()))?;
        if num_cells > (1 << 26) {
            return Err(QflowError::InvalidGeometry(format!(
                "grid^dim = {num_cells} too large"
            )));
        }
        let num_cells = num_cells as usize;

        let width = 2 * trunc as usize + 1;
        let num_modes = width.pow(dim as u32);
        let n_i = trunc as i32;

        let mut freqs = vec![0i32; num_modes * dim];
        let mut lambda = vec![0.0; num_modes];
        let mut p_eig = vec![0.0; num_modes];
        let mut kind = vec![ModeKind::Zero; num_modes];
        let mut partner = vec![0u32; num_modes];
        let mut spec_index = vec![0u32; num_modes];

        let two_pi_over_l = 2.0 * std::f64::consts::PI / period;
        let mut digits = vec![0usize; dim];
        for idx in 0..num_modes {
            // Odometer decode: axis 0 most significant.
            let mut rem = idx;
            for a in (0..dim).rev() {
                digits[a] = rem % width;
                rem /= width;
            }
            let mut lam = 0.0;
            let mut flat_spec = 0usize;
            let mut partner_idx = 0usize;
            let mut lex = 0i32;
            for a in 0..dim {
                let k = digits[a] as i32 - n_i;
                freqs[idx * dim + a] = k;
                let x = two_pi_over_l * k as f64;
                lam += x * x;
                flat_spec = flat_spec * grid + (k.rem_euclid(grid as i32) as usize);
                partner_idx = partner_idx * width + (width - 1 - digits[a]);
                if lex == 0 {
                    lex = k.signum();
                }
            }
            lambda[idx] = lam;
            p_eig[idx] = lam.powi(dim as i32 / 2);
            kind[idx] = match lex {
                0 => ModeKind::Zero,
                1 => ModeKind::Cos,
                _ => ModeKind::Sin,
            };
            partner[idx] = partner_idx as u32;
            spec_index[idx] = flat_spec as u32;
        }

        let vol = period.powi(dim as i32);
        let zero_index = (num_modes - 1) / 2;
        debug_assert_eq!(kind[zero_index], ModeKind::Zero);

        Ok(TorusGeometry {
            dim,
            period,
            grid,
            trunc: n_i,
            q_ref_const,
            a_n: a_n(dim),
            vol,
            cell_vol: (period / grid as f64).powi(dim as i32),
            num_cells,
            num_modes,
            freqs,
            lambda,
            p_eig,
            kind,
            partner,
            spec_index,
            zero_index,
            fft: NdFft::new(dim, grid),
            amp: std::f64::consts::SQRT_2 / vol.sqrt(),
            e0: 1.0 / vol.sqrt(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn period(&self) -> f64 {
        self.period
    }
    pub fn grid(&self) -> usize {
        self.grid
    }
    pub fn trunc(&self) -> i32 {
        self.trunc
    }
    pub fn q_ref_const(&self) -> f64 {
        self.q_ref_const
    }
    /// Total conformal invariant `Q_ref(1) = q_ref_const · L^n`.
    pub fn q_ref_total(&self) -> f64 {
        self.q_ref_const * self.vol
    }
    pub fn a_n(&self) -> f64 {
        self.a_n
    }
    pub fn volume(&self) -> f64 {
        self.vol
    }
    pub fn cell_volume(&self) -> f64 {
        self.cell_vol
    }
    pub fn num_cells(&self) -> usize {
        self.num_cells
    }
    pub fn num_modes(&self) -> usize {
        self.num_modes
    }
    pub fn zero_mode_index(&self) -> usize {
        self.zero_index
    }
    pub fn mode_kind(&self, idx: usize) -> ModeKind {
        self.kind[idx]
    }
    pub fn lambda(&self, idx: usize) -> f64 {
        self.lambda[idx]
    }
    /// Eigenvalue of `P` at mode `idx`.
    pub fn p_eigenvalue(&self, idx: usize) -> f64 {
        self.p_eig[idx]
    }

    pub fn frequency(&self, idx: usize) -> &[i32] {
        &self.freqs[idx * self.dim..(idx + 1) * self.dim]
    }

    /// Shared FFT plans for this geometry's grid.
    pub fn fft(&self) -> &NdFft {
        &self.fft
    }

    /// Mode index for a frequency vector, if within truncation.
    pub fn mode_index(&self, freq: &[i32]) -> Option<usize> {
        if freq.len() != self.dim {
            return None;
        }
        let width = 2 * self.trunc as usize + 1;
        let mut idx = 0usize;
        for &k in freq {
            if k.abs() > self.trunc {
                return None;
            }
            idx = idx * width + (k + self.trunc) as usize;
        }
        Some(idx)
    }

    /// Coordinates of grid point `cell` (row-major flat index).
    pub fn grid_point(&self, cell: usize, out: &mut [f64]) {
        let mut rem = cell;
        let h = self.period / self.grid as f64;
        for a in (0..self.dim).rev() {
            out[a] = (rem % self.grid) as f64 * h;
            rem /= self.grid;
        }
    }

    /// Flat periodic distance between two points.
    pub fn distance(&self, x: &[f64], y: &[f64]) -> f64 {
        let mut d2 = 0.0;
        for a in 0..self.dim {
            let mut d = (x[a] - y[a]).abs() % self.period;
            if d > self.period / 2.0 {
                d = self.period - d;
            }
            d2 += d * d;
        }
        d2.sqrt()
    }

    /// Value of the orthonormal basis function `e_k` at `x`.
    pub fn basis_value(&self, idx: usize, x: &[f64]) -> f64 {
        let two_pi_over_l = 2.0 * std::f64::consts::PI / self.period;
        match self.kind[idx] {
            ModeKind::Zero => self.e0,
            ModeKind::Cos => {
                let mut phase = 0.0;
                for (a, &k) in self.frequency(idx).iter().enumerate() {
                    phase += two_pi_over_l * k as f64 * x[a];
                }
                self.amp * phase.cos()
            }
            ModeKind::Sin => {
                let mut phase = 0.0;
                for (a, &k) in self.frequency(idx).iter().enumerate() {
                    phase -= two_pi_over_l * k as f64 * x[a];
                }
                self.amp * phase.sin()
            }
        }
    }

    /// Pointwise variance of the truncated grounded Gaussian field,
    /// `Var ψ_N(x) = Σ_{k≠0} e_k(x)² / (a_n Λ_k) = Σ_{k≠0} L^{-n} / (a_n Λ_k)`
    /// (translation invariant).
    pub fn truncated_field_variance(&self) -> f64 {
        let mut s = 0.0;
        for idx in 0..self.num_modes {
            if self.kind[idx] != ModeKind::Zero {
                s += 1.0 / (self.vol * self.a_n * self.p_eig[idx]);
            }
        }
        s
    }

    /// Partial spectral sum of the Green kernel at separation `z`:
    /// `k_N(x, x+z) = Σ_{k≠0} cos(2π k·z/L) / (L^n a_n Λ_k)`.
    pub fn green_kernel_profile(&self, z: &[f64]) -> f64 {
        let two_pi_over_l = 2.0 * std::f64::consts::PI / self.period;
        let mut s = 0.0;
        for idx in 0..self.num_modes {
            if self.kind[idx] == ModeKind::Zero {
                continue;
            }
            let mut phase = 0.0;
            for (a, &k) in self.frequency(idx).iter().enumerate() {
                phase += two_pi_over_l * k as f64 * z[a];
            }
            // cos² + sin² pairing collapses each ±k pair to cos(k·z);
            // summing over ordered modes halves the amplitude.
            s += 0.5 * self.amp * self.amp * phase.cos() / (self.a_n * self.p_eig[idx]);
        }
        s
    }

    /// Uniform-weight quadrature `(L/G)^n Σ_i v_i ≈ ∫ v dω_ref`.
    pub fn quadrature(&self, values: &[f64]) -> Result<f64> {
        if values.len() != self.num_cells {
            return Err(QflowError::SizeMismatch(format!(
                "quadrature expects {} grid values, got {}",
                self.num_cells,
                values.len()
            )));
        }
        Ok(self.cell_vol * values.iter().sum::<f64>())
    }

    /// Synthesis: truncated coefficients to grid values.
    pub fn coeffs_to_grid(&self, u: &FieldCoeffs) -> Vec<f64> {
        let mut buf = vec![Complex64::ZERO; self.num_cells];
        self.coeffs_to_spectral(u, &mut buf);
        self.fft.inverse(&mut buf);
        buf.into_iter().map(|c| c.re).collect()
    }

    fn coeffs_to_spectral(&self, u: &FieldCoeffs, buf: &mut [Complex64]) {
        assert_eq!(u.data.len(), self.num_modes, "coefficient count");
        buf.fill(Complex64::ZERO);
        buf[0] = Complex64::new(self.e0 * u.data[self.zero_index], 0.0);
        let half_amp = 0.5 * self.amp;
        for idx in 0..self.num_modes {
            if self.kind[idx] != ModeKind::Cos {
                continue;
            }
            let a = u.data[idx];
            let b = u.data[self.partner[idx] as usize];
            if a == 0.0 && b == 0.0 {
                continue;
            }
            let c = Complex64::new(half_amp * a, -half_amp * b);
            buf[self.spec_index[idx] as usize] = c;
            buf[self.spec_index[self.partner[idx] as usize] as usize] = c.conj();
        }
    }

    /// Analysis: grid values to truncated coefficients (projection).
    pub fn grid_to_coeffs(&self, values: &[f64]) -> Result<FieldCoeffs> {
        if values.len() != self.num_cells {
            return Err(QflowError::SizeMismatch(format!(
                "grid_to_coeffs expects {} grid values, got {}",
                self.num_cells,
                values.len()
            )));
        }
        let mut buf: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.fft.forward(&mut buf);
        let scale = 1.0 / self.num_cells as f64;
        let mut data = vec![0.0; self.num_modes];
        data[self.zero_index] = buf[0].re * scale / self.e0;
        for idx in 0..self.num_modes {
            if self.kind[idx] != ModeKind::Cos {
                continue;
            }
            let pidx = self.partner[idx] as usize;
            let c_plus = buf[self.spec_index[idx] as usize] * scale;
            let c_minus = buf[self.spec_index[pidx] as usize] * scale;
            data[idx] = (c_plus + c_minus).re / self.amp;
            data[pidx] = (c_minus - c_plus).im / self.amp;
        }
        let grounded = data[self.zero_index] == 0.0;
        Ok(FieldCoeffs { data, grounded })
    }

    /// Diagonal spectral application of the named operator.
    pub fn apply_operator(&self, which: Operator, u: &FieldCoeffs) -> Result<FieldCoeffs> {
        if u.data.len() != self.num_modes {
            return Err(QflowError::SizeMismatch(format!(
                "apply_operator expects {} coefficients, got {}",
                self.num_modes,
                u.data.len()
            )));
        }
        if which == Operator::Green && !u.grounded {
            return Err(QflowError::GreenOnConstants);
        }
        let mut data = vec![0.0; self.num_modes];
        for idx in 0..self.num_modes {
            if self.kind[idx] == ModeKind::Zero {
                continue; // constants annihilated; Green leaves grounded zero
            }
            data[idx] = match which {
                Operator::Laplacian => self.lambda[idx] * u.data[idx],
                Operator::P => self.p_eig[idx] * u.data[idx],
                Operator::PNorm => self.a_n * self.p_eig[idx] * u.data[idx],
                Operator::Green => u.data[idx] / (self.a_n * self.p_eig[idx]),
            };
        }
        Ok(FieldCoeffs {
            data,
            grounded: true,
        })
    }

    /// Co-polyharmonic Sobolev norm
    /// `‖u‖ = (Σ_k (1 + a_n Λ_k)^{2s/n} |û_k|²)^{1/2}`.
    pub fn sobolev_norm(&self, u: &FieldCoeffs, s: f64) -> f64 {
        let expo = 2.0 * s / self.dim as f64;
        let mut acc = 0.0;
        for idx in 0..self.num_modes {
            let w = (1.0 + self.a_n * self.p_eig[idx]).powf(expo);
            acc += w * u.data[idx] * u.data[idx];
        }
        acc.sqrt()
    }

    /// Cameron–Martin pairing `⟨h, u⟩_E = Σ_{k≠0} a_n Λ_k ĥ_k û_k`
    /// (constants pair to zero).
    pub fn pairing_e(&self, h: &FieldCoeffs, u: &FieldCoeffs) -> f64 {
        let mut acc = 0.0;
        for idx in 0..self.num_modes {
            if self.kind[idx] != ModeKind::Zero {
                acc += self.a_n * self.p_eig[idx] * h.data[idx] * u.data[idx];
            }
        }
        acc
    }

    /// `L²(ω_ref)` inner product of two truncated fields (exact).
    pub fn l2_inner(&self, u: &FieldCoeffs, v: &FieldCoeffs) -> f64 {
        u.data.iter().zip(&v.data).map(|(a, b)| a * b).sum()
    }
}

/// A truncated real field given by coefficients on the orthonormal basis.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldCoeffs {
    data: Vec<f64>,
    grounded: bool,
}

impl FieldCoeffs {
    pub fn zeros(geom: &TorusGeometry) -> Self {
        FieldCoeffs {
            data: vec![0.0; geom.num_modes()],
            grounded: true,
        }
    }

    /// Constant field of value `c` (coefficient `c · L^{n/2}` on `e_0`).
    pub fn constant(geom: &TorusGeometry, c: f64) -> Self {
        let mut f = Self::zeros(geom);
        f.data[geom.zero_mode_index()] = c * geom.volume().sqrt();
        f.grounded = c == 0.0;
        f
    }

    /// Field from raw coefficients.
    pub fn from_coeffs(geom: &TorusGeometry, data: Vec<f64>) -> Result<Self> {
        if data.len() != geom.num_modes() {
            return Err(QflowError::SizeMismatch(format!(
                "expected {} coefficients, got {}",
                geom.num_modes(),
                data.len()
            )));
        }
        let grounded = data[geom.zero_mode_index()] == 0.0;
        Ok(FieldCoeffs { data, grounded })
    }

    /// Single basis mode `coeff · e_k`; `None` if `k` is out of truncation.
    pub fn single_mode(geom: &TorusGeometry, freq: &[i32], coeff: f64) -> Option<Self> {
        let idx = geom.mode_index(freq)?;
        let mut f = Self::zeros(geom);
        f.data[idx] = coeff;
        f.grounded = idx != geom.zero_mode_index() || coeff == 0.0;
        Some(f)
    }

    /// Plain cosine wave `cos(2π k·x / L)` (unit amplitude in field values).
    pub fn cosine_wave(geom: &TorusGeometry, freq: &[i32]) -> Option<Self> {
        // cos = e_k / amp for lex-positive k.
        let idx = geom.mode_index(freq)?;
        let coeff = match geom.mode_kind(idx) {
            ModeKind::Zero => geom.volume().sqrt(),
            _ => geom.volume().sqrt() / std::f64::consts::SQRT_2,
        };
        let mut f = Self::zeros(geom);
        f.data[idx] = coeff;
        f.grounded = geom.mode_kind(idx) != ModeKind::Zero;
        Some(f)
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.data
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_grounded(&self) -> bool {
        self.grounded
    }

    pub fn coeff(&self, idx: usize) -> f64 {
        self.data[idx]
    }

    pub fn set_coeff(&mut self, geom: &TorusGeometry, idx: usize, value: f64) {
        self.data[idx] = value;
        if idx == geom.zero_mode_index() {
            self.grounded = value == 0.0;
        }
    }

    /// Zero the constant mode, making the field grounded.
    pub fn ground(&mut self, geom: &TorusGeometry) {
        self.data[geom.zero_mode_index()] = 0.0;
        self.grounded = true;
    }

    /// Mean value of the field, `ω_ref(u) / ω_ref(1)`.
    pub fn mean(&self, geom: &TorusGeometry) -> f64 {
        self.data[geom.zero_mode_index()] / geom.volume().sqrt()
    }

    /// `u + t v`, elementwise on coefficients.
    pub fn add_scaled(&self, geom: &TorusGeometry, v: &FieldCoeffs, t: f64) -> FieldCoeffs {
        let data: Vec<f64> = self
            .data
            .iter()
            .zip(&v.data)
            .map(|(a, b)| a + t * b)
            .collect();
        let grounded = data[geom.zero_mode_index()] == 0.0;
        FieldCoeffs { data, grounded }
    }

    pub fn scale(&mut self, t: f64) {
        for x in &mut self.data {
            *x *= t;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;
    use std::f64::consts::PI;

    fn t2(grid: usize, trunc: u32) -> TorusGeometry {
        TorusGeometry::new(2, 2.0 * PI, grid, trunc, 0.0).unwrap()
    }

    fn random_field(geom: &TorusGeometry, rng: &mut ChaCha12Rng, grounded: bool) -> FieldCoeffs {
        let mut data = vec![0.0; geom.num_modes()];
        for x in data.iter_mut() {
            *x = rng.random::<f64>() * 2.0 - 1.0;
        }
        if grounded {
            data[geom.zero_mode_index()] = 0.0;
        }
        FieldCoeffs::from_coeffs(geom, data).unwrap()
    }

    #[test]
    fn normalizing_constant_exact_values() {
        // a_2 = 1/(2π), a_4 = 1/(8π²), by exact evaluation of the formula.
        assert_abs_diff_eq!(a_n(2), 1.0 / (2.0 * PI), epsilon = 1e-15);
        assert_abs_diff_eq!(a_n(4), 1.0 / (8.0 * PI * PI), epsilon = 1e-15);
        assert_abs_diff_eq!(a_n(2), 0.1591549, epsilon = 1e-7);
        assert_abs_diff_eq!(a_n(4), 0.0126651, epsilon = 1e-7);
    }

    #[test]
    fn p_annihilates_constants() {
        let geom = t2(16, 4);
        let one = FieldCoeffs::constant(&geom, 1.0);
        let pu = geom.apply_operator(Operator::P, &one).unwrap();
        assert!(pu.coeffs().iter().all(|&c| c == 0.0));
    }

    #[test]
    fn single_mode_eigenfunction_n2() {
        // n=2, L=2π, u = cos(x₁): P u = u.
        let geom = t2(16, 4);
        let u = FieldCoeffs::cosine_wave(&geom, &[1, 0]).unwrap();
        let pu = geom.apply_operator(Operator::P, &u).unwrap();
        for idx in 0..geom.num_modes() {
            assert_abs_diff_eq!(pu.coeff(idx), u.coeff(idx), epsilon = 1e-14);
        }
    }

    #[test]
    fn single_mode_eigenfunction_n4() {
        // n=4, L=2π, u = cos(2x₁): λ = 4, Λ = λ^{n/2} = 16, so P u = 16 u.
        let geom = TorusGeometry::new(4, 2.0 * PI, 8, 3, 0.0).unwrap();
        let u = FieldCoeffs::cosine_wave(&geom, &[2, 0, 0, 0]).unwrap();
        let lam: f64 = 4.0;
        let expected = lam.powi(2);
        let pu = geom.apply_operator(Operator::P, &u).unwrap();
        let idx = geom.mode_index(&[2, 0, 0, 0]).unwrap();
        assert_abs_diff_eq!(pu.coeff(idx), expected * u.coeff(idx), epsilon = 1e-12);
        assert_abs_diff_eq!(expected, 16.0, epsilon = 0.0);
    }

    #[test]
    fn green_requires_grounded() {
        let geom = t2(16, 4);
        let one = FieldCoeffs::constant(&geom, 1.0);
        match geom.apply_operator(Operator::Green, &one) {
            Err(QflowError::GreenOnConstants) => {}
            other => panic!("expected GreenOnConstants, got {other:?}"),
        }
    }

    #[test]
    fn green_inverts_p_norm_on_grounded_fields() {
        let geom = t2(32, 10);
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let u = random_field(&geom, &mut rng, true);
        let pu = geom.apply_operator(Operator::PNorm, &u).unwrap();
        let back = geom.apply_operator(Operator::Green, &pu).unwrap();
        for idx in 0..geom.num_modes() {
            assert!((back.coeff(idx) - u.coeff(idx)).abs() < 1e-12, "mode {idx}");
        }
    }

    #[test]
    fn sobolev_norm_examples() {
        let geom = t2(32, 8);
        // s = 0 is the plain L² norm.
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let u = random_field(&geom, &mut rng, false);
        let l2: f64 = u.coeffs().iter().map(|c| c * c).sum::<f64>().sqrt();
        assert_abs_diff_eq!(geom.sobolev_norm(&u, 0.0), l2, epsilon = 1e-12);

        // Constant c on T², L = 2π: ‖c‖ = |c| √vol = |c| · 2π for any s.
        let c = FieldCoeffs::constant(&geom, -1.7);
        for s in [0.0, 1.0, 2.0, 7.5] {
            assert_abs_diff_eq!(geom.sobolev_norm(&c, s), 1.7 * 2.0 * PI, epsilon = 1e-12);
        }

        // u = cos(x₁), s = n = 2: (1 + a_2)·‖cos‖_{L²}, ‖cos‖ = √(2π²).
        let u = FieldCoeffs::cosine_wave(&geom, &[1, 0]).unwrap();
        let l2_cos = (2.0 * PI * PI).sqrt();
        assert_abs_diff_eq!(
            geom.sobolev_norm(&u, 2.0),
            (1.0 + a_n(2)) * l2_cos,
            epsilon = 1e-12
        );
    }

    #[test]
    fn pairing_examples() {
        let geom = t2(32, 8);
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let u = random_field(&geom, &mut rng, false);
        let one = FieldCoeffs::constant(&geom, 1.0);
        assert_eq!(geom.pairing_e(&one, &u), 0.0);

        // ⟨h,h⟩_E >= 0, equality iff constant.
        let h = random_field(&geom, &mut rng, true);
        assert!(geom.pairing_e(&h, &h) > 0.0);
        let c = FieldCoeffs::constant(&geom, 3.0);
        assert_eq!(geom.pairing_e(&c, &c), 0.0);

        // n=2, L=2π, h = u = cos(x₁): a_2 · ‖cos‖² = (1/2π)·2π² = π.
        let h = FieldCoeffs::cosine_wave(&geom, &[1, 0]).unwrap();
        assert_abs_diff_eq!(geom.pairing_e(&h, &h), PI, epsilon = 1e-12);
    }

    #[test]
    fn quadrature_examples() {
        let geom = t2(32, 8);
        let ones = vec![1.0; geom.num_cells()];
        assert_abs_diff_eq!(
            geom.quadrature(&ones).unwrap(),
            geom.volume(),
            epsilon = 1e-10
        );

        let u = FieldCoeffs::cosine_wave(&geom, &[1, 0]).unwrap();
        let grid = geom.coeffs_to_grid(&u);
        assert!(geom.quadrature(&grid).unwrap().abs() < 1e-12);

        assert!(matches!(
            geom.quadrature(&[1.0, 2.0]),
            Err(QflowError::SizeMismatch(_))
        ));
    }

    #[test]
    fn transform_roundtrip_identity() {
        let geom = t2(32, 10);
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let u = random_field(&geom, &mut rng, false);
        let grid = geom.coeffs_to_grid(&u);
        let back = geom.grid_to_coeffs(&grid).unwrap();
        let max_err = u
            .coeffs()
            .iter()
            .zip(back.coeffs())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_err < 1e-12, "roundtrip error {max_err}");
    }

    #[test]
    fn grid_values_match_basis_evaluation() {
        let geom = t2(16, 3);
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let u = random_field(&geom, &mut rng, false);
        let grid = geom.coeffs_to_grid(&u);
        let mut x = vec![0.0; 2];
        for cell in [0usize, 5, 17, 100, 255] {
            geom.grid_point(cell, &mut x);
            let direct: f64 = (0..geom.num_modes())
                .map(|i| u.coeff(i) * geom.basis_value(i, &x))
                .sum();
            assert_abs_diff_eq!(grid[cell], direct, epsilon = 1e-10);
        }
    }

    #[test]
    fn p_self_adjoint_under_quadrature() {
        let geom = t2(32, 7);
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..5 {
            let u = random_field(&geom, &mut rng, false);
            let v = random_field(&geom, &mut rng, false);
            let pu = geom.apply_operator(Operator::P, &u).unwrap();
            let pv = geom.apply_operator(Operator::P, &v).unwrap();
            let ug = geom.coeffs_to_grid(&u);
            let vg = geom.coeffs_to_grid(&v);
            let pug = geom.coeffs_to_grid(&pu);
            let pvg = geom.coeffs_to_grid(&pv);
            let a = geom
                .quadrature(&ug.iter().zip(&pvg).map(|(x, y)| x * y).collect::<Vec<_>>())
                .unwrap();
            let b = geom
                .quadrature(&vg.iter().zip(&pug).map(|(x, y)| x * y).collect::<Vec<_>>())
                .unwrap();
            let nu = geom.sobolev_norm(&u, 0.0);
            let nv = geom.sobolev_norm(&v, 0.0);
            assert!((a - b).abs() < 1e-10 * nu * nv, "asymmetry {}", a - b);
        }
    }

    #[test]
    fn truncated_variance_small_case() {
        // n=2, L=2π, N=1: eight nonzero modes, Var = (1/2π)(4·1 + 4·(1/2)) = 3/π,
        // cross-checked against brute-force Σ e_k(x)²/(a_n Λ_k) at several x.
        let geom = t2(8, 1);
        let var = geom.truncated_field_variance();
        assert_abs_diff_eq!(var, 3.0 / PI, epsilon = 1e-12);
        let mut x = vec![0.0; 2];
        for cell in [0usize, 3, 9, 30] {
            geom.grid_point(cell, &mut x);
            let brute: f64 = (0..geom.num_modes())
                .filter(|&i| geom.mode_kind(i) != ModeKind::Zero)
                .map(|i| {
                    let e = geom.basis_value(i, &x);
                    e * e / (geom.a_n() * geom.p_eigenvalue(i))
                })
                .sum();
            assert_abs_diff_eq!(var, brute, epsilon = 1e-12);
        }
    }

    #[test]
    fn green_kernel_log_correlation_n2() {
        // |k_N(z) - log(1/|z|)| stays uniformly bounded on d in [10L/G, L/4]
        // and does not grow with N.
        let l = 2.0 * PI;
        let sup = |trunc: u32| -> f64 {
            let geom = t2(64, trunc);
            let mut worst: f64 = 0.0;
            for i in 0..40 {
                let d = 10.0 * l / 64.0 + (l / 4.0 - 10.0 * l / 64.0) * i as f64 / 39.0;
                let z = [d / std::f64::consts::SQRT_2, d / std::f64::consts::SQRT_2];
                let k = geom.green_kernel_profile(&z);
                worst = worst.max((k - (1.0 / d).ln()).abs());
            }
            worst
        };
        let s8 = sup(8);
        let s16 = sup(16);
        let s24 = sup(24);
        assert!(s16 < 2.0, "sup at N=16 is {s16}");
        assert!(s24 < 2.0, "sup at N=24 is {s24}");
        assert!(s24 <= s8 + 0.5, "bound grows with N: {s8} -> {s24}");
    }

    #[test]
    fn green_kernel_log_correlation_n4() {
        // The profile is a direct spectral sum, so a large G only sets the
        // d-range here; no G^n buffers are materialised.
        let l = 2.0 * PI;
        let geom = TorusGeometry::new(4, l, 64, 6, 0.0).unwrap();
        let mut worst: f64 = 0.0;
        for i in 0..20 {
            let lo = 10.0 * l / 64.0;
            let d = lo + (l / 4.0 - lo) * i as f64 / 19.0;
            let c = d / 2.0;
            let z = [c, c, c, c];
            let k = geom.green_kernel_profile(&z);
            worst = worst.max((k - (1.0 / d).ln()).abs());
        }
        assert!(worst < 2.0, "sup at n=4 is {worst}");
    }
}
