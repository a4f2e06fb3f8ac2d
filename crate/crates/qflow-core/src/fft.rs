//! Minimal n-dimensional FFT on row-major `[G; n]` arrays of `Complex64`.
//!
//! rustfft provides the 1-D transforms; this module applies them along each
//! axis. Transforms are unnormalised in both directions (forward computes
//! `sum x_j e^{-2πi jk/G}`, inverse `sum c_k e^{+2πi jk/G}`), matching the
//! conventions assumed by [`crate::geometry`].

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

pub struct NdFft {
    dim: usize,
    grid: usize,
    total: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl NdFft {
    pub fn new(dim: usize, grid: usize) -> Self {
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(grid);
        let inverse = planner.plan_fft_inverse(grid);
        NdFft {
            dim,
            grid,
            total: grid.pow(dim as u32),
            forward,
            inverse,
        }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn forward(&self, data: &mut [Complex64]) {
        self.transform(data, true);
    }

    pub fn inverse(&self, data: &mut [Complex64]) {
        self.transform(data, false);
    }

    fn transform(&self, data: &mut [Complex64], fwd: bool) {
        assert_eq!(data.len(), self.total, "fft buffer size");
        let g = self.grid;
        let fft = if fwd { &self.forward } else { &self.inverse };
        let mut lane = vec![Complex64::ZERO; g];
        // Axis a has stride g^(dim-1-a) in row-major order.
        for axis in 0..self.dim {
            let stride = g.pow((self.dim - 1 - axis) as u32);
            let block = stride * g;
            for base in (0..self.total).step_by(block) {
                for offset in 0..stride {
                    let start = base + offset;
                    for (j, slot) in lane.iter_mut().enumerate() {
                        *slot = data[start + j * stride];
                    }
                    fft.process(&mut lane);
                    for (j, slot) in lane.iter().enumerate() {
                        data[start + j * stride] = *slot;
                    }
                }
            }
        }
    }
}

impl std::fmt::Debug for NdFft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NdFft")
            .field("dim", &self.dim)
            .field("grid", &self.grid)
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_inverse_roundtrip_2d() {
        let fft = NdFft::new(2, 8);
        let mut data: Vec<Complex64> = (0..64)
            .map(|i| Complex64::new((i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()))
            .collect();
        let original = data.clone();
        fft.forward(&mut data);
        fft.inverse(&mut data);
        let norm = 64.0;
        for (a, b) in data.iter().zip(&original) {
            assert!((a / norm - b).norm() < 1e-12);
        }
    }

    #[test]
    fn single_mode_lands_on_its_bin() {
        // f(x) = e^{2πi (1·x0 + 3·x1)/G} should put all forward mass at (1, 3).
        let g = 16usize;
        let fft = NdFft::new(2, g);
        let mut data = vec![Complex64::ZERO; g * g];
        for i0 in 0..g {
            for i1 in 0..g {
                let phase =
                    2.0 * std::f64::consts::PI * (i0 as f64 * 1.0 + i1 as f64 * 3.0) / g as f64;
                data[i0 * g + i1] = Complex64::new(phase.cos(), phase.sin());
            }
        }
        fft.forward(&mut data);
        for i0 in 0..g {
            for i1 in 0..g {
                let v = data[i0 * g + i1];
                if i0 == 1 && i1 == 3 {
                    assert!((v - Complex64::new((g * g) as f64, 0.0)).norm() < 1e-9);
                } else {
                    assert!(v.norm() < 1e-9, "leakage at ({i0},{i1}): {v}");
                }
            }
        }
    }
}
