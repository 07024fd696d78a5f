//! Unnormalized complex FFT on cubic `n^d` grids (x-fastest layout).

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

/// Lines gathered per batch along strided axes.
const GATHER: usize = 32;

pub struct FftNd {
    dim: usize,
    n: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    scratch: Vec<Complex64>,
    lines: Vec<Complex64>,
}

impl FftNd {
    pub fn new(dim: usize, n: usize) -> Self {
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(n);
        let inverse = planner.plan_fft_inverse(n);
        let scratch_len = forward
            .get_inplace_scratch_len()
            .max(inverse.get_inplace_scratch_len());
        FftNd {
            dim,
            n,
            forward,
            inverse,
            scratch: vec![Complex64::default(); scratch_len],
            lines: vec![Complex64::default(); GATHER * n],
        }
    }

    pub fn len(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn forward(&mut self, data: &mut [Complex64]) {
        self.transform(data, false);
    }

    /// Inverse transform without the `1/n^d` factor.
    pub fn inverse(&mut self, data: &mut [Complex64]) {
        self.transform(data, true);
    }

    fn transform(&mut self, data: &mut [Complex64], inverse: bool) {
        assert_eq!(data.len(), self.len(), "buffer does not match the grid");
        let fft = if inverse { self.inverse.clone() } else { self.forward.clone() };
        let n = self.n;
        fft.process_with_scratch(data, &mut self.scratch);
        for axis in 1..self.dim {
            let stride = n.pow(axis as u32);
            let block = stride * n;
            for base in (0..data.len()).step_by(block) {
                let mut j0 = 0;
                while j0 < stride {
                    let w = GATHER.min(stride - j0);
                    let lines = &mut self.lines[..w * n];
                    for j in 0..w {
                        for k in 0..n {
                            lines[j * n + k] = data[base + k * stride + j0 + j];
                        }
                    }
                    fft.process_with_scratch(lines, &mut self.scratch);
                    for j in 0..w {
                        for k in 0..n {
                            data[base + k * stride + j0 + j] = lines[j * n + k];
                        }
                    }
                    j0 += w;
                }
            }
        }
    }
}

/// Signed integer frequency of index `i` on an `n`-point axis, in
/// `{-⌈n/2⌉+1, …, ⌊n/2⌋}`.
#[inline]
pub fn frequency(i: usize, n: usize) -> i64 {
    if i <= n / 2 {
        i as i64
    } else {
        i as i64 - n as i64
    }
}

/// Index of the mode `-k` on an `n`-point axis.
#[inline]
pub fn mirror(i: usize, n: usize) -> usize {
    (n - i) % n
}

/// Whether index `i` is the Nyquist mode of an even-length axis.
#[inline]
pub fn is_nyquist(i: usize, n: usize) -> bool {
    n % 2 == 0 && i == n / 2
}
