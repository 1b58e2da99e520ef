use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

/// Reusable 3D FFT over an x-fastest complex grid of fixed dims.
///
/// Holds per-axis plans plus plane-sized scratch, so one instance should be
/// kept per worker thread.
pub struct Fft3 {
    dims: [usize; 3],
    forward: [Arc<dyn Fft<f64>>; 3],
    inverse: [Arc<dyn Fft<f64>>; 3],
    scratch: Vec<Complex64>,
    plane: Vec<Complex64>,
}

impl Fft3 {
    pub fn new(dims: [usize; 3]) -> Self {
        assert!(dims.iter().all(|&d| d > 0), "fft dims must be positive");
        let mut planner = FftPlanner::new();
        let forward = dims.map(|n| planner.plan_fft_forward(n));
        let inverse = dims.map(|n| planner.plan_fft_inverse(n));
        let scratch_len = forward
            .iter()
            .chain(&inverse)
            .map(|p| p.get_inplace_scratch_len())
            .max()
            .unwrap_or(0);
        let plane_len = (dims[0] * dims[1]).max(dims[0] * dims[2]);
        Self {
            dims,
            forward,
            inverse,
            scratch: vec![Complex64::default(); scratch_len],
            plane: vec![Complex64::default(); plane_len],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    /// Unnormalized forward transform, in place.
    pub fn forward(&mut self, data: &mut [Complex64]) {
        self.run(data, false);
    }

    /// Inverse transform scaled by `1 / (nx * ny * nz)`, in place.
    pub fn inverse(&mut self, data: &mut [Complex64]) {
        self.run(data, true);
        let scale = 1.0 / data.len() as f64;
        for x in data.iter_mut() {
            *x *= scale;
        }
    }

    fn run(&mut self, data: &mut [Complex64], inverse: bool) {
        let [nx, ny, nz] = self.dims;
        assert_eq!(data.len(), nx * ny * nz, "buffer does not match fft dims");
        let plans = if inverse { &self.inverse } else { &self.forward };

        // x lines are contiguous: one batched call over the whole buffer
        plans[0].process_with_scratch(data, &mut self.scratch);

        if ny > 1 {
            let plane = &mut self.plane[..nx * ny];
            for k in 0..nz {
                let slab = &mut data[nx * ny * k..nx * ny * (k + 1)];
                // transpose to y-fastest, transform, transpose back
                for j in 0..ny {
                    for i in 0..nx {
                        plane[i * ny + j] = slab[i + nx * j];
                    }
                }
                plans[1].process_with_scratch(plane, &mut self.scratch);
                for j in 0..ny {
                    for i in 0..nx {
                        slab[i + nx * j] = plane[i * ny + j];
                    }
                }
            }
        }

        if nz > 1 {
            let plane = &mut self.plane[..nx * nz];
            for j in 0..ny {
                for k in 0..nz {
                    let row = nx * (j + ny * k);
                    for i in 0..nx {
                        plane[i * nz + k] = data[row + i];
                    }
                }
                plans[2].process_with_scratch(plane, &mut self.scratch);
                for k in 0..nz {
                    let row = nx * (j + ny * k);
                    for i in 0..nx {
                        data[row + i] = plane[i * nz + k];
                    }
                }
            }
        }
    }
}

/// One-shot forward 3D FFT (unnormalized).
pub fn fft3(data: &[Complex64], dims: [usize; 3]) -> Vec<Complex64> {
    let mut out = data.to_vec();
    Fft3::new(dims).forward(&mut out);
    out
}

/// One-shot inverse 3D FFT, scaled by `1 / (nx * ny * nz)`.
pub fn ifft3(data: &[Complex64], dims: [usize; 3]) -> Vec<Complex64> {
    let mut out = data.to_vec();
    Fft3::new(dims).inverse(&mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use std::f64::consts::PI;

    fn random_grid(dims: [usize; 3], seed: u64) -> Vec<Complex64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..dims.iter().product::<usize>())
            .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect()
    }

    /// Direct O(n^2) DFT, the independent reference.
    fn dft3(x: &[Complex64], dims: [usize; 3]) -> Vec<Complex64> {
        let [nx, ny, nz] = dims;
        let mut out = vec![Complex64::default(); x.len()];
        for w in 0..nz {
            for v in 0..ny {
                for u in 0..nx {
                    let mut acc = Complex64::default();
                    for k in 0..nz {
                        for j in 0..ny {
                            for i in 0..nx {
                                let phase = -2.0
                                    * PI
                                    * ((u * i) as f64 / nx as f64
                                        + (v * j) as f64 / ny as f64
                                        + (w * k) as f64 / nz as f64);
                                acc += x[i + nx * (j + ny * k)] * Complex64::from_polar(1.0, phase);
                            }
                        }
                    }
                    out[u + nx * (v + ny * w)] = acc;
                }
            }
        }
        out
    }

    fn max_abs_diff(a: &[Complex64], b: &[Complex64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
    }

    #[test]
    fn delta_has_flat_spectrum() {
        let dims = [4, 5, 6];
        let mut x = vec![Complex64::default(); 120];
        x[0] = Complex64::new(1.0, 0.0);
        let f = fft3(&x, dims);
        assert!(f.iter().all(|c| (c.norm() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn parseval() {
        let dims = [9, 6, 10];
        let x = random_grid(dims, 7);
        let f = fft3(&x, dims);
        let ex: f64 = x.iter().map(|c| c.norm_sqr()).sum();
        let ef: f64 = f.iter().map(|c| c.norm_sqr()).sum::<f64>() / x.len() as f64;
        assert!(((ex - ef) / ex).abs() < 1e-6);
    }

    #[test]
    fn matches_direct_dft_and_round_trips() {
        for (dims, seed) in [([5, 6, 7], 1u64), ([8, 7, 6], 2), ([1, 3, 2], 3), ([4, 1, 1], 4)] {
            let x = random_grid(dims, seed);
            let f = fft3(&x, dims);
            let reference = dft3(&x, dims);
            assert!(max_abs_diff(&f, &reference) < 1e-9, "{dims:?}");
            let back = ifft3(&f, dims);
            assert!(max_abs_diff(&back, &x) < 1e-6, "{dims:?}");
        }
    }

    #[test]
    fn reused_plan_is_consistent() {
        let dims = [6, 4, 5];
        let mut plan = Fft3::new(dims);
        let x = random_grid(dims, 9);
        let mut a = x.clone();
        plan.forward(&mut a);
        let mut b = x.clone();
        plan.forward(&mut b);
        assert_eq!(a, b);
        plan.inverse(&mut a);
        assert!(max_abs_diff(&a, &x) < 1e-12);
    }
}
