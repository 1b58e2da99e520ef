//! Hand-crafted, motion-sensitive volume features.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kspace::Fft3;
use crate::volume::{percentile, Volume3D};

pub const FEATURE_VERSION: u32 = 1;

pub const FEATURE_NAMES: [&str; 20] = [
    "hf_ratio_x",
    "hf_ratio_y",
    "hf_ratio_z",
    "grad_mean",
    "grad_std",
    "entropy",
    "tenengrad",
    "roughness_x",
    "roughness_y",
    "roughness_z",
    "background_mean",
    "background_p50",
    "background_p90",
    "foreground_fraction",
    "ghost_mean",
    "ghost_rms",
    "ghost_p90",
    "line_ghost_x",
    "line_ghost_y",
    "line_ghost_z",
];

pub const N_FEATURES: usize = FEATURE_NAMES.len();

const ENTROPY_BINS: usize = 64;
/// Voxels above this fraction of the maximum count as foreground.
const FOREGROUND_LEVEL: f64 = 0.1;
/// Fraction of darkest voxels treated as background.
const BACKGROUND_FRACTION: f64 = 0.4;
/// Dilation radius (voxels, 6-connected) of the head mask before looking
/// for signal outside it.
const MASK_MARGIN: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub version: u32,
    pub values: Vec<f64>,
}

impl FeatureVector {
    pub fn validate(&self) -> Result<()> {
        if self.version != FEATURE_VERSION || self.values.len() != N_FEATURES {
            return Err(Error::arg(format!(
                "feature vector v{} with {} values, expected v{FEATURE_VERSION} with {N_FEATURES}",
                self.version,
                self.values.len()
            )));
        }
        if self.values.iter().any(|x| !x.is_finite()) {
            return Err(Error::arg("non-finite feature"));
        }
        Ok(())
    }
}

pub fn extract_features(v: &Volume3D) -> Result<FeatureVector> {
    let mut plan = Fft3::new(v.dims());
    extract_features_using(v, &mut plan)
}

/// Features of a volume normalized to `[0, 1]`, in [`FEATURE_NAMES`] order.
pub fn extract_features_using(v: &Volume3D, plan: &mut Fft3) -> Result<FeatureVector> {
    if v.data().iter().any(|x| !x.is_finite()) {
        return Err(Error::arg("volume has non-finite values"));
    }
    let mut values = Vec::with_capacity(N_FEATURES);
    values.extend(hf_ratios(v, plan));
    let (gmean, gstd, tenengrad) = gradient_stats(v);
    values.extend([gmean, gstd, entropy(v.data()), tenengrad]);
    values.extend((0..3).map(|a| 1.0 - lag1_autocorrelation(v, a)));
    values.extend(background_stats(v.data()));
    values.extend(ghost_stats(v));
    let fv = FeatureVector {
        version: FEATURE_VERSION,
        values,
    };
    fv.validate()?;
    Ok(fv)
}

/// Signed frequency index of FFT bin `k` on an axis of length `n`.
#[inline]
fn freq(k: usize, n: usize) -> usize {
    k.min(n - k)
}

/// Per axis, the share of non-DC spectral energy at `|k| > n / 4`.
fn hf_ratios(v: &Volume3D, plan: &mut Fft3) -> [f64; 3] {
    let dims = v.dims();
    if plan.dims() != dims {
        *plan = Fft3::new(dims);
    }
    let mut spec: Vec<Complex64> = v.data().iter().map(|&x| Complex64::new(x as f64, 0.0)).collect();
    plan.forward(&mut spec);
    let mut total = 0.0;
    let mut high = [0.0; 3];
    let mut idx = 0;
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let e = spec[idx].norm_sqr();
                idx += 1;
                if i == 0 && j == 0 && k == 0 {
                    continue;
                }
                total += e;
                for (a, f) in [i, j, k].into_iter().enumerate() {
                    if 4 * freq(f, dims[a]) > dims[a] {
                        high[a] += e;
                    }
                }
            }
        }
    }
    // relative to the DC term, numerically zero energy means a constant volume
    let dc = spec[0].norm_sqr();
    if total <= 1e-20 * dc.max(1.0) {
        return [0.0; 3];
    }
    high.map(|h| h / total)
}

/// Central-difference gradient magnitude mean/std and mean squared magnitude.
fn gradient_stats(v: &Volume3D) -> (f64, f64, f64) {
    let [nx, ny, nz] = v.dims();
    let d = v.data();
    let at = |i: usize, j: usize, k: usize| d[i + nx * (j + ny * k)] as f64;
    let diff = |lo: f64, hi: f64, span: usize| if span == 0 { 0.0 } else { (hi - lo) / span as f64 };
    let (mut s, mut s2, mut n) = (0.0, 0.0, 0.0);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let (i0, i1) = (i.saturating_sub(1), (i + 1).min(nx - 1));
                let (j0, j1) = (j.saturating_sub(1), (j + 1).min(ny - 1));
                let (k0, k1) = (k.saturating_sub(1), (k + 1).min(nz - 1));
                let gx = diff(at(i0, j, k), at(i1, j, k), i1 - i0);
                let gy = diff(at(i, j0, k), at(i, j1, k), j1 - j0);
                let gz = diff(at(i, j, k0), at(i, j, k1), k1 - k0);
                let g2 = gx * gx + gy * gy + gz * gz;
                s += g2.sqrt();
                s2 += g2;
                n += 1.0;
            }
        }
    }
    let mean = s / n;
    let var = (s2 / n - mean * mean).max(0.0);
    (mean, var.sqrt(), s2 / n)
}

/// Shannon entropy (nats) of a fixed 64-bin histogram over `[0, 1]`.
fn entropy(data: &[f32]) -> f64 {
    let mut hist = [0usize; ENTROPY_BINS];
    for &x in data {
        let b = ((x.clamp(0.0, 1.0) as f64 * ENTROPY_BINS as f64) as usize).min(ENTROPY_BINS - 1);
        hist[b] += 1;
    }
    let n = data.len() as f64;
    hist.iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum::<f64>()
        .max(0.0)
}

/// Lag-1 autocorrelation of the mean-removed volume along `axis`.
fn lag1_autocorrelation(v: &Volume3D, axis: usize) -> f64 {
    let dims = v.dims();
    if dims[axis] < 2 {
        return 1.0;
    }
    let d = v.data();
    let mean = d.iter().map(|&x| x as f64).sum::<f64>() / d.len() as f64;
    let stride = match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    };
    let var: f64 = d.iter().map(|&x| (x as f64 - mean).powi(2)).sum();
    if var == 0.0 {
        return 1.0;
    }
    let mut cov = 0.0;
    for (idx, &x) in d.iter().enumerate() {
        let along = (idx / stride) % dims[axis];
        if along + 1 < dims[axis] {
            cov += (x as f64 - mean) * (d[idx + stride] as f64 - mean);
        }
    }
    cov / var
}

/// Mean, median and 90th percentile of the darkest voxels, plus the share
/// of voxels above [`FOREGROUND_LEVEL`] of the maximum.
fn background_stats(data: &[f32]) -> [f64; 4] {
    let cut = percentile(data, 100.0 * BACKGROUND_FRACTION);
    let bg: Vec<f32> = data.iter().copied().filter(|&x| (x as f64) <= cut).collect();
    let mean = bg.iter().map(|&x| x as f64).sum::<f64>() / bg.len().max(1) as f64;
    let max = data.iter().copied().fold(0.0f32, f32::max) as f64;
    let fg = if max > 0.0 {
        data.iter().filter(|&&x| x as f64 > FOREGROUND_LEVEL * max).count() as f64 / data.len() as f64
    } else {
        0.0
    };
    [mean, percentile(&bg, 50.0), percentile(&bg, 90.0), fg]
}

fn dilate(mask: &[bool], dims: [usize; 3], radius: usize) -> Vec<bool> {
    let [nx, ny, nz] = dims;
    let mut cur = mask.to_vec();
    for _ in 0..radius {
        let prev = cur.clone();
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let id = i + nx * (j + ny * k);
                    if prev[id] {
                        continue;
                    }
                    cur[id] = (i > 0 && prev[id - 1])
                        || (i + 1 < nx && prev[id + 1])
                        || (j > 0 && prev[id - nx])
                        || (j + 1 < ny && prev[id + nx])
                        || (k > 0 && prev[id - nx * ny])
                        || (k + 1 < nz && prev[id + nx * ny]);
                }
            }
        }
    }
    cur
}

/// Signal outside the dilated head mask, relative to the mean foreground
/// intensity: mean, RMS and 90th percentile over all such voxels, then per
/// axis the mean over lines along that axis which cross the head. Ghosts
/// replicate the head along the phase axis, so they land on those lines.
fn ghost_stats(v: &Volume3D) -> [f64; 6] {
    let dims = v.dims();
    let d = v.data();
    let max = d.iter().copied().fold(0.0f32, f32::max) as f64;
    if max <= 0.0 {
        return [0.0; 6];
    }
    let fg: Vec<bool> = d.iter().map(|&x| x as f64 > FOREGROUND_LEVEL * max).collect();
    let (fsum, fcount) = d
        .iter()
        .zip(&fg)
        .filter(|p| *p.1)
        .fold((0.0, 0usize), |(s, n), (&x, _)| (s + x as f64, n + 1));
    let fmean = fsum / fcount as f64;
    let outside = dilate(&fg, dims, MASK_MARGIN).iter().map(|m| !m).collect::<Vec<_>>();
    let bg: Vec<f32> = d.iter().zip(&outside).filter(|p| *p.1).map(|p| *p.0).collect();
    if bg.is_empty() {
        return [0.0; 6];
    }
    let n = bg.len() as f64;
    let mean = bg.iter().map(|&x| x as f64).sum::<f64>() / n;
    let rms = (bg.iter().map(|&x| (x as f64).powi(2)).sum::<f64>() / n).sqrt();
    let mut out = [mean / fmean, rms / fmean, percentile(&bg, 90.0) / fmean, 0.0, 0.0, 0.0];
    let [nx, ny, _] = dims;
    let strides = [1, nx, nx * ny];
    for axis in 0..3 {
        let stride = strides[axis];
        let len = dims[axis];
        let (mut s, mut c) = (0.0, 0usize);
        // line starts: indices whose coordinate along `axis` is 0
        for start in (0..d.len()).filter(|&id| (id / stride) % len == 0) {
            let line = (0..len).map(|t| start + t * stride);
            if !line.clone().any(|id| fg[id]) {
                continue;
            }
            for id in line.filter(|&id| outside[id]) {
                s += d[id] as f64;
                c += 1;
            }
        }
        out[3 + axis] = if c > 0 { s / c as f64 / fmean } else { 0.0 };
    }
    out
}
