//! Synthetic rigid-motion corruption in k-space.
//!
//! The phase-encode axis is split into contiguous slabs in acquisition
//! order (centered, low to high spatial frequency along that axis). Slab 0
//! is taken from the unmoved volume; slab `i >= 1` from the volume
//! resampled under `transforms[i - 1]`. The composite spectrum is inverted
//! and its modulus returned.

mod fft;

pub use fft::{fft3, ifft3, Fft3};

use num_complex::Complex64;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{resample_affine, Interpolation, RigidTransform, Volume3D};

/// Which axis is treated as the phase-encode direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhaseAxisPolicy {
    Fixed(usize),
    /// Drawn uniformly from {0, 1, 2} per sample.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MotionParams {
    /// Max |angle| per axis, degrees.
    pub rotation_range: f64,
    /// Max |shift| per axis, mm.
    pub translation_range: f64,
    /// Inclusive range for the number of moved segments.
    pub n_transforms: [usize; 2],
    pub phase_axis: PhaseAxisPolicy,
    /// Per-trace factor drawn uniformly from this interval and applied to
    /// both ranges. `[1, 1]` samples every parameter i.i.d. over the full
    /// ranges.
    pub severity: [f64; 2],
}

impl Default for MotionParams {
    fn default() -> Self {
        Self {
            rotation_range: 3.0,
            translation_range: 3.0,
            n_transforms: [1, 8],
            phase_axis: PhaseAxisPolicy::Fixed(1),
            severity: [0.0, 1.0],
        }
    }
}

impl MotionParams {
    /// No motion at all: every sampled transform is the identity.
    pub fn still() -> Self {
        Self {
            rotation_range: 0.0,
            translation_range: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rotation_range >= 0.0 && self.rotation_range.is_finite())
            || !(self.translation_range >= 0.0 && self.translation_range.is_finite())
        {
            return Err(Error::arg("motion ranges must be finite and nonnegative"));
        }
        let [lo, hi] = self.n_transforms;
        if lo < 1 || hi < lo {
            return Err(Error::arg(format!("n_transforms range [{lo}, {hi}] is invalid")));
        }
        if let PhaseAxisPolicy::Fixed(a) = self.phase_axis {
            if a > 2 {
                return Err(Error::arg(format!("phase axis {a} out of range")));
            }
        }
        let [s0, s1] = self.severity;
        if !(s0 >= 0.0 && s1 >= s0 && s1.is_finite()) {
            return Err(Error::arg(format!("severity range [{s0}, {s1}] is invalid")));
        }
        Ok(())
    }
}

/// The sampled motion for one generated volume.
///
/// `boundaries` has `N + 1` entries: the first `N` are the cut lines, the
/// last equals the phase-axis extent. Segment 0 is `[0, boundaries[0])`,
/// segment `i` is `[boundaries[i-1], boundaries[i])` and uses
/// `transforms[i-1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionTrace {
    pub seed: u64,
    pub phase_axis: usize,
    pub boundaries: Vec<usize>,
    pub transforms: Vec<RigidTransform>,
}

impl MotionTrace {
    pub fn n_transforms(&self) -> usize {
        self.transforms.len()
    }

    pub fn extent(&self) -> usize {
        self.boundaries.last().copied().unwrap_or(0)
    }

    pub fn validate(&self, dims: [usize; 3]) -> Result<()> {
        if self.phase_axis > 2 {
            return Err(Error::arg(format!("phase axis {} out of range", self.phase_axis)));
        }
        let n = self.transforms.len();
        if n == 0 {
            return Err(Error::arg("trace needs at least one transform"));
        }
        if self.boundaries.len() != n + 1 {
            return Err(Error::arg(format!(
                "{} boundaries for {n} transforms, expected {}",
                self.boundaries.len(),
                n + 1
            )));
        }
        let extent = dims[self.phase_axis];
        if self.extent() != extent {
            return Err(Error::arg(format!(
                "trace ends at {} but phase axis has {extent} lines",
                self.extent()
            )));
        }
        if self.boundaries[0] == 0 || self.boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::arg("boundaries must be strictly increasing and start above 0"));
        }
        Ok(())
    }

    /// For each acquisition-order line, the segment it belongs to.
    pub fn segment_of_lines(&self) -> Vec<usize> {
        let mut owner = Vec::with_capacity(self.extent());
        let mut start = 0;
        for (seg, &end) in self.boundaries.iter().enumerate() {
            owner.extend(std::iter::repeat(seg).take(end - start));
            start = end;
        }
        owner
    }
}

fn symmetric(rng: &mut ChaCha8Rng, range: f64) -> f64 {
    if range == 0.0 {
        0.0
    } else {
        rng.gen_range(-range..=range)
    }
}

/// Draw a motion trace for a volume of the given dims.
///
/// The phase axis is fixed or drawn first, then `N`, then the severity
/// factor, then per transform three angles and three shifts, then `N`
/// distinct cut lines in `[1, extent - 1]`. Identical inputs give identical
/// traces.
pub fn sample_motion_trace(params: &MotionParams, dims: [usize; 3], seed: u64) -> Result<MotionTrace> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase_axis = match params.phase_axis {
        PhaseAxisPolicy::Fixed(a) => a,
        PhaseAxisPolicy::Random => rng.gen_range(0..3),
    };
    let extent = dims[phase_axis];
    let [lo, hi] = params.n_transforms;
    let n = rng.gen_range(lo..=hi);
    if extent < n + 1 {
        return Err(Error::arg(format!(
            "phase axis has {extent} lines, need at least {} for {n} transforms",
            n + 1
        )));
    }
    let [s0, s1] = params.severity;
    let severity = if s0 == s1 { s0 } else { rng.gen_range(s0..=s1) };
    let (rot_range, trans_range) = (params.rotation_range * severity, params.translation_range * severity);
    let transforms = (0..n)
        .map(|_| {
            let rot_deg = std::array::from_fn(|_| symmetric(&mut rng, rot_range));
            let trans_mm = std::array::from_fn(|_| symmetric(&mut rng, trans_range));
            RigidTransform { rot_deg, trans_mm }
        })
        .collect();
    let mut boundaries: Vec<usize> = index::sample(&mut rng, extent - 1, n)
        .into_iter()
        .map(|c| c + 1)
        .collect();
    boundaries.sort_unstable();
    boundaries.push(extent);
    Ok(MotionTrace {
        seed,
        phase_axis,
        boundaries,
        transforms,
    })
}

/// Storage index (unshifted FFT order) of acquisition line `p`.
#[inline]
fn storage_line(p: usize, extent: usize) -> usize {
    (p + extent - extent / 2) % extent
}

fn to_complex(v: &Volume3D) -> Vec<Complex64> {
    v.data().iter().map(|&x| Complex64::new(x as f64, 0.0)).collect()
}

/// Apply the trace's motion to `v` by k-space slab composition.
pub fn corrupt_with_motion(v: &Volume3D, trace: &MotionTrace) -> Result<Volume3D> {
    let mut plan = Fft3::new(v.dims());
    corrupt_with_motion_using(v, trace, &mut plan)
}

/// As [`corrupt_with_motion`], reusing a caller-owned FFT plan.
pub fn corrupt_with_motion_using(v: &Volume3D, trace: &MotionTrace, plan: &mut Fft3) -> Result<Volume3D> {
    let dims = v.dims();
    if plan.dims() != dims {
        return Err(Error::arg("fft plan dims do not match volume"));
    }
    if v.data().iter().any(|x| !x.is_finite()) {
        return Err(Error::arg("input volume has non-finite values"));
    }
    trace.validate(dims)?;
    if trace.transforms.iter().all(RigidTransform::is_identity) {
        // every slab comes from the unmoved spectrum
        return v.with_data(v.data().iter().map(|x| x.abs()).collect());
    }

    let axis = trace.phase_axis;
    let extent = dims[axis];
    // segment index per storage line
    let mut owner = vec![0usize; extent];
    for (p, seg) in trace.segment_of_lines().into_iter().enumerate() {
        owner[storage_line(p, extent)] = seg;
    }
    let line_of = |idx: usize| -> usize {
        match axis {
            0 => idx % dims[0],
            1 => (idx / dims[0]) % dims[1],
            _ => idx / (dims[0] * dims[1]),
        }
    };

    let mut composite = to_complex(v);
    plan.forward(&mut composite);

    let center = v.world_center();
    // each distinct moved pose is transformed once and scattered to all its segments
    let mut done = vec![false; trace.transforms.len()];
    for (t_idx, t) in trace.transforms.iter().enumerate() {
        if done[t_idx] || t.is_identity() {
            continue;
        }
        let segments: Vec<usize> = trace
            .transforms
            .iter()
            .enumerate()
            .filter(|(_, u)| *u == t)
            .map(|(i, _)| {
                done[i] = true;
                i + 1
            })
            .collect();
        let moved = resample_affine(v, &t.matrix_about(center), Interpolation::Trilinear)?;
        let mut spectrum = to_complex(&moved);
        drop(moved);
        plan.forward(&mut spectrum);
        let take: Vec<bool> = owner.iter().map(|s| segments.contains(s)).collect();
        for (idx, (dst, src)) in composite.iter_mut().zip(&spectrum).enumerate() {
            if take[line_of(idx)] {
                *dst = *src;
            }
        }
    }

    plan.inverse(&mut composite);
    let data = composite.iter().map(|c| c.norm() as f32).collect();
    v.with_data(data)
}

/// `sqrt(sum (a-b)^2 / sum b^2)`.
pub fn relative_rms_error(a: &[f32], reference: &[f32]) -> f64 {
    let num: f64 = a
        .iter()
        .zip(reference)
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum();
    let den: f64 = reference.iter().map(|y| (*y as f64).powi(2)).sum();
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}
