//! Volume representation and the voxel-grid operations every other stage
//! builds on: NIfTI-1 I/O, affine resampling, ROI cropping and percentile
//! intensity normalization.
//!
//! Data is stored x-fastest (`index = i + nx * (j + ny * k)`), the same order
//! NIfTI uses on disk. Spacing and affine entries are kept at `f32`
//! precision so that a write/read cycle reproduces them bit for bit.

mod nifti;
mod resample;
mod transform;

pub use nifti::{read_volume, write_volume, write_volume_with, NIFTI_HEADER_SIZE, NIFTI_VOX_OFFSET};
pub use resample::{resample_affine, resample_affine_with_fill, Interpolation};
pub(crate) use resample::trilinear;
pub use transform::{scaling_about, translation, RigidTransform, ROTATION_CONVENTION};

use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Voxel type a volume was read from (or will be written as).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiskDtype {
    U8,
    I16,
    F32,
}

impl DiskDtype {
    pub fn nifti_code(self) -> i16 {
        match self {
            DiskDtype::U8 => 2,
            DiskDtype::I16 => 4,
            DiskDtype::F32 => 16,
        }
    }

    pub fn from_nifti_code(code: i16) -> Option<Self> {
        match code {
            2 => Some(DiskDtype::U8),
            4 => Some(DiskDtype::I16),
            16 => Some(DiskDtype::F32),
            _ => None,
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            DiskDtype::U8 => 1,
            DiskDtype::I16 => 2,
            DiskDtype::F32 => 4,
        }
    }
}

/// A 3D scalar image with voxel spacing (mm) and a voxel-to-world affine.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    dims: [usize; 3],
    spacing: [f64; 3],
    affine: Matrix4<f64>,
    data: Vec<f32>,
    dtype: DiskDtype,
}

fn quantize(x: f64) -> f64 {
    x as f32 as f64
}

impl Volume3D {
    pub fn new(
        dims: [usize; 3],
        spacing: [f64; 3],
        affine: Matrix4<f64>,
        data: Vec<f32>,
    ) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::arg(format!("dims must be positive, got {dims:?}")));
        }
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::arg(format!(
                "data length {} does not match dims {:?} ({n} voxels)",
                data.len(),
                dims
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::arg(format!("spacing must be positive, got {spacing:?}")));
        }
        let affine = affine.map(quantize);
        let det = affine.fixed_view::<3, 3>(0, 0).determinant();
        if det == 0.0 || !det.is_finite() {
            return Err(Error::arg("affine 3x3 block is singular"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("volume data contains non-finite values"));
        }
        Ok(Self {
            dims,
            spacing: spacing.map(quantize),
            affine,
            data,
            dtype: DiskDtype::F32,
        })
    }

    /// Volume with a diagonal affine placing voxel (0,0,0) at the world origin.
    pub fn from_spacing(dims: [usize; 3], spacing: [f64; 3], data: Vec<f32>) -> Result<Self> {
        let affine = Matrix4::from_diagonal(&Vector4::new(spacing[0], spacing[1], spacing[2], 1.0));
        Self::new(dims, spacing, affine, data)
    }

    pub fn zeros(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        Self::from_spacing(dims, spacing, vec![0.0; dims[0] * dims[1] * dims[2]])
    }

    /// Same geometry as `self`, new voxel data. Non-finite values are
    /// rejected so the finiteness invariant holds for derived volumes.
    pub fn with_data(&self, data: Vec<f32>) -> Result<Self> {
        if data.len() != self.len() {
            return Err(Error::arg(format!(
                "data length {} does not match {} voxels",
                data.len(),
                self.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("volume data contains non-finite values"));
        }
        Ok(Self {
            data,
            ..self.geometry_clone()
        })
    }

    fn geometry_clone(&self) -> Self {
        Self {
            dims: self.dims,
            spacing: self.spacing,
            affine: self.affine,
            data: Vec::new(),
            dtype: self.dtype,
        }
    }

    pub(crate) fn from_parts_unchecked(
        dims: [usize; 3],
        spacing: [f64; 3],
        affine: Matrix4<f64>,
        data: Vec<f32>,
        dtype: DiskDtype,
    ) -> Self {
        debug_assert_eq!(data.len(), dims[0] * dims[1] * dims[2]);
        Self {
            dims,
            spacing: spacing.map(quantize),
            affine: affine.map(quantize),
            data,
            dtype,
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn affine(&self) -> &Matrix4<f64> {
        &self.affine
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn dtype(&self) -> DiskDtype {
        self.dtype
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.index(i, j, k)]
    }

    /// World coordinates (mm) of the geometric center of the voxel grid.
    pub fn world_center(&self) -> [f64; 3] {
        let c = Vector4::new(
            (self.dims[0] as f64 - 1.0) / 2.0,
            (self.dims[1] as f64 - 1.0) / 2.0,
            (self.dims[2] as f64 - 1.0) / 2.0,
            1.0,
        );
        let w = self.affine * c;
        [w[0], w[1], w[2]]
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// Center-crop (or symmetrically zero-pad) to `roi` voxels per axis.
///
/// The affine is shifted so retained voxels keep their world coordinates.
pub fn crop_roi(v: &Volume3D, roi: [usize; 3]) -> Result<Volume3D> {
    if roi.iter().any(|&r| r == 0) {
        return Err(Error::arg(format!("roi must be positive, got {roi:?}")));
    }
    let dims = v.dims();
    if roi == dims {
        return Ok(v.clone());
    }
    // out index o maps to input index o + offset; offset < 0 means padding.
    let offset: [i64; 3] =
        std::array::from_fn(|a| (dims[a] as i64 - roi[a] as i64).div_euclid(2));
    let mut data = vec![0.0f32; roi[0] * roi[1] * roi[2]];
    let (x0, x1) = overlap(offset[0], dims[0], roi[0]);
    if x0 < x1 {
        for k in 0..roi[2] {
            let sk = k as i64 + offset[2];
            if sk < 0 || sk >= dims[2] as i64 {
                continue;
            }
            for j in 0..roi[1] {
                let sj = j as i64 + offset[1];
                if sj < 0 || sj >= dims[1] as i64 {
                    continue;
                }
                let dst = roi[0] * (j + roi[1] * k);
                let src_base = v.index(0, sj as usize, sk as usize);
                let s0 = (x0 as i64 + offset[0]) as usize;
                data[dst + x0..dst + x1].copy_from_slice(&v.data()[src_base + s0..src_base + s0 + (x1 - x0)]);
            }
        }
    }
    let shift = Matrix4::new_translation(&nalgebra::Vector3::new(
        offset[0] as f64,
        offset[1] as f64,
        offset[2] as f64,
    ));
    Ok(Volume3D::from_parts_unchecked(
        roi,
        v.spacing(),
        v.affine() * shift,
        data,
        v.dtype(),
    ))
}

/// Range of output x indices whose source index lies inside the input.
fn overlap(offset: i64, n_in: usize, n_out: usize) -> (usize, usize) {
    let lo = (-offset).clamp(0, n_out as i64) as usize;
    let hi = (n_in as i64 - offset).clamp(0, n_out as i64) as usize;
    (lo, hi.max(lo))
}

/// Linear-interpolated percentile of `values` (0..=100), numpy's default rule.
pub fn percentile(values: &[f32], pct: f64) -> f64 {
    let mut scratch = values.to_vec();
    percentiles_in_place(&mut scratch, &[pct])[0]
}

fn percentiles_in_place(values: &mut [f32], pcts: &[f64]) -> Vec<f64> {
    let n = values.len();
    if n == 0 {
        return vec![0.0; pcts.len()];
    }
    pcts.iter()
        .map(|&p| {
            let rank = p / 100.0 * (n - 1) as f64;
            let lo = rank.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            let frac = rank - lo as f64;
            let (_, a, rest) = values.select_nth_unstable_by(lo, f32::total_cmp);
            let a = *a as f64;
            let b = if hi == lo {
                a
            } else {
                // smallest element of the upper partition is order statistic lo+1
                rest.iter().copied().fold(f32::INFINITY, f32::min) as f64
            };
            a + frac * (b - a)
        })
        .collect()
}

/// Affinely map the `lo_pct` percentile to 0 and `hi_pct` to 1, clamping to
/// `[0, 1]`. When the two percentiles coincide the full min/max range is used
/// instead; a constant volume maps to all zeros.
pub fn normalize_intensity(v: &Volume3D, lo_pct: f64, hi_pct: f64) -> Result<Volume3D> {
    if !(0.0..=100.0).contains(&lo_pct) || !(0.0..=100.0).contains(&hi_pct) || lo_pct >= hi_pct {
        return Err(Error::arg(format!(
            "percentiles must satisfy 0 <= lo < hi <= 100, got ({lo_pct}, {hi_pct})"
        )));
    }
    let mut scratch = v.data().to_vec();
    let p = percentiles_in_place(&mut scratch, &[lo_pct, hi_pct]);
    let (mut lo, mut hi) = (p[0], p[1]);
    if hi <= lo {
        let (mn, mx) = v.min_max();
        lo = mn as f64;
        hi = mx as f64;
    }
    let data = if hi <= lo {
        vec![0.0; v.len()]
    } else {
        let scale = 1.0 / (hi - lo);
        v.data()
            .iter()
            .map(|&x| (((x as f64 - lo) * scale).clamp(0.0, 1.0)) as f32)
            .collect()
    };
    v.with_data(data)
}

pub const DEFAULT_LO_PCT: f64 = 1.0;
pub const DEFAULT_HI_PCT: f64 = 99.0;
