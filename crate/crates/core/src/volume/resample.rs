use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use super::Volume3D;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    #[default]
    Trilinear,
    Nearest,
}

// Sample positions this close outside the grid still count as inside, so
// identity-like transforms do not lose the border to rounding.
const EDGE_TOL: f64 = 1e-6;

/// Resample `v` under the world-space transform `t` with a zero fill.
pub fn resample_affine(v: &Volume3D, t: &Matrix4<f64>, interp: Interpolation) -> Result<Volume3D> {
    resample_affine_with_fill(v, t, interp, 0.0)
}

/// Output voxel `x` takes the input value at world point `t⁻¹ · world(x)`.
/// Points that fall outside the input grid receive `fill`.
pub fn resample_affine_with_fill(
    v: &Volume3D,
    t: &Matrix4<f64>,
    interp: Interpolation,
    fill: f32,
) -> Result<Volume3D> {
    let t_inv = t
        .try_inverse()
        .filter(|m| m.iter().all(|x| x.is_finite()))
        .ok_or_else(|| Error::arg("transform is singular"))?;
    let a = v.affine();
    let a_inv = a
        .try_inverse()
        .ok_or_else(|| Error::arg("volume affine is singular"))?;
    let m = a_inv * t_inv * a;
    if !fill.is_finite() {
        return Err(Error::arg("fill value must be finite"));
    }
    Ok(v.with_data(sample_grid(v, &m, interp, fill)).expect("finite by construction"))
}

/// Sample `v` at index-space positions `m · (i, j, k, 1)` for every output voxel.
pub(crate) fn sample_grid(v: &Volume3D, m: &Matrix4<f64>, interp: Interpolation, fill: f32) -> Vec<f32> {
    let [nx, ny, nz] = v.dims();
    let mut out = Vec::with_capacity(v.len());
    let step = Vector4::new(m[(0, 0)], m[(1, 0)], m[(2, 0)], 0.0);
    for k in 0..nz {
        for j in 0..ny {
            let row = m * Vector4::new(0.0, j as f64, k as f64, 1.0);
            for i in 0..nx {
                let p = row + step * i as f64;
                out.push(match interp {
                    Interpolation::Trilinear => trilinear(v, p[0], p[1], p[2], fill),
                    Interpolation::Nearest => nearest(v, p[0], p[1], p[2], fill),
                });
            }
        }
    }
    out
}

#[inline]
fn in_range(x: f64, n: usize) -> bool {
    x >= -EDGE_TOL && x <= (n - 1) as f64 + EDGE_TOL
}

#[inline]
pub(crate) fn nearest(v: &Volume3D, x: f64, y: f64, z: f64, fill: f32) -> f32 {
    let [nx, ny, nz] = v.dims();
    if !(in_range(x, nx) && in_range(y, ny) && in_range(z, nz)) {
        return fill;
    }
    let i = (x.round().max(0.0) as usize).min(nx - 1);
    let j = (y.round().max(0.0) as usize).min(ny - 1);
    let k = (z.round().max(0.0) as usize).min(nz - 1);
    v.get(i, j, k)
}

#[inline]
fn split(x: f64, n: usize) -> (usize, usize, f64) {
    let x = x.clamp(0.0, (n - 1) as f64);
    let i0 = (x.floor() as usize).min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, x - i0 as f64)
}

/// Trilinear sample at continuous index `(x, y, z)`; the eight weights are a
/// convex combination so the result stays within the data range.
#[inline]
pub(crate) fn trilinear(v: &Volume3D, x: f64, y: f64, z: f64, fill: f32) -> f32 {
    let [nx, ny, nz] = v.dims();
    if !(in_range(x, nx) && in_range(y, ny) && in_range(z, nz)) {
        return fill;
    }
    let (x0, x1, fx) = split(x, nx);
    let (y0, y1, fy) = split(y, ny);
    let (z0, z1, fz) = split(z, nz);
    let d = v.data();
    let at = |i: usize, j: usize, k: usize| d[i + nx * (j + ny * k)] as f64;
    let c00 = at(x0, y0, z0) * (1.0 - fx) + at(x1, y0, z0) * fx;
    let c10 = at(x0, y1, z0) * (1.0 - fx) + at(x1, y1, z0) * fx;
    let c01 = at(x0, y0, z1) * (1.0 - fx) + at(x1, y0, z1) * fx;
    let c11 = at(x0, y1, z1) * (1.0 - fx) + at(x1, y1, z1) * fx;
    let c0 = c00 * (1.0 - fy) + c10 * fy;
    let c1 = c01 * (1.0 - fy) + c11 * fy;
    (c0 * (1.0 - fz) + c1 * fz) as f32
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{scaling_about, translation, RigidTransform};
    use proptest::prelude::*;

    fn blob(n: usize, spacing: f64) -> Volume3D {
        let c = (n as f64 - 1.0) / 2.0;
        let sigma = n as f64 / 5.0;
        let mut data = Vec::with_capacity(n * n * n);
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    let r2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2) + (k as f64 - c).powi(2);
                    data.push((-r2 / (2.0 * sigma * sigma)).exp() as f32);
                }
            }
        }
        Volume3D::from_spacing([n, n, n], [spacing; 3], data).unwrap()
    }

    fn seeded(dims: [usize; 3], seed: u64) -> Volume3D {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = dims[0] * dims[1] * dims[2];
        Volume3D::from_spacing(dims, [1.5, 1.0, 2.0], (0..n).map(|_| rng.gen_range(-3.0..5.0)).collect())
            .unwrap()
    }

    #[test]
    fn identity_transform_is_identity() {
        let v = seeded([7, 5, 6], 1);
        for interp in [Interpolation::Trilinear, Interpolation::Nearest] {
            let r = resample_affine(&v, &Matrix4::identity(), interp).unwrap();
            for (a, b) in r.data().iter().zip(v.data()) {
                assert!((a - b).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn one_voxel_translation_shifts_index() {
        let v = seeded([6, 4, 3], 2);
        // spacing x = 1.5 mm
        let r = resample_affine(&v, &translation([1.5, 0.0, 0.0]), Interpolation::Nearest).unwrap();
        for k in 0..3 {
            for j in 0..4 {
                assert_eq!(r.get(0, j, k), 0.0);
                for i in 1..6 {
                    assert_eq!(r.get(i, j, k), v.get(i - 1, j, k));
                }
            }
        }
    }

    #[test]
    fn scale_down_then_up_is_near_identity_in_interior() {
        let v = blob(32, 1.0);
        let c = v.world_center();
        let half = resample_affine(&v, &scaling_about(0.5, c), Interpolation::Trilinear).unwrap();
        let back = resample_affine(&half, &scaling_about(2.0, c), Interpolation::Trilinear).unwrap();
        let mut max_err = 0.0f32;
        for k in 8..24 {
            for j in 8..24 {
                for i in 8..24 {
                    max_err = max_err.max((back.get(i, j, k) - v.get(i, j, k)).abs());
                }
            }
        }
        assert!(max_err < 0.05, "max err {max_err}");
    }

    #[test]
    fn singular_transform_is_rejected() {
        let v = seeded([3, 3, 3], 3);
        let mut m = Matrix4::identity();
        m[(2, 2)] = 0.0;
        assert!(matches!(
            resample_affine(&v, &m, Interpolation::Trilinear),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn custom_fill_value() {
        let v = seeded([4, 4, 4], 4);
        let r = resample_affine_with_fill(&v, &translation([100.0, 0.0, 0.0]), Interpolation::Trilinear, -7.0)
            .unwrap();
        assert!(r.data().iter().all(|&x| x == -7.0));
    }

    #[test]
    fn rigid_round_trip_on_smooth_phantom() {
        let v = blob(40, 2.0);
        let c = v.world_center();
        let t = RigidTransform::new([8.0, -5.0, 12.0], [3.0, -2.5, 4.0]);
        let m = t.matrix_about(c);
        let fwd = resample_affine(&v, &m, Interpolation::Trilinear).unwrap();
        let back = resample_affine(&fwd, &m.try_inverse().unwrap(), Interpolation::Trilinear).unwrap();
        let mut max_err = 0.0f32;
        for k in 10..30 {
            for j in 10..30 {
                for i in 10..30 {
                    max_err = max_err.max((back.get(i, j, k) - v.get(i, j, k)).abs());
                }
            }
        }
        assert!(max_err < 0.05, "max err {max_err}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn trilinear_stays_in_data_range(
            seed in 0u64..1000,
            a in -30.0..30.0f64, b in -30.0..30.0f64, c in -30.0..30.0f64,
            tx in -3.0..3.0f64, s in 0.7..1.3f64,
        ) {
            let v = seeded([6, 7, 5], seed);
            let (lo, hi) = v.min_max();
            let center = v.world_center();
            let m = RigidTransform::new([a, b, c], [tx, 0.0, 0.0]).matrix_about(center)
                * scaling_about(s, center);
            let fill = 1.0e6f32;
            let r = resample_affine_with_fill(&v, &m, Interpolation::Trilinear, fill).unwrap();
            for &x in r.data() {
                if x != fill {
                    prop_assert!(x >= lo - 1e-6 && x <= hi + 1e-6);
                }
            }
        }
    }
}
