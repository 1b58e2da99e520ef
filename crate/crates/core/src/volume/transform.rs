use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

/// Rigid motion as intrinsic XYZ Euler angles (degrees) plus a translation
/// (mm). The rotation acts about a caller-supplied world point, normally the
/// volume center.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rot_deg: [f64; 3],
    pub trans_mm: [f64; 3],
}

/// Tag written next to every serialized transform so readers know how to
/// realize the angles.
pub const ROTATION_CONVENTION: &str = "intrinsic_xyz_deg_about_volume_center";

impl RigidTransform {
    pub fn new(rot_deg: [f64; 3], trans_mm: [f64; 3]) -> Self {
        Self { rot_deg, trans_mm }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn is_identity(&self) -> bool {
        self.rot_deg.iter().chain(&self.trans_mm).all(|&x| x == 0.0)
    }

    /// `Rx(a) * Ry(b) * Rz(c)`: intrinsic rotations about x, then y', then z''.
    pub fn rotation(&self) -> Matrix3<f64> {
        let [a, b, c] = self.rot_deg.map(f64::to_radians);
        let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, a.cos(), -a.sin(), 0.0, a.sin(), a.cos());
        let ry = Matrix3::new(b.cos(), 0.0, b.sin(), 0.0, 1.0, 0.0, -b.sin(), 0.0, b.cos());
        let rz = Matrix3::new(c.cos(), -c.sin(), 0.0, c.sin(), c.cos(), 0.0, 0.0, 0.0, 1.0);
        rx * ry * rz
    }

    /// Homogeneous world-space matrix `x -> R (x - center) + center + t`.
    pub fn matrix_about(&self, center: [f64; 3]) -> Matrix4<f64> {
        let r = self.rotation();
        let c = Vector3::from(center);
        let t = Vector3::from(self.trans_mm) + c - r * c;
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        m
    }

    /// Recover angles and translation from a matrix built by
    /// [`matrix_about`](Self::matrix_about) with the same center.
    pub fn from_matrix(m: &Matrix4<f64>, center: [f64; 3]) -> Self {
        let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
        let b = r[(0, 2)].clamp(-1.0, 1.0).asin();
        let (a, c) = if r[(0, 2)].abs() < 1.0 - 1e-12 {
            ((-r[(1, 2)]).atan2(r[(2, 2)]), (-r[(0, 1)]).atan2(r[(0, 0)]))
        } else {
            // gimbal lock: fold all of the x/z freedom into x
            (r[(2, 1)].atan2(r[(1, 1)]), 0.0)
        };
        let c_vec = Vector3::from(center);
        let t = m.fixed_view::<3, 1>(0, 3).into_owned() - c_vec + r * c_vec;
        Self {
            rot_deg: [a.to_degrees(), b.to_degrees(), c.to_degrees()],
            trans_mm: [t[0], t[1], t[2]],
        }
    }
}

pub fn translation(t: [f64; 3]) -> Matrix4<f64> {
    Matrix4::new_translation(&Vector3::from(t))
}

/// Isotropic scaling by `s` about a world point.
pub fn scaling_about(s: f64, center: [f64; 3]) -> Matrix4<f64> {
    let c = Vector3::from(center);
    translation(c.into()) * Matrix4::new_scaling(s) * translation((-c).into())
}
