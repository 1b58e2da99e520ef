//! Analytic phantoms: Gaussian blobs for numerical checks and a randomized
//! ellipsoidal head for toy datasets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::volume::Volume3D;

/// Anisotropic Gaussian blob; offset and sigma in voxels, offset relative to the grid center.
#[derive(Debug, Clone, Copy)]
pub struct Blob {
    pub offset: [f64; 3],
    pub sigma: [f64; 3],
    pub amplitude: f64,
}

/// Sum of Gaussian blobs on a grid with isotropic `spacing`.
pub fn blobs(dims: [usize; 3], spacing: f64, parts: &[Blob]) -> Volume3D {
    let c = dims.map(|n| (n as f64 - 1.0) / 2.0);
    let mut data = Vec::with_capacity(dims.iter().product());
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let p = [i as f64 - c[0], j as f64 - c[1], k as f64 - c[2]];
                let v: f64 = parts
                    .iter()
                    .map(|b| {
                        let r2: f64 = (0..3)
                            .map(|a| ((p[a] - b.offset[a]) / b.sigma[a]).powi(2))
                            .sum();
                        b.amplitude * (-0.5 * r2).exp()
                    })
                    .sum();
                data.push(v as f32);
            }
        }
    }
    Volume3D::from_spacing(dims, [spacing; 3], data).expect("finite phantom")
}

/// Single centered isotropic blob with sigma `n / 6` voxels.
pub fn gaussian_blob(n: usize, spacing: f64) -> Volume3D {
    let s = n as f64 / 6.0;
    blobs(
        [n; 3],
        spacing,
        &[Blob {
            offset: [0.0; 3],
            sigma: [s; 3],
            amplitude: 1.0,
        }],
    )
}

/// Off-center anisotropic blobs: rotation about the grid center visibly
/// moves structure, unlike a single centered isotropic blob.
pub fn asymmetric_blobs(n: usize, spacing: f64) -> Volume3D {
    let u = n as f64;
    blobs(
        [n; 3],
        spacing,
        &[
            Blob {
                offset: [0.12 * u, -0.08 * u, 0.05 * u],
                sigma: [0.14 * u, 0.09 * u, 0.11 * u],
                amplitude: 1.0,
            },
            Blob {
                offset: [-0.15 * u, 0.12 * u, -0.06 * u],
                sigma: [0.07 * u, 0.12 * u, 0.08 * u],
                amplitude: 0.7,
            },
            Blob {
                offset: [0.02 * u, 0.18 * u, 0.14 * u],
                sigma: [0.05 * u, 0.05 * u, 0.06 * u],
                amplitude: 0.5,
            },
        ],
    )
}

/// Randomized head-like phantom: a bright ellipsoidal shell ("scalp"), a
/// darker gap, and a textured "brain" ellipsoid with a few inner
/// structures. Edges are softened with a logistic profile so the image is
/// band-limited enough for resampling but still has sharp-ish boundaries
/// where motion ghosting shows up.
pub fn head(dims: [usize; 3], spacing: f64, seed: u64) -> Volume3D {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = dims.map(|n| (n as f64 - 1.0) / 2.0);
    let extent = dims.map(|n| n as f64 * spacing);
    // semi-axes in mm
    let outer = [
        extent[0] * rng.gen_range(0.36..0.42),
        extent[1] * rng.gen_range(0.38..0.44),
        extent[2] * rng.gen_range(0.34..0.40),
    ];
    let scalp = rng.gen_range(5.0..8.0);
    let gap = rng.gen_range(3.0..5.0);
    let inner = outer.map(|a| a - scalp - gap);
    let shift = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
    let n_inner = rng.gen_range(3..7);
    let structures: Vec<([f64; 3], [f64; 3], f64)> = (0..n_inner)
        .map(|_| {
            let pos = [
                rng.gen_range(-0.5..0.5) * inner[0],
                rng.gen_range(-0.5..0.5) * inner[1],
                rng.gen_range(-0.5..0.5) * inner[2],
            ];
            let axes = [rng.gen_range(6.0..18.0), rng.gen_range(6.0..18.0), rng.gen_range(6.0..18.0)];
            (pos, axes, rng.gen_range(-0.35..0.3))
        })
        .collect();
    let tex_freq: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.05..0.12));
    let tex_phase: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..std::f64::consts::TAU));
    let brain_level = rng.gen_range(0.55..0.7);
    let scalp_level = rng.gen_range(0.85..1.0);
    // logistic edge width in normalized-radius units
    let soft = |r: f64| 1.0 / (1.0 + ((r - 1.0) / 0.02).exp());
    let mut data = Vec::with_capacity(dims.iter().product());
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let p = [
                    (i as f64 - c[0]) * spacing - shift[0],
                    (j as f64 - c[1]) * spacing - shift[1],
                    (k as f64 - c[2]) * spacing - shift[2],
                ];
                let r = |ax: &[f64; 3], q: &[f64; 3]| {
                    ((q[0] / ax[0]).powi(2) + (q[1] / ax[1]).powi(2) + (q[2] / ax[2]).powi(2)).sqrt()
                };
                let r_out = r(&outer, &p);
                let gap_axes = outer.map(|a| a - scalp);
                let r_gap = r(&gap_axes, &p);
                let r_in = r(&inner, &p);
                let mut val = scalp_level * (soft(r_out) - soft(r_gap));
                val += 0.12 * (soft(r_gap) - soft(r_in));
                let mut brain = brain_level
                    + 0.06
                        * ((tex_freq[0] * p[0] + tex_phase[0]).sin()
                            + (tex_freq[1] * p[1] + tex_phase[1]).sin()
                            + (tex_freq[2] * p[2] + tex_phase[2]).sin());
                for (pos, axes, delta) in &structures {
                    let q = [p[0] - pos[0], p[1] - pos[1], p[2] - pos[2]];
                    brain += delta * soft(r(axes, &q));
                }
                val += brain.max(0.0) * soft(r_in);
                data.push(val.max(0.0) as f32);
            }
        }
    }
    Volume3D::from_spacing(dims, [spacing; 3], data).expect("finite phantom")
}
