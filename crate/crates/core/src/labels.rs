//! Motion-score ground truth and its soft-label encoding.
//!
//! The score of a rigid transform is the RMS displacement it induces over a
//! solid sphere of radius `R`: with `M - I = [A | t]` expressed about the
//! sphere center,
//!
//! ```text
//! rms = sqrt( R²/5 · tr(AᵀA) + tᵀt )
//! ```
//!
//! Scores are discretized onto a fixed bin grid and turned into Gaussian
//! soft labels; predictions decode as the probability-weighted mean of the
//! bin centers.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kspace::MotionTrace;
use crate::volume::RigidTransform;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Mean,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RmsConfig {
    /// Sphere radius, mm.
    pub sphere_radius: f64,
    /// Sphere center as an offset (mm) from the volume center, which is
    /// also the point transforms rotate about.
    pub center_offset: [f64; 3],
    pub aggregation: Aggregation,
}

impl Default for RmsConfig {
    fn default() -> Self {
        Self {
            sphere_radius: 80.0,
            center_offset: [0.0; 3],
            aggregation: Aggregation::Mean,
        }
    }
}

impl RmsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sphere_radius > 0.0 && self.sphere_radius.is_finite()) {
            return Err(Error::arg("sphere radius must be positive"));
        }
        Ok(())
    }
}

/// RMS displacement over the sphere for `x -> rotation · x + shift`, with
/// `x` measured from the sphere center.
pub fn rms_deviation_linear(rotation: &Matrix3<f64>, shift: &Vector3<f64>, radius: f64) -> f64 {
    let a = rotation - Matrix3::identity();
    let tr = (a.transpose() * a).trace();
    (radius * radius / 5.0 * tr + shift.dot(shift)).max(0.0).sqrt()
}

/// Score of a single rigid transform (mm).
pub fn rms_deviation(t: &RigidTransform, cfg: &RmsConfig) -> f64 {
    let r = t.rotation();
    let c = Vector3::from(cfg.center_offset);
    // about the volume center: y -> R y + t; re-centred on c the shift gains (R - I) c
    let shift = Vector3::from(t.trans_mm) + (r - Matrix3::identity()) * c;
    rms_deviation_linear(&r, &shift, cfg.sphere_radius)
}

/// Aggregate score of all transforms in a trace, each relative to the
/// unmoved reference pose. Zero iff every transform is the identity.
pub fn trace_score(trace: &MotionTrace, cfg: &RmsConfig) -> f64 {
    aggregate(trace.transforms.iter().map(|t| rms_deviation(t, cfg)), cfg.aggregation)
}

pub fn aggregate(scores: impl Iterator<Item = f64>, how: Aggregation) -> f64 {
    let (sum, max, n) = scores.fold((0.0, 0.0f64, 0usize), |(s, m, n), x| (s + x, m.max(x), n + 1));
    if n == 0 {
        return 0.0;
    }
    match how {
        Aggregation::Mean => sum / n as f64,
        Aggregation::Max => max,
    }
}

/// Discretization of the motion-score range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BinSpec {
    pub n_bins: usize,
    pub lo: f64,
    pub hi: f64,
    /// Gaussian soft-label standard deviation; `None` means one bin width.
    pub soft_sigma: Option<f64>,
}

impl Default for BinSpec {
    fn default() -> Self {
        Self {
            n_bins: 50,
            lo: -0.8,
            hi: 4.8,
            soft_sigma: None,
        }
    }
}

impl BinSpec {
    pub fn new(n_bins: usize, lo: f64, hi: f64) -> Result<Self> {
        let s = Self {
            n_bins,
            lo,
            hi,
            soft_sigma: None,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_bins < 2 {
            return Err(Error::arg("need at least 2 bins"));
        }
        if !(self.lo < self.hi) || !self.lo.is_finite() || !self.hi.is_finite() {
            return Err(Error::arg(format!("bin range [{}, {}] is invalid", self.lo, self.hi)));
        }
        if let Some(s) = self.soft_sigma {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::arg("soft_sigma must be finite and nonnegative"));
            }
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.n_bins as f64
    }

    pub fn sigma(&self) -> f64 {
        self.soft_sigma.unwrap_or_else(|| self.width())
    }

    pub fn center(&self, i: usize) -> f64 {
        self.lo + (i as f64 + 0.5) * self.width()
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.n_bins).map(|i| self.center(i)).collect()
    }

    /// Bin containing `x`; out-of-range values land in the edge bins.
    pub fn bin_index(&self, x: f64) -> usize {
        let i = ((x - self.lo) / self.width()).floor();
        if i.is_nan() || i < 0.0 {
            0
        } else {
            (i as usize).min(self.n_bins - 1)
        }
    }
}

/// Probability vector over a [`BinSpec`]'s bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SoftLabel(Vec<f64>);

impl SoftLabel {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(Error::arg("empty distribution"));
        }
        if p.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
            return Err(Error::arg("probabilities must be finite and nonnegative"));
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::arg(format!("probabilities sum to {s}, not 1")));
        }
        Ok(Self(p))
    }

    pub fn one_hot(n: usize, i: usize) -> Self {
        let mut p = vec![0.0; n];
        p[i] = 1.0;
        Self(p)
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Gaussian soft label centered on `x`, evaluated at bin centers and
/// renormalized. Uses log-space so far out-of-range scores still produce a
/// valid distribution (piled into the nearest edge bin).
pub fn encode_soft(x: f64, spec: &BinSpec) -> Result<SoftLabel> {
    if !x.is_finite() {
        return Err(Error::arg("score must be finite"));
    }
    spec.validate()?;
    let sigma = spec.sigma();
    let n = spec.n_bins;
    if sigma == 0.0 {
        let nearest = (0..n)
            .min_by(|&a, &b| (spec.center(a) - x).abs().total_cmp(&(spec.center(b) - x).abs()))
            .unwrap_or(0);
        return Ok(SoftLabel::one_hot(n, nearest));
    }
    let logs: Vec<f64> = (0..n)
        .map(|i| -0.5 * ((spec.center(i) - x) / sigma).powi(2))
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    Ok(SoftLabel(w.into_iter().map(|v| v / total).collect()))
}

/// Expected score `Σ p_i c_i`.
pub fn decode_expected(p: &[f64], spec: &BinSpec) -> f64 {
    p.iter().enumerate().map(|(i, pi)| pi * spec.center(i)).sum()
}

pub const KL_EPSILON: f64 = 1e-12;

/// `Σ t_i ln(t_i / max(q_i, eps))`; zero-target terms contribute nothing.
pub fn kl_divergence(target: &[f64], predicted: &[f64], epsilon: f64) -> f64 {
    debug_assert_eq!(target.len(), predicted.len());
    target
        .iter()
        .zip(predicted)
        .filter(|(t, _)| **t > 0.0)
        .map(|(t, q)| t * (t / q.max(epsilon)).ln())
        .sum::<f64>()
        .max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Mean-squared displacement over uniform points in the sphere.
    fn monte_carlo_rms(t: &RigidTransform, cfg: &RmsConfig, n: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = t.matrix_about([0.0; 3]);
        let c = cfg.center_offset;
        let r = cfg.sphere_radius;
        let mut acc = 0.0;
        let mut k = 0;
        while k < n {
            let p = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            if p[0] * p[0] + p[1] * p[1] + p[2] * p[2] > 1.0 {
                continue;
            }
            let x = nalgebra::Vector4::new(c[0] + r * p[0], c[1] + r * p[1], c[2] + r * p[2], 1.0);
            let d = m * x - x;
            acc += d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
            k += 1;
        }
        (acc / n as f64).sqrt()
    }

    #[test]
    fn identity_scores_zero() {
        assert_eq!(rms_deviation(&RigidTransform::identity(), &RmsConfig::default()), 0.0);
    }

    #[test]
    fn pure_translation_is_its_norm() {
        let t = RigidTransform::new([0.0; 3], [3.0, 4.0, 0.0]);
        assert_eq!(rms_deviation(&t, &RmsConfig::default()), 5.0);
    }

    #[test]
    fn ten_degree_z_rotation() {
        let t = RigidTransform::new([0.0, 0.0, 10.0], [0.0; 3]);
        let got = rms_deviation(&t, &RmsConfig::default());
        let closed = 80.0 * (4.0 * (1.0 - 10f64.to_radians().cos()) / 5.0).sqrt();
        assert!((got - closed).abs() < 1e-12);
        assert!((got - 8.820).abs() < 1e-3, "{got}");
        let mc = monte_carlo_rms(&t, &RmsConfig::default(), 100_000, 1);
        assert!((mc - got).abs() / got < 0.01);
    }

    #[test]
    fn off_center_sphere_matches_monte_carlo() {
        let cfg = RmsConfig {
            center_offset: [10.0, -20.0, 5.0],
            ..RmsConfig::default()
        };
        let t = RigidTransform::new([4.0, -6.0, 3.0], [1.0, 2.0, -3.0]);
        let got = rms_deviation(&t, &cfg);
        let mc = monte_carlo_rms(&t, &cfg, 100_000, 2);
        assert!((mc - got).abs() / got < 0.01, "{mc} vs {got}");
        assert_ne!(got, rms_deviation(&t, &RmsConfig::default()));
    }

    fn trace_of(ts: Vec<RigidTransform>) -> MotionTrace {
        let n = ts.len();
        MotionTrace {
            seed: 0,
            phase_axis: 1,
            boundaries: (1..=n + 1).collect(),
            transforms: ts,
        }
    }

    #[test]
    fn trace_score_aggregation() {
        let cfg = RmsConfig::default();
        let id = trace_of(vec![RigidTransform::identity(); 3]);
        assert_eq!(trace_score(&id, &cfg), 0.0);
        let one = RigidTransform::new([1.0, 2.0, 3.0], [0.5, 0.0, 1.0]);
        assert_eq!(trace_score(&trace_of(vec![one]), &cfg), rms_deviation(&one, &cfg));
        let two = trace_of(vec![
            RigidTransform::new([0.0; 3], [2.0, 0.0, 0.0]),
            RigidTransform::new([0.0; 3], [0.0, 4.0, 0.0]),
        ]);
        assert_eq!(trace_score(&two, &cfg), 3.0);
        let max = RmsConfig {
            aggregation: Aggregation::Max,
            ..cfg
        };
        assert_eq!(trace_score(&two, &max), 4.0);
    }

    #[test]
    fn bin_width_and_centers() {
        let s = BinSpec::default();
        assert!((s.width() - 0.112).abs() < 1e-15);
        assert!(s.centers().windows(2).all(|w| w[1] > w[0]));
        assert!((s.center(0) - (-0.744)).abs() < 1e-12);
        assert_eq!(s.bin_index(-5.0), 0);
        assert_eq!(s.bin_index(100.0), 49);
        assert_eq!(s.bin_index(2.0), 25);
    }

    #[test]
    fn one_hot_in_small_sigma_limit() {
        let s = BinSpec {
            soft_sigma: Some(0.0),
            ..BinSpec::default()
        };
        let p = encode_soft(s.center(17), &s).unwrap();
        assert_eq!(p, SoftLabel::one_hot(50, 17));
        let tiny = BinSpec {
            soft_sigma: Some(1e-3),
            ..BinSpec::default()
        };
        let p = encode_soft(tiny.center(17), &tiny).unwrap();
        assert!((p.probs()[17] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn encode_matches_density_oracle() {
        let s = BinSpec::default();
        for x in [2.0, s.center(24), 0.37, -0.3, 4.7] {
            let p = encode_soft(x, &s).unwrap();
            let sigma = s.width();
            let dens: Vec<f64> = s
                .centers()
                .iter()
                .map(|c| (-(c - x).powi(2) / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt()))
                .collect();
            let z: f64 = dens.iter().sum();
            for (a, b) in p.probs().iter().zip(&dens) {
                assert!((a - b / z).abs() < 1e-12);
            }
            let argmax = (0..50).max_by(|&a, &b| p.probs()[a].total_cmp(&p.probs()[b])).unwrap();
            let nearest = (0..50)
                .min_by(|&a, &b| (s.center(a) - x).abs().total_cmp(&(s.center(b) - x).abs()))
                .unwrap();
            assert_eq!(argmax, nearest);
        }
        // exactly on a center: symmetric neighbours
        let c = s.center(24);
        let p = encode_soft(c, &s).unwrap();
        for d in 1..10 {
            assert!((p.probs()[24 - d] - p.probs()[24 + d]).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_range_mass_in_edge_bins() {
        let s = BinSpec::default();
        let p = encode_soft(1000.0, &s).unwrap();
        assert!((p.probs()[49] - 1.0).abs() < 1e-12);
        let p = encode_soft(-1000.0, &s).unwrap();
        assert!((p.probs()[0] - 1.0).abs() < 1e-12);
        assert!(encode_soft(f64::NAN, &s).is_err());
    }

    #[test]
    fn decode_basics() {
        let s = BinSpec::default();
        assert!((decode_expected(SoftLabel::one_hot(50, 7).probs(), &s) - s.center(7)).abs() < 1e-15);
        assert!((decode_expected(SoftLabel::uniform(50).probs(), &s) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn decode_encode_sweep() {
        let s = BinSpec::default();
        let mut x = 0.0;
        while x <= 4.5 + 1e-9 {
            let y = decode_expected(encode_soft(x, &s).unwrap().probs(), &s);
            assert!((y - x).abs() <= 0.112, "x={x} y={y}");
            x += 0.05;
        }
    }

    #[test]
    fn kl_known_values() {
        let p = SoftLabel::uniform(50);
        assert_eq!(kl_divergence(p.probs(), p.probs(), KL_EPSILON), 0.0);
        let oh = SoftLabel::one_hot(50, 3);
        let u = SoftLabel::uniform(50);
        assert!((kl_divergence(oh.probs(), u.probs(), KL_EPSILON) - 50f64.ln()).abs() < 1e-9);
        assert!((kl_divergence(&[1.0, 0.0], &[0.5, 0.5], KL_EPSILON) - 2f64.ln()).abs() < 1e-12);
        // predicted zero where target has mass: clamped, finite
        let v = kl_divergence(&[0.5, 0.5], &[1.0, 0.0], KL_EPSILON);
        assert!(v.is_finite() && v > 10.0);
    }

    #[test]
    fn soft_label_validation() {
        assert!(SoftLabel::new(vec![0.5, 0.5]).is_ok());
        assert!(SoftLabel::new(vec![0.5, 0.6]).is_err());
        assert!(SoftLabel::new(vec![1.5, -0.5]).is_err());
        assert!(SoftLabel::new(vec![]).is_err());
    }

    fn distribution(raw: Vec<f64>) -> Vec<f64> {
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|x| x / s).collect()
    }

    proptest! {
        #[test]
        fn rms_matches_monte_carlo(
            a in -15.0..15.0f64, b in -15.0..15.0f64, c in -15.0..15.0f64,
            tx in -15.0..15.0f64, ty in -15.0..15.0f64, tz in -15.0..15.0f64,
            seed in any::<u64>(),
        ) {
            let t = RigidTransform::new([a, b, c], [tx, ty, tz]);
            let cfg = RmsConfig::default();
            let got = rms_deviation(&t, &cfg);
            let mc = monte_carlo_rms(&t, &cfg, 20_000, seed);
            prop_assert!((mc - got).abs() <= 0.03 * got + 1e-9);
        }

        #[test]
        fn trace_score_is_permutation_invariant(
            shifts in prop::collection::vec(prop::array::uniform3(-5.0..5.0f64), 1..6),
            rots in prop::collection::vec(prop::array::uniform3(-5.0..5.0f64), 6),
            rotate_by in 0usize..6,
        ) {
            let ts: Vec<_> = shifts.iter().zip(&rots).map(|(s, r)| RigidTransform::new(*r, *s)).collect();
            let mut perm = ts.clone();
            perm.rotate_left(rotate_by % ts.len());
            perm.reverse();
            for agg in [Aggregation::Mean, Aggregation::Max] {
                let cfg = RmsConfig { aggregation: agg, ..RmsConfig::default() };
                let a = trace_score(&trace_of(ts.clone()), &cfg);
                let b = trace_score(&trace_of(perm.clone()), &cfg);
                prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
            }
        }

        #[test]
        fn translation_scaling_is_monotone(
            r in prop::array::uniform3(-10.0..10.0f64),
            t in prop::array::uniform3(-10.0..10.0f64),
            alpha in 1.0..5.0f64,
        ) {
            let cfg = RmsConfig::default();
            let base = rms_deviation(&RigidTransform::new(r, t), &cfg);
            let scaled = rms_deviation(&RigidTransform::new(r, t.map(|x| x * alpha)), &cfg);
            prop_assert!(scaled >= base - 1e-12);
        }

        #[test]
        fn encode_is_a_distribution(x in -10.0..10.0f64, sigma in 0.01..1.0f64) {
            let s = BinSpec { soft_sigma: Some(sigma), ..BinSpec::default() };
            let p = encode_soft(x, &s).unwrap();
            prop_assert!(p.probs().iter().all(|v| *v >= 0.0));
            prop_assert!((p.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn decode_is_linear(
            a in prop::collection::vec(0.01..1.0f64, 50),
            b in prop::collection::vec(0.01..1.0f64, 50),
            w in 0.0..1.0f64,
        ) {
            let s = BinSpec::default();
            let (p, q) = (distribution(a), distribution(b));
            let mix: Vec<f64> = p.iter().zip(&q).map(|(x, y)| w * x + (1.0 - w) * y).collect();
            let lhs = decode_expected(&mix, &s);
            let rhs = w * decode_expected(&p, &s) + (1.0 - w) * decode_expected(&q, &s);
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }

        #[test]
        fn kl_nonnegative_zero_only_at_equality(
            a in prop::collection::vec(0.0..1.0f64, 2..20),
            seed in any::<u64>(),
        ) {
            prop_assume!(a.iter().sum::<f64>() > 0.0);
            let p = distribution(a);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = distribution((0..p.len()).map(|_| rng.gen_range(0.01..1.0)).collect());
            let d = kl_divergence(&p, &q, KL_EPSILON);
            prop_assert!(d >= 0.0);
            prop_assert!(kl_divergence(&p, &p, KL_EPSILON).abs() < 1e-12);
            let diff: f64 = p.iter().zip(&q).map(|(x, y)| (x - y).abs()).sum();
            if diff > 1e-3 {
                prop_assert!(d > 0.0);
            }
        }
    }
}
