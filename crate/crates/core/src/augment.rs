//! Non-motion random transforms and the full generation pipeline.
//!
//! Pipeline order is fixed: normalize, elastic, scale, sagittal flip, bias
//! field, gamma, ROI crop, k-space motion, renormalize. Every random draw
//! is captured in an [`AugmentRecord`]; [`replay_pipeline`] applies a record
//! without touching an RNG, and [`apply_pipeline`] is "sample a record, then
//! replay it", so replay is bitwise identical by construction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kspace::{corrupt_with_motion_using, sample_motion_trace, Fft3, MotionParams, MotionTrace};
use crate::seed::derive_seed;
use crate::volume::{
    crop_roi, normalize_intensity, resample_affine, scaling_about, Interpolation, Volume3D,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ElasticConfig {
    pub enabled: bool,
    /// Control points per axis (>= 2).
    pub grid: [usize; 3],
    pub max_displacement_mm: f64,
}

impl Default for ElasticConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            grid: [7, 7, 7],
            max_displacement_mm: 8.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BiasConfig {
    pub enabled: bool,
    pub order: usize,
    pub coeff_range: f64,
}

impl Default for BiasConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            order: 3,
            coeff_range: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GammaConfig {
    pub enabled: bool,
    pub log_gamma_range: f64,
}

impl Default for GammaConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            log_gamma_range: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlipConfig {
    pub enabled: bool,
    pub probability: f64,
}

impl Default for FlipConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            probability: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScaleConfig {
    pub enabled: bool,
    pub range: [f64; 2],
}

impl Default for ScaleConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            range: [0.9, 1.1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Percentiles mapped to 0 and 1 by the first and only normalization.
    pub normalize_percentiles: [f64; 2],
    pub elastic: ElasticConfig,
    pub scale: ScaleConfig,
    pub flip: FlipConfig,
    pub bias: BiasConfig,
    pub gamma: GammaConfig,
    pub roi: [usize; 3],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            normalize_percentiles: [crate::volume::DEFAULT_LO_PCT, crate::volume::DEFAULT_HI_PCT],
            elastic: ElasticConfig::default(),
            scale: ScaleConfig::default(),
            flip: FlipConfig::default(),
            bias: BiasConfig::default(),
            gamma: GammaConfig::default(),
            roi: [160, 192, 160],
        }
    }
}

impl AugmentConfig {
    /// Every random stage off; the pipeline reduces to normalize + crop.
    pub fn disabled(roi: [usize; 3]) -> Self {
        let mut c = Self {
            roi,
            ..Self::default()
        };
        c.elastic.enabled = false;
        c.scale.enabled = false;
        c.flip.enabled = false;
        c.bias.enabled = false;
        c.gamma.enabled = false;
        c
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.normalize_percentiles;
        if !(0.0..=100.0).contains(&lo) || !(0.0..=100.0).contains(&hi) || lo >= hi {
            return Err(Error::arg("normalize_percentiles must satisfy 0 <= lo < hi <= 100"));
        }
        if self.elastic.grid.iter().any(|&g| g < 2) {
            return Err(Error::arg("elastic grid needs >= 2 control points per axis"));
        }
        let nonneg = |x: f64| x >= 0.0 && x.is_finite();
        if !nonneg(self.elastic.max_displacement_mm)
            || !nonneg(self.bias.coeff_range)
            || !nonneg(self.gamma.log_gamma_range)
        {
            return Err(Error::arg("augmentation ranges must be finite and nonnegative"));
        }
        let [s0, s1] = self.scale.range;
        if !(s0 > 0.0 && s1 >= s0 && s1.is_finite()) {
            return Err(Error::arg("scale range must be positive and ordered"));
        }
        if !(0.0..=1.0).contains(&self.flip.probability) {
            return Err(Error::arg("flip probability must be in [0, 1]"));
        }
        if self.roi.iter().any(|&r| r == 0) {
            return Err(Error::arg("roi must be positive"));
        }
        Ok(())
    }
}

/// Control-point displacements (mm) of an elastic warp, x-fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElasticRecord {
    pub grid: [usize; 3],
    pub displacements_mm: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasRecord {
    pub order: usize,
    /// One coefficient per monomial, in [`monomials`] order.
    pub coefficients: Vec<f64>,
}

/// Every random parameter drawn by one pipeline pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentRecord {
    pub normalize_percentiles: [f64; 2],
    pub elastic: Option<ElasticRecord>,
    pub scale: Option<f64>,
    pub flip: Option<bool>,
    pub bias: Option<BiasRecord>,
    pub log_gamma: Option<f64>,
    pub roi: [usize; 3],
}

fn symmetric(rng: &mut ChaCha8Rng, range: f64) -> f64 {
    if range == 0.0 {
        0.0
    } else {
        rng.gen_range(-range..=range)
    }
}

// ---------------------------------------------------------------- elastic

pub fn sample_elastic(grid: [usize; 3], max_disp: f64, seed: u64) -> ElasticRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = grid[0] * grid[1] * grid[2];
    ElasticRecord {
        grid,
        displacements_mm: (0..n)
            .map(|_| std::array::from_fn(|_| symmetric(&mut rng, max_disp)))
            .collect(),
    }
}

/// Control-grid coordinate of voxel index `i` on an axis with `n` voxels.
#[inline]
fn control_coord(i: usize, n: usize, g: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        i as f64 * (g - 1) as f64 / (n - 1) as f64
    }
}

/// Dense displacement field (mm) for a grid of `dims`, trilinearly
/// upsampled from the control points.
pub fn dense_displacement(dims: [usize; 3], rec: &ElasticRecord) -> Vec<[f64; 3]> {
    let mut out = Vec::with_capacity(dims.iter().product());
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                out.push(displacement_at(rec, dims, i, j, k));
            }
        }
    }
    out
}

#[inline]
fn displacement_at(rec: &ElasticRecord, dims: [usize; 3], i: usize, j: usize, k: usize) -> [f64; 3] {
    let g = rec.grid;
    let pos = [
        control_coord(i, dims[0], g[0]),
        control_coord(j, dims[1], g[1]),
        control_coord(k, dims[2], g[2]),
    ];
    let split = |x: f64, n: usize| {
        let i0 = (x.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, x - i0 as f64)
    };
    let (x0, x1, fx) = split(pos[0], g[0]);
    let (y0, y1, fy) = split(pos[1], g[1]);
    let (z0, z1, fz) = split(pos[2], g[2]);
    let at = |a: usize, b: usize, c: usize| rec.displacements_mm[a + g[0] * (b + g[1] * c)];
    let mut d = [0.0; 3];
    for (corner, w) in [
        (at(x0, y0, z0), (1.0 - fx) * (1.0 - fy) * (1.0 - fz)),
        (at(x1, y0, z0), fx * (1.0 - fy) * (1.0 - fz)),
        (at(x0, y1, z0), (1.0 - fx) * fy * (1.0 - fz)),
        (at(x1, y1, z0), fx * fy * (1.0 - fz)),
        (at(x0, y0, z1), (1.0 - fx) * (1.0 - fy) * fz),
        (at(x1, y0, z1), fx * (1.0 - fy) * fz),
        (at(x0, y1, z1), (1.0 - fx) * fy * fz),
        (at(x1, y1, z1), fx * fy * fz),
    ] {
        for a in 0..3 {
            d[a] += w * corner[a];
        }
    }
    d
}

/// Warp by inverse-field sampling: `out(x) = v(x + d(x))`, trilinear.
pub fn apply_elastic(v: &Volume3D, rec: &ElasticRecord) -> Result<Volume3D> {
    if rec.grid.iter().any(|&g| g < 2) || rec.displacements_mm.len() != rec.grid.iter().product::<usize>() {
        return Err(Error::arg("malformed elastic record"));
    }
    if rec.displacements_mm.iter().all(|d| *d == [0.0; 3]) {
        return Ok(v.clone());
    }
    let dims = v.dims();
    let sp = v.spacing();
    let mut out = Vec::with_capacity(v.len());
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let d = displacement_at(rec, dims, i, j, k);
                out.push(crate::volume::trilinear(
                    v,
                    i as f64 + d[0] / sp[0],
                    j as f64 + d[1] / sp[1],
                    k as f64 + d[2] / sp[2],
                    0.0,
                ));
            }
        }
    }
    v.with_data(out)
}

pub fn elastic_deform(v: &Volume3D, grid: [usize; 3], max_disp: f64, seed: u64) -> Result<Volume3D> {
    if grid.iter().any(|&g| g < 2) {
        return Err(Error::arg("elastic grid needs >= 2 control points per axis"));
    }
    apply_elastic(v, &sample_elastic(grid, max_disp, seed))
}

// ------------------------------------------------------------------ scale

pub fn apply_scale(v: &Volume3D, s: f64) -> Result<Volume3D> {
    if s == 1.0 {
        return Ok(v.clone());
    }
    resample_affine(v, &scaling_about(s, v.world_center()), Interpolation::Trilinear)
}

pub fn random_scale(v: &Volume3D, range: [f64; 2], seed: u64) -> Result<Volume3D> {
    apply_scale(v, sample_scale(range, seed))
}

fn sample_scale(range: [f64; 2], seed: u64) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        ChaCha8Rng::seed_from_u64(seed).gen_range(range[0]..=range[1])
    }
}

// ------------------------------------------------------------------- flip

/// Reverse the x (left-right) axis. An involution.
pub fn sagittal_flip(v: &Volume3D) -> Volume3D {
    let nx = v.dims()[0];
    let mut data = v.data().to_vec();
    for row in data.chunks_exact_mut(nx) {
        row.reverse();
    }
    v.with_data(data).expect("same data, permuted")
}

// ------------------------------------------------------------------- bias

/// Exponent triples `(a, b, c)` with `a + b + c <= order`, by total degree.
pub fn monomials(order: usize) -> Vec<[usize; 3]> {
    let mut m = Vec::new();
    for d in 0..=order {
        for a in (0..=d).rev() {
            for b in (0..=d - a).rev() {
                m.push([a, b, d - a - b]);
            }
        }
    }
    m
}

pub fn sample_bias(order: usize, coeff_range: f64, seed: u64) -> BiasRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    BiasRecord {
        order,
        coefficients: monomials(order).iter().map(|_| symmetric(&mut rng, coeff_range)).collect(),
    }
}

#[inline]
fn normalized_coord(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        2.0 * i as f64 / (n - 1) as f64 - 1.0
    }
}

/// Multiplicative field `exp(P(x̃))` over coordinates normalized to [-1, 1]³.
pub fn bias_field_values(dims: [usize; 3], rec: &BiasRecord) -> Result<Vec<f64>> {
    let mono = monomials(rec.order);
    if mono.len() != rec.coefficients.len() {
        return Err(Error::arg(format!(
            "bias record has {} coefficients, order {} needs {}",
            rec.coefficients.len(),
            rec.order,
            mono.len()
        )));
    }
    let powers = |n: usize| -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| {
                let x = normalized_coord(i, n);
                (0..=rec.order).scan(1.0, |acc, _| {
                    let cur = *acc;
                    *acc *= x;
                    Some(cur)
                })
                .collect()
            })
            .collect()
    };
    let (px, py, pz) = (powers(dims[0]), powers(dims[1]), powers(dims[2]));
    let mut out = Vec::with_capacity(dims.iter().product());
    for pzk in &pz {
        for pyj in &py {
            for pxi in &px {
                let p: f64 = mono
                    .iter()
                    .zip(&rec.coefficients)
                    .map(|(m, c)| c * pxi[m[0]] * pyj[m[1]] * pzk[m[2]])
                    .sum();
                out.push(p.exp());
            }
        }
    }
    Ok(out)
}

pub fn apply_bias(v: &Volume3D, rec: &BiasRecord) -> Result<Volume3D> {
    if rec.coefficients.iter().all(|&c| c == 0.0) {
        return Ok(v.clone());
    }
    let field = bias_field_values(v.dims(), rec)?;
    v.with_data(v.data().iter().zip(&field).map(|(x, f)| (*x as f64 * f) as f32).collect())
}

pub fn bias_field(v: &Volume3D, order: usize, coeff_range: f64, seed: u64) -> Result<Volume3D> {
    apply_bias(v, &sample_bias(order, coeff_range, seed))
}

// ------------------------------------------------------------------ gamma

pub fn apply_gamma(v: &Volume3D, log_gamma: f64) -> Result<Volume3D> {
    if v.data().iter().any(|x| !(0.0..=1.0).contains(x)) {
        return Err(Error::arg("gamma contrast needs values in [0, 1]"));
    }
    if log_gamma == 0.0 {
        return Ok(v.clone());
    }
    let g = log_gamma.exp();
    v.with_data(v.data().iter().map(|&x| (x as f64).powf(g) as f32).collect())
}

/// `v -> v^γ` with `γ = exp(u)`, `u ~ U(-range, range)`.
pub fn gamma_contrast(v: &Volume3D, log_gamma_range: f64, seed: u64) -> Result<Volume3D> {
    let u = symmetric(&mut ChaCha8Rng::seed_from_u64(seed), log_gamma_range);
    apply_gamma(v, u)
}

// --------------------------------------------------------------- pipeline

/// Divide by the maximum when it exceeds 1 and clamp below at 0.
fn squash_unit(v: &Volume3D) -> Result<Volume3D> {
    let (_, max) = v.min_max();
    let scale = if max > 1.0 { 1.0 / max as f64 } else { 1.0 };
    v.with_data(
        v.data()
            .iter()
            .map(|&x| ((x as f64 * scale) as f32).clamp(0.0, 1.0))
            .collect(),
    )
}

/// Draw every random parameter of one pipeline pass. Each stage has its own
/// derived seed; the motion trace uses `seed` itself.
pub fn sample_record(cfg: &AugmentConfig, seed: u64) -> AugmentRecord {
    AugmentRecord {
        normalize_percentiles: cfg.normalize_percentiles,
        elastic: cfg.elastic.enabled.then(|| {
            sample_elastic(
                cfg.elastic.grid,
                cfg.elastic.max_displacement_mm,
                derive_seed(seed, "elastic", 0),
            )
        }),
        scale: cfg
            .scale
            .enabled
            .then(|| sample_scale(cfg.scale.range, derive_seed(seed, "scale", 0))),
        flip: cfg.flip.enabled.then(|| {
            ChaCha8Rng::seed_from_u64(derive_seed(seed, "flip", 0)).gen_bool(cfg.flip.probability)
        }),
        bias: cfg
            .bias
            .enabled
            .then(|| sample_bias(cfg.bias.order, cfg.bias.coeff_range, derive_seed(seed, "bias", 0))),
        log_gamma: cfg.gamma.enabled.then(|| {
            symmetric(
                &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "gamma", 0)),
                cfg.gamma.log_gamma_range,
            )
        }),
        roi: cfg.roi,
    }
}

/// Everything a pass produced.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub volume: Volume3D,
    pub trace: MotionTrace,
    pub record: AugmentRecord,
}

/// Run one random pass of the generation pipeline.
pub fn apply_pipeline(v: &Volume3D, cfg: &AugmentConfig, motion: &MotionParams, seed: u64) -> Result<PipelineOutput> {
    let mut plan = Fft3::new(cfg.roi);
    apply_pipeline_using(v, cfg, motion, seed, &mut plan)
}

pub fn apply_pipeline_using(
    v: &Volume3D,
    cfg: &AugmentConfig,
    motion: &MotionParams,
    seed: u64,
    plan: &mut Fft3,
) -> Result<PipelineOutput> {
    cfg.validate()?;
    let record = sample_record(cfg, seed);
    let trace = sample_motion_trace(motion, cfg.roi, seed)?;
    let volume = replay_pipeline_using(v, &record, &trace, plan)?;
    Ok(PipelineOutput { volume, trace, record })
}

/// Apply recorded parameters and a motion trace; no randomness involved.
pub fn replay_pipeline(v: &Volume3D, record: &AugmentRecord, trace: &MotionTrace) -> Result<Volume3D> {
    let mut plan = Fft3::new(record.roi);
    replay_pipeline_using(v, record, trace, &mut plan)
}

fn replay_pipeline_using(
    v: &Volume3D,
    record: &AugmentRecord,
    trace: &MotionTrace,
    plan: &mut Fft3,
) -> Result<Volume3D> {
    let [lo, hi] = record.normalize_percentiles;
    let mut x = normalize_intensity(v, lo, hi)?;
    if let Some(e) = &record.elastic {
        x = apply_elastic(&x, e)?;
    }
    if let Some(s) = record.scale {
        x = apply_scale(&x, s)?;
    }
    if record.flip == Some(true) {
        x = sagittal_flip(&x);
    }
    if let Some(b) = &record.bias {
        x = squash_unit(&apply_bias(&x, b)?)?;
    }
    if let Some(u) = record.log_gamma {
        x = apply_gamma(&x, u)?;
    }
    x = crop_roi(&x, record.roi)?;
    x = corrupt_with_motion_using(&x, trace, plan)?;
    squash_unit(&x)
}
