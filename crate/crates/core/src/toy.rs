//! Self-contained toy fixtures built from head phantoms: a motion-score
//! regression set made by the full generation pipeline, and an imbalanced
//! 3-class QC set whose classes are motion-score bands.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_pipeline_using, AugmentConfig};
use crate::dataset::{
    read_manifest, run_generation, write_manifest, GenerationConfig, GenerationReport, ManifestEntry, Split,
};
use crate::error::{Error, Result};
use crate::kspace::{sample_motion_trace, Fft3, MotionParams};
use crate::labels::{trace_score, RmsConfig};
use crate::phantom::head;
use crate::probe::{
    extract_features_using, features_from_labels, select_split, write_feature_csv, FeatureRow, FeatureVector,
    TrainConfig,
};
use crate::seed::derive_seed;
use crate::volume::write_volume;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    /// Source phantom grid and isotropic spacing (mm).
    pub source_dims: [usize; 3],
    pub spacing: f64,
    pub roi: [usize; 3],
    pub train_sources: usize,
    pub val_sources: usize,
    pub passes: u64,
    pub seed: u64,
    pub workers: usize,
    /// Merged-class counts (poor/fair, good, excellent) per split.
    pub qc_train: [usize; 3],
    pub qc_val: [usize; 3],
    pub qc_test: [usize; 3],
    /// Motion-score cut points of the QC classes: class 2 below the first,
    /// class 1 between, class 0 at or above the second.
    pub qc_score_cuts: [f64; 2],
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            source_dims: [64, 64, 64],
            spacing: 2.5,
            roi: [64, 64, 64],
            train_sources: 40,
            val_sources: 10,
            passes: 5,
            seed: 2024,
            workers: 1,
            qc_train: [7, 38, 70],
            qc_val: [1, 12, 26],
            qc_test: [9, 90, 125],
            qc_score_cuts: [1.5, 3.0],
        }
    }
}

impl ToyConfig {
    pub fn augment(&self) -> AugmentConfig {
        let mut a = AugmentConfig {
            roi: self.roi,
            ..AugmentConfig::default()
        };
        // keep the warp within a couple of voxels at this resolution
        a.elastic.max_displacement_mm = 2.0 * self.spacing;
        a
    }

    /// Pretraining settings for the toy set. The step size is raised well
    /// above the full-scale preset since the toy has ~200 samples and a
    /// small network; the rest follows the preset.
    pub fn pretrain_config() -> TrainConfig {
        TrainConfig {
            lr: 1e-3,
            batch_size: 32,
            ..TrainConfig::pretrain()
        }
    }
}

/// Features and targets of one split.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Split2<T> {
    pub features: Vec<Vec<f64>>,
    pub targets: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct MotionToy {
    pub manifest: PathBuf,
    pub report: GenerationReport,
    pub train: Split2<f64>,
    pub val: Split2<f64>,
    /// Every generated volume, ids relative to the generation directory.
    pub rows: Vec<FeatureRow>,
}

/// Write phantom sources and a manifest with a subject-level split.
pub fn write_sources(dir: &Path, cfg: &ToyConfig) -> Result<Vec<ManifestEntry>> {
    let src = dir.join("sources");
    std::fs::create_dir_all(&src).map_err(|e| Error::io(&src, e))?;
    let n = cfg.train_sources + cfg.val_sources;
    (0..n)
        .map(|i| {
            let path = src.join(format!("sub-{i:03}_T1w.nii.gz"));
            if !path.exists() {
                let v = head(cfg.source_dims, cfg.spacing, derive_seed(cfg.seed, "phantom", i as u64));
                write_volume(&v, &path)?;
            }
            let mut e = ManifestEntry::new(&format!("sub-{i:03}"), &format!("site-{}", i % 4), path);
            e.qc_score = Some(4);
            e.split = if i < cfg.train_sources { Split::Train } else { Split::Val };
            Ok(e)
        })
        .collect()
}

/// Build (or resume) the motion-score toy set under `dir` and extract
/// features from every generated volume.
pub fn build_motion_toy(dir: &Path, cfg: &ToyConfig) -> Result<MotionToy> {
    let entries = write_sources(dir, cfg)?;
    let manifest = dir.join("manifest.csv");
    write_manifest(&entries, &manifest)?;
    let entries = read_manifest(&manifest)?;
    let gen = GenerationConfig {
        augment: cfg.augment(),
        passes: cfg.passes,
        master_seed: cfg.seed,
        workers: cfg.workers,
        ..GenerationConfig::default()
    };
    let out = dir.join("generated");
    let report = run_generation(&entries, &gen, &out)?;
    let rows = features_from_labels(&out, &report.labels_manifest)?;
    let part = |split| {
        let (features, targets) = select_split(&rows, split);
        Split2 { features, targets }
    };
    Ok(MotionToy {
        manifest,
        report,
        train: part(Split::Train),
        val: part(Split::Val),
        rows,
    })
}

#[derive(Debug, Clone)]
pub struct QcToy {
    pub train: Split2<usize>,
    pub val: Split2<usize>,
    pub test: Split2<usize>,
}

impl ToyConfig {
    /// QC class a rater would assign to a volume with this motion score.
    pub fn qc_class(&self, score: f64) -> usize {
        let [lo, hi] = self.qc_score_cuts;
        if score >= hi {
            0
        } else if score >= lo {
            1
        } else {
            2
        }
    }
}

/// The first `n` pipeline seeds whose sampled trace falls into `class`.
/// Traces are cheap, so rejection happens before any image work.
fn qc_seeds(cfg: &ToyConfig, name: &str, class: usize, n: usize) -> Result<Vec<u64>> {
    let motion = MotionParams::default();
    let rms = RmsConfig::default();
    let mut out = Vec::with_capacity(n);
    for i in 0.. {
        if out.len() == n {
            break;
        }
        if i > 1000 * (n as u64 + 1) {
            return Err(Error::Generation(format!("QC class {class} is unreachable with the current cuts")));
        }
        let seed = derive_seed(cfg.seed, &format!("qc-{name}-{class}"), i);
        let trace = sample_motion_trace(&motion, cfg.roi, seed)?;
        if cfg.qc_class(trace_score(&trace, &rms)) == class {
            out.push(seed);
        }
    }
    Ok(out)
}

/// One QC volume: a fresh phantom through the full pipeline.
fn qc_sample(cfg: &ToyConfig, seed: u64, plan: &mut Fft3) -> Result<FeatureVector> {
    let v = head(cfg.source_dims, cfg.spacing, derive_seed(seed, "phantom", 0));
    let out = apply_pipeline_using(&v, &cfg.augment(), &MotionParams::default(), seed, plan)?;
    extract_features_using(&out.volume, plan)
}

fn qc_split(cfg: &ToyConfig, name: &str, counts: [usize; 3]) -> Result<Split2<usize>> {
    let mut jobs: Vec<(usize, u64)> = Vec::new();
    for (c, &n) in counts.iter().enumerate() {
        jobs.extend(qc_seeds(cfg, name, c, n)?.into_iter().map(|s| (c, s)));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build()
        .map_err(|e| Error::arg(format!("thread pool: {e}")))?;
    let feats: Vec<Vec<f64>> = pool.install(|| {
        jobs.par_iter()
            .map_init(
                || Fft3::new(cfg.roi),
                |plan, &(_, seed)| qc_sample(cfg, seed, plan).map(|f| f.values),
            )
            .collect::<Result<_>>()
    })?;
    Ok(Split2 {
        features: feats,
        targets: jobs.iter().map(|j| j.0).collect(),
    })
}

impl QcToy {
    pub fn rows(&self) -> Vec<FeatureRow> {
        [(Split::Train, &self.train), (Split::Val, &self.val), (Split::Test, &self.test)]
            .into_iter()
            .flat_map(|(split, part)| {
                part.features.iter().zip(&part.targets).enumerate().map(move |(i, (f, &c))| FeatureRow {
                    id: format!("qc-{split}-{i:03}"),
                    split,
                    target: c as f64,
                    values: f.clone(),
                })
            })
            .collect()
    }
}

/// File names of a toy fixture inside its directory.
pub const MOTION_FEATURES: &str = "motion_features.csv";
pub const QC_FEATURES: &str = "qc_features.csv";

/// Build both toy sets under `dir` and write their feature tables.
pub fn write_toy_fixture(dir: &Path, cfg: &ToyConfig) -> Result<(MotionToy, QcToy)> {
    let motion = build_motion_toy(dir, cfg)?;
    write_feature_csv(&motion.rows, dir.join(MOTION_FEATURES))?;
    let qc = build_qc_toy(cfg)?;
    write_feature_csv(&qc.rows(), dir.join(QC_FEATURES))?;
    Ok((motion, qc))
}

/// Build the imbalanced QC toy set in memory. Classes are bands of the
/// motion score, so the pretraining target carries the class signal.
pub fn build_qc_toy(cfg: &ToyConfig) -> Result<QcToy> {
    Ok(QcToy {
        train: qc_split(cfg, "train", cfg.qc_train)?,
        val: qc_split(cfg, "val", cfg.qc_val)?,
        test: qc_split(cfg, "test", cfg.qc_test)?,
    })
}
