use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ManifestEntry, Split};
use crate::augment::{apply_pipeline_using, AugmentConfig, AugmentRecord};
use crate::error::{Error, Result};
use crate::kspace::{Fft3, MotionParams, MotionTrace};
use crate::labels::{trace_score, BinSpec, RmsConfig};
use crate::seed::derive_seed;
use crate::volume::{read_volume, write_volume_with, Volume3D, ROTATION_CONVENTION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    pub augment: AugmentConfig,
    pub motion: MotionParams,
    pub rms: RmsConfig,
    pub bins: BinSpec,
    pub passes: u64,
    pub master_seed: u64,
    pub workers: usize,
    /// The run fails when more than this fraction of jobs fail.
    pub max_failure_fraction: f64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            augment: AugmentConfig::default(),
            motion: MotionParams::default(),
            rms: RmsConfig::default(),
            bins: BinSpec::default(),
            passes: 300,
            master_seed: 0,
            workers: 1,
            max_failure_fraction: 0.05,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        self.augment.validate()?;
        self.motion.validate()?;
        self.rms.validate()?;
        self.bins.validate()?;
        if self.passes == 0 {
            return Err(Error::arg("passes must be >= 1"));
        }
        if self.workers == 0 {
            return Err(Error::arg("workers must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.max_failure_fraction) {
            return Err(Error::arg("max_failure_fraction must be in [0, 1]"));
        }
        Ok(())
    }
}

/// Location-independent identity of a source: site, subject and file name.
/// Moving a dataset to another directory keeps its seeds and output names.
pub fn source_key(source: &ManifestEntry) -> String {
    let name = source.path.file_name().map(|n| n.to_string_lossy()).unwrap_or_default();
    format!("{}/{}/{}", source.site_id, source.subject_id, name)
}

/// Seed of one (source, pass) job, keyed by [`source_key`].
pub fn job_seed(master_seed: u64, source: &ManifestEntry, pass: u64) -> u64 {
    derive_seed(master_seed, &source_key(source), pass)
}

#[derive(Debug, Clone)]
pub struct GenerationJob {
    pub source: usize,
    pub pass_index: u64,
    pub seed: u64,
    /// Relative to the output directory.
    pub volume: PathBuf,
    pub sidecar: PathBuf,
}

/// Per-volume JSON record: the motion trace, its score and every augment
/// parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    #[serde(flatten)]
    pub trace: MotionTrace,
    pub rms_score: f64,
    pub rotation_convention: String,
    pub source: String,
    pub pass_index: u64,
    pub split: Split,
    pub augment: AugmentRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobFailure {
    pub source: String,
    pub pass_index: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreHistogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRow {
    pub path: String,
    pub sidecar: String,
    pub rms_score: f64,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub sources: usize,
    pub passes: u64,
    pub jobs: usize,
    /// Outputs on disk after the run, fresh or resumed.
    pub outputs: usize,
    pub generated: usize,
    pub resumed: usize,
    pub failed: usize,
    pub per_split: BTreeMap<String, usize>,
    pub histogram: ScoreHistogram,
    pub failures: Vec<JobFailure>,
    pub labels_manifest: String,
    pub elapsed_s: f64,
}

enum Outcome {
    Generated(f64),
    Resumed(f64),
    Failed(String),
}

fn source_tag(source: &ManifestEntry) -> String {
    let name = source.path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let stem = name.trim_end_matches(".gz").trim_end_matches(".nii").to_owned();
    let digest = Sha256::digest(source_key(source).as_bytes());
    let hex: String = digest[..4].iter().map(|b| format!("{b:02x}")).collect();
    format!("{stem}_{hex}")
}

fn plan_jobs(entries: &[ManifestEntry], cfg: &GenerationConfig) -> Vec<GenerationJob> {
    let mut jobs = Vec::with_capacity(entries.len() * cfg.passes as usize);
    for (i, e) in entries.iter().enumerate() {
        let tag = source_tag(e);
        for pass in 0..cfg.passes {
            let name = format!("{tag}_p{pass:04}");
            jobs.push(GenerationJob {
                source: i,
                pass_index: pass,
                seed: job_seed(cfg.master_seed, e, pass),
                volume: Path::new("volumes").join(format!("{name}.nii.gz")),
                sidecar: Path::new("volumes").join(format!("{name}.json")),
            });
        }
    }
    jobs
}

fn write_atomic(path: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    write(&tmp)?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn existing_score(out_dir: &Path, job: &GenerationJob) -> Option<f64> {
    if !out_dir.join(&job.volume).is_file() {
        return None;
    }
    let text = std::fs::read_to_string(out_dir.join(&job.sidecar)).ok()?;
    let sidecar: Sidecar = serde_json::from_str(&text).ok()?;
    (sidecar.trace.seed == job.seed).then_some(sidecar.rms_score)
}

struct Worker {
    plan: Option<Fft3>,
    cache: Option<(usize, Arc<Volume3D>)>,
}

impl Worker {
    fn source(&mut self, idx: usize, entry: &ManifestEntry) -> Result<Arc<Volume3D>> {
        if let Some((i, v)) = &self.cache {
            if *i == idx {
                return Ok(v.clone());
            }
        }
        let v = Arc::new(read_volume(&entry.path)?);
        self.cache = Some((idx, v.clone()));
        Ok(v)
    }
}

fn run_job(
    w: &mut Worker,
    entries: &[ManifestEntry],
    cfg: &GenerationConfig,
    out_dir: &Path,
    job: &GenerationJob,
) -> Result<Outcome> {
    if let Some(score) = existing_score(out_dir, job) {
        return Ok(Outcome::Resumed(score));
    }
    let entry = &entries[job.source];
    let src = w.source(job.source, entry)?;
    let plan = w.plan.get_or_insert_with(|| Fft3::new(cfg.augment.roi));
    let out = apply_pipeline_using(&src, &cfg.augment, &cfg.motion, job.seed, plan)?;
    let rms_score = trace_score(&out.trace, &cfg.rms);
    let sidecar = Sidecar {
        trace: out.trace,
        rms_score,
        rotation_convention: ROTATION_CONVENTION.to_owned(),
        source: entry.path.to_string_lossy().into_owned(),
        pass_index: job.pass_index,
        split: entry.split,
        augment: out.record,
    };
    let vol_path = out_dir.join(&job.volume);
    let car_path = out_dir.join(&job.sidecar);
    // the sidecar goes last: a volume without one is never treated as done
    let _ = std::fs::remove_file(&car_path);
    write_atomic(&vol_path, |p| write_volume_with(&out.volume, p, true))?;
    let json = serde_json::to_string_pretty(&sidecar)?;
    write_atomic(&car_path, |p| std::fs::write(p, json.as_bytes()).map_err(|e| Error::io(p, e)))?;
    Ok(Outcome::Generated(rms_score))
}

/// Generate `passes` corrupted volumes per entry into `out_dir/volumes`,
/// then write `labels.csv` and `report.json` into `out_dir`.
///
/// Jobs whose volume and seed-matching sidecar already exist are skipped.
/// Results are reduced in job order, so the labels manifest does not depend
/// on the worker count.
pub fn run_generation(entries: &[ManifestEntry], cfg: &GenerationConfig, out_dir: &Path) -> Result<GenerationReport> {
    cfg.validate()?;
    let mut keys = BTreeSet::new();
    if let Some(dup) = entries.iter().map(source_key).find(|k| !keys.insert(k.clone())) {
        return Err(Error::arg(format!("two manifest rows share site, subject and file name: {dup}")));
    }
    let start = Instant::now();
    let vol_dir = out_dir.join("volumes");
    std::fs::create_dir_all(&vol_dir).map_err(|e| Error::io(&vol_dir, e))?;
    let jobs = plan_jobs(entries, cfg);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::arg(format!("thread pool: {e}")))?;
    let outcomes: Vec<Outcome> = pool.install(|| {
        jobs.par_iter()
            .map_init(
                || Worker {
                    plan: None,
                    cache: None,
                },
                |w, job| match run_job(w, entries, cfg, out_dir, job) {
                    Ok(o) => o,
                    Err(e) => Outcome::Failed(e.to_string()),
                },
            )
            .collect()
    });

    let mut report = GenerationReport {
        sources: entries.len(),
        passes: cfg.passes,
        jobs: jobs.len(),
        outputs: 0,
        generated: 0,
        resumed: 0,
        failed: 0,
        per_split: BTreeMap::new(),
        histogram: ScoreHistogram {
            lo: cfg.bins.lo,
            hi: cfg.bins.hi,
            counts: vec![0; cfg.bins.n_bins],
        },
        failures: Vec::new(),
        labels_manifest: "labels.csv".to_owned(),
        elapsed_s: 0.0,
    };
    let labels_path = out_dir.join("labels.csv");
    let mut labels = csv::Writer::from_path(&labels_path)?;
    for (job, outcome) in jobs.iter().zip(outcomes) {
        let entry = &entries[job.source];
        let score = match outcome {
            Outcome::Generated(s) => {
                report.generated += 1;
                s
            }
            Outcome::Resumed(s) => {
                report.resumed += 1;
                s
            }
            Outcome::Failed(error) => {
                log::warn!("job {:?} pass {} failed: {error}", entry.path, job.pass_index);
                report.failed += 1;
                report.failures.push(JobFailure {
                    source: entry.path.to_string_lossy().into_owned(),
                    pass_index: job.pass_index,
                    error,
                });
                continue;
            }
        };
        report.outputs += 1;
        *report.per_split.entry(entry.split.to_string()).or_default() += 1;
        report.histogram.counts[cfg.bins.bin_index(score)] += 1;
        labels.serialize(LabelRow {
            path: job.volume.to_string_lossy().into_owned(),
            sidecar: job.sidecar.to_string_lossy().into_owned(),
            rms_score: score,
            split: entry.split,
        })?;
    }
    labels.flush().map_err(|e| Error::io(&labels_path, e))?;
    report.elapsed_s = start.elapsed().as_secs_f64();
    let report_path = out_dir.join("report.json");
    std::fs::write(&report_path, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&report_path, e))?;
    log::info!(
        "generation: {} generated, {} resumed, {} failed in {:.1}s",
        report.generated,
        report.resumed,
        report.failed,
        report.elapsed_s
    );
    if report.jobs > 0 && report.failed as f64 > cfg.max_failure_fraction * report.jobs as f64 {
        return Err(Error::Generation(format!(
            "{} of {} jobs failed (limit {}); see {}",
            report.failed,
            report.jobs,
            cfg.max_failure_fraction,
            report_path.display()
        )));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::head;
    use crate::volume::write_volume;

    fn toy_sources(dir: &Path, n: usize) -> Vec<ManifestEntry> {
        (0..n)
            .map(|i| {
                let p = dir.join(format!("src{i}.nii.gz"));
                write_volume(&head([28, 30, 26], 6.0, i as u64), &p).unwrap();
                let mut e = ManifestEntry::new(&format!("sub{i}"), "A", p);
                e.qc_score = Some(4);
                e.split = if i % 2 == 0 { Split::Train } else { Split::Val };
                e
            })
            .collect()
    }

    fn toy_cfg(passes: u64) -> GenerationConfig {
        GenerationConfig {
            augment: AugmentConfig {
                roi: [24, 24, 24],
                ..AugmentConfig::default()
            },
            passes,
            master_seed: 99,
            ..GenerationConfig::default()
        }
    }

    #[test]
    fn counts_sidecars_and_resume() {
        let dir = tempfile::tempdir().unwrap();
        let entries = toy_sources(dir.path(), 2);
        let out = dir.path().join("out");
        let cfg = toy_cfg(3);
        let r = run_generation(&entries, &cfg, &out).unwrap();
        assert_eq!((r.jobs, r.outputs, r.generated, r.resumed, r.failed), (6, 6, 6, 0, 0));
        assert_eq!(r.histogram.counts.iter().sum::<u64>(), 6);
        assert_eq!(r.per_split["train"] + r.per_split["val"], 6);
        let files: Vec<_> = std::fs::read_dir(out.join("volumes")).unwrap().collect();
        assert_eq!(files.len(), 12);

        let jobs = plan_jobs(&entries, &cfg);
        let victim = out.join(&jobs[4].volume);
        let original = std::fs::read(&victim).unwrap();
        std::fs::remove_file(&victim).unwrap();
        let r2 = run_generation(&entries, &cfg, &out).unwrap();
        assert_eq!((r2.generated, r2.resumed), (1, 5));
        assert_eq!(std::fs::read(&victim).unwrap(), original);

        let sidecar: Sidecar =
            serde_json::from_str(&std::fs::read_to_string(out.join(&jobs[4].sidecar)).unwrap()).unwrap();
        assert_eq!(sidecar.trace.seed, jobs[4].seed);
        assert_eq!(sidecar.rotation_convention, ROTATION_CONVENTION);
        let labels = std::fs::read_to_string(out.join("labels.csv")).unwrap();
        assert!(labels.starts_with("path,sidecar,rms_score,split\n"));
        assert_eq!(labels.lines().count(), 7);
    }

    #[test]
    fn seed_mismatch_forces_regeneration() {
        let dir = tempfile::tempdir().unwrap();
        let entries = toy_sources(dir.path(), 1);
        let out = dir.path().join("out");
        run_generation(&entries, &toy_cfg(1), &out).unwrap();
        let mut cfg = toy_cfg(1);
        cfg.master_seed = 100;
        let r = run_generation(&entries, &cfg, &out).unwrap();
        assert_eq!(r.generated, 1);
    }

    #[test]
    fn failures_are_recorded_and_thresholded() {
        let dir = tempfile::tempdir().unwrap();
        let mut entries = toy_sources(dir.path(), 2);
        entries.push(ManifestEntry::new("ghost", "A", dir.path().join("missing.nii")));
        let out = dir.path().join("out");
        let mut cfg = toy_cfg(2);
        cfg.max_failure_fraction = 0.5;
        let r = run_generation(&entries, &cfg, &out).unwrap();
        assert_eq!((r.outputs, r.failed), (4, 2));
        assert_eq!(r.outputs, 2 * entries.len() - r.failed);
        cfg.max_failure_fraction = 0.1;
        assert!(matches!(run_generation(&entries, &cfg, &out), Err(Error::Generation(_))));
        let report: GenerationReport =
            serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
        assert_eq!(report.failures.len(), 2);
    }

    #[test]
    fn source_identity_ignores_location() {
        let a = ManifestEntry::new("sub-1", "A", "/data/one/sub-1_T1w.nii.gz");
        let moved = ManifestEntry::new("sub-1", "A", "elsewhere/sub-1_T1w.nii.gz");
        assert_eq!(source_tag(&a), source_tag(&moved));
        assert_eq!(job_seed(3, &a, 1), job_seed(3, &moved, 1));
        assert!(source_tag(&a).starts_with("sub-1_T1w_"));
        let other = ManifestEntry::new("sub-2", "A", "/data/one/sub-1_T1w.nii.gz");
        assert_ne!(source_tag(&a), source_tag(&other));
        assert_ne!(job_seed(3, &a, 1), job_seed(3, &other, 1));
    }
}
