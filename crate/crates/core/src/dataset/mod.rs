//! Source manifests, leakage-free splits and batch generation.

mod generate;

pub use generate::{
    job_seed, run_generation, GenerationConfig, GenerationJob, GenerationReport, JobFailure,
    LabelRow, ScoreHistogram, Sidecar,
};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    #[default]
    #[serde(alias = "")]
    Unassigned,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pool {
    Synthetic,
    Qc,
    #[default]
    #[serde(alias = "")]
    Unassigned,
}

/// One source scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub subject_id: String,
    pub site_id: String,
    pub path: PathBuf,
    pub qc_score: Option<u8>,
    pub qc_comment: Option<String>,
    #[serde(default)]
    pub split: Split,
    #[serde(default)]
    pub pool: Pool,
}

impl ManifestEntry {
    pub fn new(subject_id: &str, site_id: &str, path: impl Into<PathBuf>) -> Self {
        Self {
            subject_id: subject_id.to_owned(),
            site_id: site_id.to_owned(),
            path: path.into(),
            qc_score: None,
            qc_comment: None,
            split: Split::Unassigned,
            pool: Pool::Unassigned,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.subject_id.trim().is_empty() || self.site_id.trim().is_empty() {
            return Err(Error::arg(format!("entry {:?} has an empty subject or site id", self.path)));
        }
        if let Some(s) = self.qc_score {
            if !(1..=4).contains(&s) {
                return Err(Error::arg(format!(
                    "subject {}: qc_score {s} outside 1..=4",
                    self.subject_id
                )));
            }
        }
        Ok(())
    }
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let mut out = Vec::new();
    for row in reader.deserialize() {
        let e: ManifestEntry = row?;
        e.validate()?;
        out.push(e);
    }
    Ok(out)
}

pub fn write_manifest(entries: &[ManifestEntry], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new()
        .quote_style(csv::QuoteStyle::Necessary)
        .from_writer(file);
    for e in entries {
        w.serialize(e)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub const DEFAULT_MOTION_KEYWORDS: [&str; 3] = ["motion", "movement", "ringing"];

/// Keep score-4 entries whose comment mentions none of `keywords`
/// (case-insensitive substring match).
pub fn filter_for_synthesis<S: AsRef<str>>(entries: &[ManifestEntry], keywords: &[S]) -> Vec<ManifestEntry> {
    let keywords: Vec<String> = keywords.iter().map(|k| k.as_ref().to_lowercase()).collect();
    entries
        .iter()
        .filter(|e| {
            if e.qc_score != Some(4) {
                return false;
            }
            let comment = e.qc_comment.as_deref().unwrap_or("").to_lowercase();
            match keywords.iter().find(|k| comment.contains(k.as_str())) {
                Some(k) => {
                    log::info!("dropping {:?}: comment mentions {k:?}", e.path);
                    false
                }
                None => true,
            }
        })
        .cloned()
        .collect()
}

/// Assign pools by site. Sites in neither set leave entries unassigned.
pub fn split_by_site<S: AsRef<str>>(entries: &[ManifestEntry], synth_sites: &[S], qc_sites: &[S]) -> Result<Vec<ManifestEntry>> {
    let synth: BTreeSet<&str> = synth_sites.iter().map(|s| s.as_ref()).collect();
    let qc: BTreeSet<&str> = qc_sites.iter().map(|s| s.as_ref()).collect();
    let both: Vec<&&str> = synth.intersection(&qc).collect();
    if !both.is_empty() {
        return Err(Error::arg(format!("sites in both pools: {both:?}")));
    }
    Ok(entries
        .iter()
        .map(|e| {
            let mut e = e.clone();
            e.pool = if synth.contains(e.site_id.as_str()) {
                Pool::Synthetic
            } else if qc.contains(e.site_id.as_str()) {
                Pool::Qc
            } else {
                Pool::Unassigned
            };
            e
        })
        .collect())
}

/// Assign train/val/test per subject. Subjects are sorted, shuffled with
/// `seed`, then cut by rounded cumulative fractions.
pub fn split_subjects(entries: &[ManifestEntry], fractions: [f64; 3], seed: u64) -> Result<Vec<ManifestEntry>> {
    if fractions.iter().any(|&f| !(f > 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::arg(format!("split fractions {fractions:?} must be positive and sum to 1")));
    }
    let subjects: BTreeSet<&str> = entries.iter().map(|e| e.subject_id.as_str()).collect();
    let mut subjects: Vec<&str> = subjects.into_iter().collect();
    subjects.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = subjects.len() as f64;
    let cut_train = (fractions[0] * n).round() as usize;
    let cut_val = ((fractions[0] + fractions[1]) * n).round() as usize;
    let assign: BTreeMap<&str, Split> = subjects
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let split = if i < cut_train.max(1) {
                Split::Train
            } else if i < cut_val {
                Split::Val
            } else {
                Split::Test
            };
            (*s, split)
        })
        .collect();
    Ok(entries
        .iter()
        .map(|e| {
            let mut e = e.clone();
            e.split = assign[e.subject_id.as_str()];
            e
        })
        .collect())
}

/// Fail if any subject spans two splits or any site spans both pools.
pub fn audit(entries: &[ManifestEntry]) -> Result<()> {
    let mut splits: BTreeMap<&str, BTreeSet<Split>> = BTreeMap::new();
    let mut pools: BTreeMap<&str, BTreeSet<Pool>> = BTreeMap::new();
    for e in entries {
        if e.split != Split::Unassigned {
            splits.entry(&e.subject_id).or_default().insert(e.split);
        }
        if e.pool != Pool::Unassigned {
            pools.entry(&e.site_id).or_default().insert(e.pool);
        }
    }
    let mut problems = Vec::new();
    for (subject, s) in &splits {
        if s.len() > 1 {
            let names: Vec<&str> = s.iter().map(|x| x.as_str()).collect();
            problems.push(format!("subject {subject} in splits {}", names.join("+")));
        }
    }
    for (site, p) in &pools {
        if p.len() > 1 {
            problems.push(format!("site {site} in both pools"));
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Audit(problems.join("; ")))
    }
}

/// Merged 3-class label: scores 1 and 2 become 0, 3 becomes 1, 4 becomes 2.
pub fn qc_class(score: u8) -> Option<usize> {
    match score {
        1 | 2 => Some(0),
        3 => Some(1),
        4 => Some(2),
        _ => None,
    }
}

/// `(entry index, class)` for every entry with a usable score.
pub fn merge_qc_classes(entries: &[ManifestEntry]) -> Vec<(usize, usize)> {
    entries
        .iter()
        .enumerate()
        .filter_map(|(i, e)| match e.qc_score.and_then(qc_class) {
            Some(c) => Some((i, c)),
            None => {
                log::warn!("skipping {:?}: no usable qc_score", e.path);
                None
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(subject: &str, site: &str, score: Option<u8>, comment: Option<&str>) -> ManifestEntry {
        ManifestEntry {
            qc_score: score,
            qc_comment: comment.map(str::to_owned),
            ..ManifestEntry::new(subject, site, format!("{subject}.nii.gz"))
        }
    }

    #[test]
    fn synthesis_filter() {
        let m = vec![
            entry("a", "s", Some(4), None),
            entry("b", "s", Some(3), None),
            entry("c", "s", Some(4), Some("slight MOTION visible")),
            entry("d", "s", Some(4), Some("clean, minor Ringing")),
            entry("e", "s", Some(4), Some("fine")),
            entry("f", "s", None, None),
        ];
        let kept = filter_for_synthesis(&m, &DEFAULT_MOTION_KEYWORDS);
        let ids: Vec<&str> = kept.iter().map(|e| e.subject_id.as_str()).collect();
        assert_eq!(ids, ["a", "e"]);
    }

    #[test]
    fn site_pools() {
        let m = vec![entry("a", "A", None, None), entry("b", "B", None, None), entry("c", "C", None, None)];
        let out = split_by_site(&m, &["A"], &["B"]).unwrap();
        assert_eq!(out.iter().map(|e| e.pool).collect::<Vec<_>>(), [Pool::Synthetic, Pool::Qc, Pool::Unassigned]);
        assert!(matches!(split_by_site(&m, &["A"], &["A"]), Err(Error::Argument(_))));
    }

    #[test]
    fn site_split_pool_sizes_match_site_sums() {
        let mut m = Vec::new();
        let mut per_site = Vec::new();
        for s in 0..33 {
            let n = 1 + (s * 7) % 5;
            per_site.push(n);
            for k in 0..n {
                m.push(entry(&format!("sub{s}_{k}"), &format!("site{s}"), Some(4), None));
            }
        }
        let synth: Vec<String> = (0..26).map(|s| format!("site{s}")).collect();
        let qc: Vec<String> = (26..33).map(|s| format!("site{s}")).collect();
        let out = split_by_site(&m, &synth, &qc).unwrap();
        let n_synth = out.iter().filter(|e| e.pool == Pool::Synthetic).count();
        let n_qc = out.iter().filter(|e| e.pool == Pool::Qc).count();
        assert_eq!(n_synth, per_site[..26].iter().sum::<usize>());
        assert_eq!(n_qc, per_site[26..].iter().sum::<usize>());
        audit(&out).unwrap();
    }

    #[test]
    fn subject_split_never_leaks() {
        let mut m = Vec::new();
        for s in 0..40 {
            for k in 0..(1 + s % 3) {
                m.push(entry(&format!("sub{s}"), "A", Some(4), Some(&format!("scan {k}"))));
            }
        }
        let out = split_subjects(&m, [0.8, 0.1, 0.1], 7).unwrap();
        audit(&out).unwrap();
        assert_eq!(out, split_subjects(&m, [0.8, 0.1, 0.1], 7).unwrap());
        let subjects = |sp: Split| {
            out.iter()
                .filter(|e| e.split == sp)
                .map(|e| e.subject_id.clone())
                .collect::<BTreeSet<_>>()
                .len()
        };
        assert_eq!((subjects(Split::Train), subjects(Split::Val), subjects(Split::Test)), (32, 4, 4));
        let single = split_subjects(&m[..1], [0.8, 0.1, 0.1], 1).unwrap();
        assert_eq!(single[0].split, Split::Train);
        assert!(split_subjects(&m, [0.5, 0.5, 0.0], 1).is_err());
    }

    #[test]
    fn source_count_from_generated_total() {
        // 110100 training volumes at 300 passes each
        assert_eq!(110_100 % 300, 0);
        assert_eq!(110_100 / 300, 367);
    }

    #[test]
    fn audit_catches_leaks() {
        let mut a = entry("x", "A", None, None);
        a.split = Split::Train;
        let mut b = entry("x", "A", None, None);
        b.split = Split::Test;
        let err = audit(&[a.clone(), b]).unwrap_err();
        assert!(err.to_string().contains("subject x"), "{err}");
        let mut c = entry("y", "A", None, None);
        c.pool = Pool::Qc;
        a.pool = Pool::Synthetic;
        let err = audit(&[a, c]).unwrap_err();
        assert!(err.to_string().contains("site A"), "{err}");
    }

    #[test]
    fn class_merge_and_qc_split_counts() {
        assert_eq!([1, 2, 3, 4].map(qc_class), [Some(0), Some(0), Some(1), Some(2)]);
        let mut m = vec![entry("n", "A", None, None)];
        // per split: raw scores (1, 2, 3, 4) counts chosen so merged counts are
        // train 7/38/70, val 1/12/26, test 9/90/125
        let table = [
            (Split::Train, [3, 4, 38, 70]),
            (Split::Val, [0, 1, 12, 26]),
            (Split::Test, [2, 7, 90, 125]),
        ];
        for (split, counts) in table {
            for (score, &n) in counts.iter().enumerate() {
                for i in 0..n {
                    let mut e = entry(&format!("{split}{score}{i}"), "A", Some(score as u8 + 1), None);
                    e.split = split;
                    m.push(e);
                }
            }
        }
        let merged = merge_qc_classes(&m);
        assert_eq!(merged.len(), m.len() - 1);
        let count = |sp: Split| {
            let mut c = [0; 3];
            for (i, k) in &merged {
                if m[*i].split == sp {
                    c[*k] += 1;
                }
            }
            c
        };
        assert_eq!(count(Split::Train), [7, 38, 70]);
        assert_eq!(count(Split::Val), [1, 12, 26]);
        assert_eq!(count(Split::Test), [9, 90, 125]);
    }

    #[test]
    fn manifest_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let mut e = entry("a", "A", Some(4), Some("fine, \"quoted\""));
        e.split = Split::Val;
        e.pool = Pool::Synthetic;
        let m = vec![e, entry("b", "B", None, None)];
        write_manifest(&m, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("subject_id,site_id,path,qc_score,qc_comment,split,pool\n"));
        assert_eq!(read_manifest(&p).unwrap(), m);
        std::fs::write(&p, "subject_id,site_id,path,qc_score,qc_comment,split,pool\ns,t,x.nii,4,,,\n").unwrap();
        let back = read_manifest(&p).unwrap();
        assert_eq!((back[0].split, back[0].pool, back[0].qc_comment.clone()), (Split::Unassigned, Pool::Unassigned, None));
        std::fs::write(&p, "subject_id,site_id,path,qc_score,qc_comment,split,pool\ns,t,x.nii,7,,,\n").unwrap();
        assert!(read_manifest(&p).is_err());
    }
}
