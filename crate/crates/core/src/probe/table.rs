//! Feature tables on disk: `id,split,target,<feature names...>`.

use std::path::{Path, PathBuf};

use crate::dataset::{LabelRow, Split};
use crate::error::{Error, Result};
use crate::kspace::Fft3;
use crate::volume::read_volume;

use super::features::{extract_features_using, FEATURE_NAMES};

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub id: String,
    pub split: Split,
    /// Motion score, or merged QC class as a float.
    pub target: f64,
    pub values: Vec<f64>,
}

fn header() -> Vec<String> {
    ["id", "split", "target"]
        .into_iter()
        .chain(FEATURE_NAMES)
        .map(String::from)
        .collect()
}

pub fn write_feature_csv(rows: &[FeatureRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header())?;
    for r in rows {
        let mut rec = vec![r.id.clone(), r.split.to_string(), r.target.to_string()];
        rec.extend(r.values.iter().map(f64::to_string));
        w.write_record(rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Rejects tables whose columns differ from the current feature set.
pub fn read_feature_csv(path: impl AsRef<Path>) -> Result<Vec<FeatureRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)?;
    let got: Vec<String> = r.headers()?.iter().map(String::from).collect();
    if got != header() {
        return Err(Error::Format(format!(
            "{}: feature columns do not match this build ({} features)",
            path.display(),
            FEATURE_NAMES.len()
        )));
    }
    let num = |s: &str, line: usize| {
        s.parse::<f64>()
            .map_err(|_| Error::Format(format!("{}:{line}: not a number: {s:?}", path.display())))
    };
    r.records()
        .enumerate()
        .map(|(i, rec)| {
            let rec = rec?;
            let line = i + 2;
            let split = match &rec[1] {
                "train" => Split::Train,
                "val" => Split::Val,
                "test" => Split::Test,
                "" => Split::Unassigned,
                other => return Err(Error::Format(format!("{}:{line}: unknown split {other:?}", path.display()))),
            };
            Ok(FeatureRow {
                id: rec[0].to_string(),
                split,
                target: num(&rec[2], line)?,
                values: rec.iter().skip(3).map(|s| num(s, line)).collect::<Result<_>>()?,
            })
        })
        .collect()
}

/// Feature rows and targets of one split.
pub fn select_split(rows: &[FeatureRow], split: Split) -> (Vec<Vec<f64>>, Vec<f64>) {
    rows.iter()
        .filter(|r| r.split == split)
        .map(|r| (r.values.clone(), r.target))
        .unzip()
}

/// Class labels from float targets; fails on anything but small integers.
pub fn class_targets(targets: &[f64], n_classes: usize) -> Result<Vec<usize>> {
    targets
        .iter()
        .map(|&t| {
            if t.fract() == 0.0 && t >= 0.0 && (t as usize) < n_classes {
                Ok(t as usize)
            } else {
                Err(Error::arg(format!("target {t} is not a class in 0..{n_classes}")))
            }
        })
        .collect()
}

/// Extract features from every volume listed in a generation run's
/// `labels.csv`; paths in it are relative to `out_dir`.
pub fn features_from_labels(out_dir: &Path, labels: &str) -> Result<Vec<FeatureRow>> {
    let mut reader = csv::Reader::from_path(out_dir.join(labels))?;
    let rows: Vec<LabelRow> = reader.deserialize().collect::<std::result::Result<_, _>>()?;
    let mut plan: Option<Fft3> = None;
    rows.into_iter()
        .map(|row| {
            let path: PathBuf = out_dir.join(&row.path);
            let v = read_volume(&path)?;
            let plan = plan.get_or_insert_with(|| Fft3::new(v.dims()));
            Ok(FeatureRow {
                id: row.path,
                split: row.split,
                target: row.rms_score,
                values: extract_features_using(&v, plan)?.values,
            })
        })
        .collect()
}
