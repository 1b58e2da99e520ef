//! Regression and classification metrics.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Coefficient of determination `1 - SS_res / SS_tot`.
pub fn r_squared(truth: &[f64], pred: &[f64]) -> Result<f64> {
    if truth.len() != pred.len() || truth.is_empty() {
        return Err(Error::arg(format!(
            "r_squared needs equal nonzero lengths, got {} and {}",
            truth.len(),
            pred.len()
        )));
    }
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let ss_tot: f64 = truth.iter().map(|t| (t - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::UndefinedMetric("r_squared: truth is constant".into()));
    }
    let ss_res: f64 = truth.iter().zip(pred).map(|(t, p)| (t - p).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self {
            counts: vec![vec![0; k]; k],
        }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = counts.len();
        if k == 0 || counts.iter().any(|r| r.len() != k) {
            return Err(Error::arg("confusion matrix must be square and nonempty"));
        }
        Ok(Self { counts })
    }

    pub fn from_labels(truth: &[usize], pred: &[usize], k: usize) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::arg("truth and prediction lengths differ"));
        }
        let mut cm = Self::new(k);
        for (&t, &p) in truth.iter().zip(pred) {
            if t >= k || p >= k {
                return Err(Error::arg(format!("label out of range for {k} classes")));
            }
            cm.counts[t][p] += 1;
        }
        Ok(cm)
    }

    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth][pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }

    /// Number of predictions per class.
    pub fn predicted_counts(&self) -> Vec<u64> {
        (0..self.k()).map(|c| self.col_sum(c)).collect()
    }
}

/// Mean per-class recall.
pub fn balanced_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let mut sum = 0.0;
    for c in 0..cm.k() {
        let n = cm.row_sum(c);
        if n == 0 {
            return Err(Error::UndefinedMetric(format!(
                "balanced accuracy: class {c} has no true samples"
            )));
        }
        sum += cm.get(c, c) as f64 / n as f64;
    }
    Ok(sum / cm.k() as f64)
}

/// Per-class F1 as `2TP / (true + predicted)`, which equals `2PR / (P + R)`
/// but rounds once. 0 when the class is never true nor predicted.
pub fn f1_per_class(cm: &ConfusionMatrix) -> Vec<f64> {
    (0..cm.k())
        .map(|c| {
            let denom = cm.col_sum(c) + cm.row_sum(c);
            if denom == 0 {
                0.0
            } else {
                (2 * cm.get(c, c)) as f64 / denom as f64
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPoint {
    pub truth_bin: f64,
    pub mean_pred: f64,
    pub count: usize,
}

/// Bin the truth axis into `n_points` equal bins over its range and report
/// the mean prediction of each nonempty bin.
pub fn calibration_curve(truth: &[f64], pred: &[f64], n_points: usize) -> Result<Vec<CalibrationPoint>> {
    if truth.is_empty() || truth.len() != pred.len() {
        return Err(Error::arg("calibration needs equal nonzero lengths"));
    }
    if n_points == 0 {
        return Err(Error::arg("calibration needs at least one bin"));
    }
    let lo = truth.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = truth.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / n_points as f64;
    let mut sums = vec![0.0; n_points];
    let mut counts = vec![0usize; n_points];
    for (&t, &p) in truth.iter().zip(pred) {
        let b = if width > 0.0 {
            (((t - lo) / width).floor() as usize).min(n_points - 1)
        } else {
            0
        };
        sums[b] += p;
        counts[b] += 1;
    }
    Ok((0..n_points)
        .filter(|&b| counts[b] > 0)
        .map(|b| CalibrationPoint {
            truth_bin: lo + (b as f64 + 0.5) * width,
            mean_pred: sums[b] / counts[b] as f64,
            count: counts[b],
        })
        .collect())
}

pub fn write_calibration_csv(points: &[CalibrationPoint], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in points {
        w.serialize(p)?;
    }
    w.flush().map_err(|e| Error::io("<calibration csv>", e))?;
    Ok(())
}

/// Machine-readable evaluation result. Fields that do not apply to the
/// task are null.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub r2: Option<f64>,
    pub balanced_accuracy: Option<f64>,
    pub f1: Vec<f64>,
    pub confusion: Vec<Vec<u64>>,
}

impl MetricsReport {
    pub fn regression(truth: &[f64], pred: &[f64]) -> Result<Self> {
        Ok(Self {
            r2: Some(r_squared(truth, pred)?),
            balanced_accuracy: None,
            f1: Vec::new(),
            confusion: Vec::new(),
        })
    }

    /// Balanced accuracy is null when some class has no true samples.
    pub fn classification(cm: &ConfusionMatrix) -> Self {
        Self {
            r2: None,
            balanced_accuracy: balanced_accuracy(cm).ok(),
            f1: f1_per_class(cm),
            confusion: cm.counts().to_vec(),
        }
    }
}

/// Median of a nonempty slice; mean of the middle pair for even lengths.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Elementwise median over runs of the scalar metrics and per-class F1.
pub fn median_report(runs: &[MetricsReport]) -> Option<MetricsReport> {
    let first = runs.first()?;
    let opt = |get: fn(&MetricsReport) -> Option<f64>| -> Option<f64> {
        let vals: Option<Vec<f64>> = runs.iter().map(get).collect();
        vals.and_then(|v| median(&v))
    };
    let f1 = (0..first.f1.len())
        .map(|c| median(&runs.iter().map(|r| r.f1.get(c).copied().unwrap_or(0.0)).collect::<Vec<_>>()).unwrap_or(0.0))
        .collect();
    Some(MetricsReport {
        r2: opt(|r| r.r2),
        balanced_accuracy: opt(|r| r.balanced_accuracy),
        f1,
        confusion: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn r2_values() {
        let t = [1.0, 2.0, 3.0];
        assert_eq!(r_squared(&t, &t).unwrap(), 1.0);
        assert_eq!(r_squared(&t, &[2.0; 3]).unwrap(), 0.0);
        assert!((r_squared(&t, &[1.0, 2.0, 4.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(r_squared(&[1.0; 3], &t), Err(Error::UndefinedMetric(_))));
        assert!(r_squared(&t, &[1.0]).is_err());
    }

    #[test]
    fn balanced_accuracy_values() {
        let id = ConfusionMatrix::from_counts(vec![vec![3, 0, 0], vec![0, 4, 0], vec![0, 0, 5]]).unwrap();
        assert_eq!(balanced_accuracy(&id).unwrap(), 1.0);
        let two = ConfusionMatrix::from_counts(vec![vec![5, 5], vec![0, 10]]).unwrap();
        assert_eq!(balanced_accuracy(&two).unwrap(), 0.75);
        let empty = ConfusionMatrix::from_counts(vec![vec![1, 0], vec![0, 0]]).unwrap();
        let err = balanced_accuracy(&empty).unwrap_err();
        assert!(err.to_string().contains("class 1"));
    }

    fn majority_voter() -> ConfusionMatrix {
        ConfusionMatrix::from_counts(vec![vec![0, 0, 9], vec![0, 0, 90], vec![0, 0, 125]]).unwrap()
    }

    #[test]
    fn majority_voter_on_test_counts() {
        let cm = majority_voter();
        assert!((balanced_accuracy(&cm).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let f1 = f1_per_class(&cm);
        let p = 125.0 / 224.0;
        assert_eq!(f1[0], 0.0);
        assert_eq!(f1[1], 0.0);
        assert!((f1[2] - 2.0 * p / (p + 1.0)).abs() < 1e-15);
        assert!((f1[2] - 0.7163).abs() < 1e-4);
    }

    #[test]
    fn f1_conventions() {
        let perfect = ConfusionMatrix::from_labels(&[0, 1, 2, 2], &[0, 1, 2, 2], 3).unwrap();
        assert_eq!(f1_per_class(&perfect), vec![1.0; 3]);
        let absent = ConfusionMatrix::from_labels(&[0, 1], &[0, 1], 3).unwrap();
        assert_eq!(f1_per_class(&absent)[2], 0.0);
    }

    /// Reference implementations counting directly from label lists.
    fn oracle_ba(t: &[usize], p: &[usize], k: usize) -> Option<f64> {
        let mut s = 0.0;
        for c in 0..k {
            let n = t.iter().filter(|&&x| x == c).count();
            if n == 0 {
                return None;
            }
            let hit = t.iter().zip(p).filter(|(&x, &y)| x == c && y == c).count();
            s += hit as f64 / n as f64;
        }
        Some(s / k as f64)
    }

    fn oracle_f1(t: &[usize], p: &[usize], c: usize) -> f64 {
        let tp = t.iter().zip(p).filter(|(&x, &y)| x == c && y == c).count() as f64;
        let fp = t.iter().zip(p).filter(|(&x, &y)| x != c && y == c).count() as f64;
        let fn_ = t.iter().zip(p).filter(|(&x, &y)| x == c && y != c).count() as f64;
        if tp == 0.0 {
            0.0
        } else {
            2.0 * tp / (2.0 * tp + fp + fn_)
        }
    }

    #[test]
    fn metrics_match_counting_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let k = rng.gen_range(2..5);
            let n = rng.gen_range(1..40);
            let t: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            let p: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            let cm = ConfusionMatrix::from_labels(&t, &p, k).unwrap();
            assert_eq!(cm.total(), n as u64);
            match oracle_ba(&t, &p, k) {
                Some(b) => assert!((balanced_accuracy(&cm).unwrap() - b).abs() < 1e-12),
                None => assert!(balanced_accuracy(&cm).is_err()),
            }
            for (c, f) in f1_per_class(&cm).iter().enumerate() {
                assert!((f - oracle_f1(&t, &p, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uniform_predictor_tends_to_one_over_k() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let k = 3;
        let n = 100_000;
        let t: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let p: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let ba = balanced_accuracy(&ConfusionMatrix::from_labels(&t, &p, k).unwrap()).unwrap();
        // each recall ~ Binomial(n/k, 1/k) / (n/k); the mean of k of them
        let q = 1.0 / k as f64;
        let sigma = (q * (1.0 - q) / (n as f64 / k as f64)).sqrt() / (k as f64).sqrt();
        assert!((ba - q).abs() < 3.0 * sigma, "{ba}");
    }

    #[test]
    fn calibration_cases() {
        let t: Vec<f64> = (0..100).map(|i| i as f64 / 10.0).collect();
        let on_diag = calibration_curve(&t, &t, 10).unwrap();
        for p in &on_diag {
            assert!((p.mean_pred - p.truth_bin).abs() <= 0.99 / 2.0 + 1e-9);
        }
        let flat = calibration_curve(&t, &[2.5; 100], 7).unwrap();
        assert!(flat.iter().all(|p| p.mean_pred == 2.5));
        assert_eq!(flat.iter().map(|p| p.count).sum::<usize>(), 100);
        let mut buf = Vec::new();
        write_calibration_csv(&flat, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("truth_bin,mean_pred,count\n"));
    }

    #[test]
    fn calibration_matches_brute_force() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let n = rng.gen_range(1..60);
            let bins = rng.gen_range(1..12);
            let t: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..5.0)).collect();
            let p: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..5.0)).collect();
            let got = calibration_curve(&t, &p, bins).unwrap();
            let lo = t.iter().cloned().fold(f64::MAX, f64::min);
            let hi = t.iter().cloned().fold(f64::MIN, f64::max);
            let w = (hi - lo) / bins as f64;
            let mut expect = Vec::new();
            for b in 0..bins {
                let members: Vec<f64> = t
                    .iter()
                    .zip(&p)
                    .filter(|(x, _)| {
                        let idx = if w > 0.0 { (((*x - lo) / w).floor() as usize).min(bins - 1) } else { 0 };
                        idx == b
                    })
                    .map(|(_, y)| *y)
                    .collect();
                if !members.is_empty() {
                    expect.push((members.iter().sum::<f64>() / members.len() as f64, members.len()));
                }
            }
            assert_eq!(got.len(), expect.len());
            for (g, (m, c)) in got.iter().zip(expect) {
                assert_eq!(g.count, c);
                assert!((g.mean_pred - m).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
        let runs: Vec<MetricsReport> = [0.3, 0.5, 0.4]
            .iter()
            .map(|&b| MetricsReport {
                r2: None,
                balanced_accuracy: Some(b),
                f1: vec![b, 1.0 - b],
                confusion: Vec::new(),
            })
            .collect();
        let m = median_report(&runs).unwrap();
        assert_eq!(m.balanced_accuracy, Some(0.4));
        assert_eq!(m.f1, vec![0.4, 0.6]);
        assert_eq!(m.r2, None);
    }

    #[test]
    fn report_json_shape() {
        let v = serde_json::to_value(MetricsReport::classification(&majority_voter())).unwrap();
        for key in ["r2", "balanced_accuracy", "f1", "confusion"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert_eq!(v["confusion"][2][2], 125);
    }

    proptest! {
        #[test]
        fn relabeling_invariance(
            labels in proptest::collection::vec((0usize..3, 0usize..3), 3..60),
            perm_idx in 0usize..6,
        ) {
            let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
            let perm = perms[perm_idx];
            let t: Vec<usize> = labels.iter().map(|l| l.0).collect();
            let p: Vec<usize> = labels.iter().map(|l| l.1).collect();
            let tp: Vec<usize> = t.iter().map(|&x| perm[x]).collect();
            let pp: Vec<usize> = p.iter().map(|&x| perm[x]).collect();
            let a = ConfusionMatrix::from_labels(&t, &p, 3).unwrap();
            let b = ConfusionMatrix::from_labels(&tp, &pp, 3).unwrap();
            match (balanced_accuracy(&a), balanced_accuracy(&b)) {
                (Ok(x), Ok(y)) => prop_assert!((x - y).abs() < 1e-12),
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false, "definedness changed under relabeling"),
            }
            let fa = f1_per_class(&a);
            let fb = f1_per_class(&b);
            for c in 0..3 {
                prop_assert!((fa[c] - fb[perm[c]]).abs() < 1e-12);
            }
        }
    }
}
