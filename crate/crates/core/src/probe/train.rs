use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::mlp::{mean_kl, AdamW, Mlp};
use super::{build_head, build_trunk, init_rng, to_matrix, Architecture, Head, Objective, ProbeModel, TrainConfig, FEATURE_VERSION};
use crate::error::{Error, Result};
use crate::labels::{decode_expected, encode_soft, BinSpec, SoftLabel};
use crate::metrics::{balanced_accuracy, f1_per_class, median, r_squared, ConfusionMatrix, MetricsReport};

pub const N_QC_CLASSES: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Validation R² for regression, balanced accuracy for classification.
    pub val_metric: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub history: Vec<HistoryRow>,
    pub best_epoch: usize,
    pub best_metric: f64,
}

/// Mini-batch training with AdamW, reduce-on-plateau and early stopping on
/// the validation loss; keeps the parameters of the epoch with the highest
/// `metric`.
///
/// With `lr == 0` the run only evaluates: parameters and batch-norm running
/// statistics are left untouched.
pub fn fit(
    model: &mut Mlp,
    x: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    x_val: &DMatrix<f64>,
    t_val: &DMatrix<f64>,
    cfg: &TrainConfig,
    metric: impl Fn(&Mlp) -> Result<f64>,
) -> Result<FitResult> {
    cfg.validate()?;
    if x.nrows() < 2 || x_val.nrows() == 0 {
        return Err(Error::arg("training needs >= 2 training samples and a nonempty validation set"));
    }
    if x.nrows() != targets.nrows() || x_val.nrows() != t_val.nrows() {
        return Err(Error::arg("features and targets have different lengths"));
    }
    let mut shuffle_rng = init_rng(cfg.seed, "shuffle");
    let mut dropout_rng = init_rng(cfg.seed, "dropout");
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut lr = cfg.lr;
    let mut best = (0usize, f64::NEG_INFINITY, model.clone());
    let mut best_loss = f64::INFINITY;
    let (mut plateau, mut stale) = (0usize, 0usize);
    let mut history = Vec::new();
    let n = x.nrows();
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 1..=cfg.max_epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut shuffle_rng);
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            // a trailing single sample cannot be batch-normalized
            if chunk.len() < 2 {
                continue;
            }
            let xb = x.select_rows(chunk);
            let tb = targets.select_rows(chunk);
            let (loss, grads, caches) = model.loss_and_grads(&xb, &tb, &mut dropout_rng)?;
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss {loss} at epoch {epoch}, lr {lr:e}, batch of {}",
                    chunk.len()
                )));
            }
            if cfg.lr > 0.0 {
                model.update_running_stats(&caches, chunk.len());
                opt.step(model, &grads, lr);
            }
            loss_sum += loss * chunk.len() as f64;
            seen += chunk.len();
        }
        let train_loss = loss_sum / seen as f64;
        let val_loss = mean_kl(t_val, &model.predict(x_val)?);
        if !val_loss.is_finite() {
            return Err(Error::Training(format!("non-finite validation loss at epoch {epoch}")));
        }
        let m = metric(model)?;
        history.push(HistoryRow {
            epoch,
            train_loss,
            val_loss,
            val_metric: m,
            lr,
        });
        if m > best.1 {
            best = (epoch, m, model.clone());
        }
        if val_loss < best_loss - cfg.min_delta {
            best_loss = val_loss;
            plateau = 0;
            stale = 0;
        } else {
            plateau += 1;
            stale += 1;
            if plateau >= cfg.scheduler_patience {
                lr *= cfg.scheduler_factor;
                plateau = 0;
            }
            if stale > cfg.early_stop_patience {
                log::info!("early stop at epoch {epoch}");
                break;
            }
        }
    }
    *model = best.2;
    Ok(FitResult {
        history,
        best_epoch: best.0,
        best_metric: best.1,
    })
}

fn soft_targets(scores: &[f64], bins: &BinSpec) -> Result<DMatrix<f64>> {
    let rows: Vec<Vec<f64>> = scores
        .iter()
        .map(|&s| encode_soft(s, bins).map(SoftLabel::into_inner))
        .collect::<Result<_>>()?;
    to_matrix(&rows)
}

fn one_hot(classes: &[usize], k: usize) -> Result<DMatrix<f64>> {
    if let Some(c) = classes.iter().find(|&&c| c >= k) {
        return Err(Error::arg(format!("class {c} out of range")));
    }
    Ok(DMatrix::from_fn(classes.len(), k, |i, j| if classes[i] == j { 1.0 } else { 0.0 }))
}

/// Expected-value decoding of each output row.
pub fn predict_scores(model: &Mlp, x: &DMatrix<f64>, bins: &BinSpec) -> Result<Vec<f64>> {
    let p = model.predict(x)?;
    Ok(p.row_iter()
        .map(|r| decode_expected(&r.iter().copied().collect::<Vec<_>>(), bins))
        .collect())
}

/// Arg-max class of each output row.
pub fn predict_classes(model: &Mlp, x: &DMatrix<f64>) -> Result<Vec<usize>> {
    let p = model.predict(x)?;
    Ok(p.row_iter().map(|r| r.transpose().argmax().0).collect())
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub model: ProbeModel,
    pub history: Vec<HistoryRow>,
    pub best_epoch: usize,
    pub best_val_r2: f64,
}

/// Train trunk plus bin head on motion scores; keeps the best-R² epoch.
pub fn pretrain(
    train: (&[Vec<f64>], &[f64]),
    val: (&[Vec<f64>], &[f64]),
    bins: &BinSpec,
    arch: &Architecture,
    cfg: &TrainConfig,
) -> Result<PretrainOutcome> {
    if cfg.objective != Objective::KlRegression {
        return Err(Error::arg("pretraining uses the kl-regression objective"));
    }
    if train.0.is_empty() || val.0.is_empty() {
        return Err(Error::arg("pretraining needs nonempty train and validation splits"));
    }
    let x = to_matrix(train.0)?;
    let xv = to_matrix(val.0)?;
    let t = soft_targets(train.1, bins)?;
    let tv = soft_targets(val.1, bins)?;
    let mut rng = init_rng(cfg.seed, "init");
    let mut layers = build_trunk(&x, &arch.trunk_hidden, cfg.dropout, &mut rng);
    let trunk_len = layers.len();
    let width = arch.trunk_hidden.last().copied().unwrap_or(x.ncols());
    layers.push(super::Layer::dense(width, bins.n_bins, &mut rng));
    let mut mlp = Mlp::new(layers)?;
    let truth = val.1.to_vec();
    let fit = fit(&mut mlp, &x, &t, &xv, &tv, cfg, |m| {
        r_squared(&truth, &predict_scores(m, &xv, bins)?)
    })?;
    Ok(PretrainOutcome {
        model: ProbeModel {
            mlp,
            trunk_len,
            head: Head::Bins { bins: bins.clone() },
            feature_version: FEATURE_VERSION,
        },
        history: fit.history,
        best_epoch: fit.best_epoch,
        best_val_r2: fit.best_metric,
    })
}

#[derive(Debug, Clone)]
pub struct ClassifierOutcome {
    pub model: ProbeModel,
    pub history: Vec<HistoryRow>,
    pub best_epoch: usize,
    /// Best-epoch metrics on the validation split.
    pub val: MetricsReport,
}

fn classifier_metric(truth: &[usize], pred: &[usize]) -> Result<f64> {
    let cm = ConfusionMatrix::from_labels(truth, pred, N_QC_CLASSES)?;
    // a class missing from validation is skipped rather than fatal
    let present: Vec<usize> = (0..N_QC_CLASSES).filter(|&c| cm.row_sum(c) > 0).collect();
    if present.len() == N_QC_CLASSES {
        return balanced_accuracy(&cm);
    }
    Ok(present
        .iter()
        .map(|&c| cm.get(c, c) as f64 / cm.row_sum(c) as f64)
        .sum::<f64>()
        / present.len().max(1) as f64)
}

fn train_classifier(
    model: ProbeModel,
    train: (&[Vec<f64>], &[usize]),
    val: (&[Vec<f64>], &[usize]),
    cfg: &TrainConfig,
) -> Result<ClassifierOutcome> {
    if cfg.objective != Objective::CrossEntropy3Class {
        return Err(Error::arg("classifier training uses the cross-entropy-3class objective"));
    }
    for c in 0..N_QC_CLASSES {
        if !train.1.contains(&c) {
            log::warn!("class {c} is absent from the training split");
        }
    }
    let x = to_matrix(train.0)?;
    let xv = to_matrix(val.0)?;
    let t = one_hot(train.1, N_QC_CLASSES)?;
    let tv = one_hot(val.1, N_QC_CLASSES)?;
    let mut model = model;
    let truth = val.1.to_vec();
    let fit = fit(&mut model.mlp, &x, &t, &xv, &tv, cfg, |m| {
        classifier_metric(&truth, &predict_classes(m, &xv)?)
    })?;
    let cm = ConfusionMatrix::from_labels(val.1, &predict_classes(&model.mlp, &xv)?, N_QC_CLASSES)?;
    Ok(ClassifierOutcome {
        model,
        history: fit.history,
        best_epoch: fit.best_epoch,
        val: MetricsReport::classification(&cm),
    })
}

/// Train a fresh classification head on the frozen trunk of `pretrained`.
/// Fails if any trunk tensor changes.
pub fn transfer_train(
    pretrained: &ProbeModel,
    train: (&[Vec<f64>], &[usize]),
    val: (&[Vec<f64>], &[usize]),
    arch: &Architecture,
    cfg: &TrainConfig,
) -> Result<ClassifierOutcome> {
    let before = pretrained.trunk_hash();
    let mut rng = init_rng(cfg.seed, "init");
    let mut layers = pretrained.mlp.layers[..pretrained.trunk_len].to_vec();
    layers.extend(build_head(pretrained.embedding_width(), arch.head_hidden, N_QC_CLASSES, cfg.dropout, &mut rng));
    let mut mlp = Mlp::new(layers)?;
    mlp.frozen = pretrained.trunk_len;
    let model = ProbeModel {
        mlp,
        trunk_len: pretrained.trunk_len,
        head: Head::Classes {
            n_classes: N_QC_CLASSES,
        },
        feature_version: pretrained.feature_version,
    };
    let out = train_classifier(model, train, val, cfg)?;
    if out.model.trunk_hash() != before {
        return Err(Error::Training("frozen trunk changed during transfer training".into()));
    }
    Ok(out)
}

/// Train trunk and classification head together from random weights.
pub fn scratch_train(
    train: (&[Vec<f64>], &[usize]),
    val: (&[Vec<f64>], &[usize]),
    arch: &Architecture,
    cfg: &TrainConfig,
) -> Result<ClassifierOutcome> {
    let x = to_matrix(train.0)?;
    let mut rng = init_rng(cfg.seed, "init");
    let mut layers = build_trunk(&x, &arch.trunk_hidden, 0.0, &mut rng);
    let trunk_len = layers.len();
    let width = arch.trunk_hidden.last().copied().unwrap_or(x.ncols());
    layers.extend(build_head(width, arch.head_hidden, N_QC_CLASSES, cfg.dropout, &mut rng));
    let model = ProbeModel {
        mlp: Mlp::new(layers)?,
        trunk_len,
        head: Head::Classes {
            n_classes: N_QC_CLASSES,
        },
        feature_version: FEATURE_VERSION,
    };
    train_classifier(model, train, val, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub arm: String,
    /// Seed, or "median".
    pub seed: String,
    pub balanced_accuracy: f64,
    pub f1_class0: f64,
    pub f1_class1: f64,
    pub f1_class2: f64,
    pub predicted_class0: u64,
    pub predicted_class1: u64,
    pub predicted_class2: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonReport {
    pub fn runs<'a>(&'a self, arm: &'a str) -> impl Iterator<Item = &'a ComparisonRow> + 'a {
        self.rows.iter().filter(move |r| r.arm == arm && r.seed != "median")
    }

    pub fn median(&self, arm: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.arm == arm && r.seed == "median")
    }
}

fn test_row(arm: &str, seed: u64, model: &ProbeModel, test: (&[Vec<f64>], &[usize])) -> Result<ComparisonRow> {
    let pred = predict_classes(&model.mlp, &to_matrix(test.0)?)?;
    let cm = ConfusionMatrix::from_labels(test.1, &pred, N_QC_CLASSES)?;
    let f1 = f1_per_class(&cm);
    let counts = cm.predicted_counts();
    Ok(ComparisonRow {
        arm: arm.to_owned(),
        seed: seed.to_string(),
        balanced_accuracy: balanced_accuracy(&cm)?,
        f1_class0: f1[0],
        f1_class1: f1[1],
        f1_class2: f1[2],
        predicted_class0: counts[0],
        predicted_class1: counts[1],
        predicted_class2: counts[2],
    })
}

fn median_row(arm: &str, rows: &[ComparisonRow]) -> ComparisonRow {
    let med = |f: fn(&ComparisonRow) -> f64| median(&rows.iter().map(f).collect::<Vec<_>>()).unwrap_or(f64::NAN);
    let med_u = |f: fn(&ComparisonRow) -> u64| med_count(rows.iter().map(f).collect());
    ComparisonRow {
        arm: arm.to_owned(),
        seed: "median".to_owned(),
        balanced_accuracy: med(|r| r.balanced_accuracy),
        f1_class0: med(|r| r.f1_class0),
        f1_class1: med(|r| r.f1_class1),
        f1_class2: med(|r| r.f1_class2),
        predicted_class0: med_u(|r| r.predicted_class0),
        predicted_class1: med_u(|r| r.predicted_class1),
        predicted_class2: med_u(|r| r.predicted_class2),
    }
}

/// Lower median, so the value is one of the observed counts.
fn med_count(mut v: Vec<u64>) -> u64 {
    v.sort_unstable();
    v.get(v.len().saturating_sub(1) / 2).copied().unwrap_or(0)
}

/// Both arms per seed, evaluated on the test split, with a median row per
/// arm.
#[allow(clippy::too_many_arguments)]
pub fn compare_transfer_vs_scratch(
    pretrained: &ProbeModel,
    train: (&[Vec<f64>], &[usize]),
    val: (&[Vec<f64>], &[usize]),
    test: (&[Vec<f64>], &[usize]),
    arch: &Architecture,
    transfer_cfg: &TrainConfig,
    scratch_cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<ComparisonReport> {
    if seeds.is_empty() {
        return Err(Error::arg("need at least one seed"));
    }
    let mut transfer = Vec::new();
    let mut scratch = Vec::new();
    for &seed in seeds {
        let tc = TrainConfig { seed, ..transfer_cfg.clone() };
        let t = transfer_train(pretrained, train, val, arch, &tc)?;
        transfer.push(test_row("transfer", seed, &t.model, test)?);
        let sc = TrainConfig { seed, ..scratch_cfg.clone() };
        let s = scratch_train(train, val, arch, &sc)?;
        scratch.push(test_row("scratch", seed, &s.model, test)?);
        log::info!(
            "seed {seed}: transfer BA {:.3}, scratch BA {:.3}",
            transfer.last().map_or(0.0, |r| r.balanced_accuracy),
            scratch.last().map_or(0.0, |r| r.balanced_accuracy)
        );
    }
    let mut rows = transfer.clone();
    rows.extend(scratch.iter().cloned());
    rows.push(median_row("transfer", &transfer));
    rows.push(median_row("scratch", &scratch));
    Ok(ComparisonReport { rows })
}

pub fn write_comparison_csv(report: &ComparisonReport, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in &report.rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<comparison csv>", e))?;
    Ok(())
}

/// History as CSV. The metric column is `val_r2` for regression and
/// `val_balanced_accuracy` for classification.
pub fn write_history_csv(history: &[HistoryRow], objective: Objective, out: impl Write) -> Result<()> {
    let metric = match objective {
        Objective::KlRegression => "val_r2",
        Objective::CrossEntropy3Class => "val_balanced_accuracy",
    };
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "train_loss", "val_loss", metric, "lr"])?;
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            r.train_loss.to_string(),
            r.val_loss.to_string(),
            r.val_metric.to_string(),
            r.lr.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<history csv>", e))?;
    Ok(())
}
