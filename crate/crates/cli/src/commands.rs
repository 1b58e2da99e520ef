use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use motionsynth::dataset::{
    audit as audit_manifest, filter_for_synthesis, read_manifest, run_generation, split_by_site, split_subjects,
    write_manifest, Split, DEFAULT_MOTION_KEYWORDS,
};
use motionsynth::metrics::{calibration_curve, write_calibration_csv, ConfusionMatrix, MetricsReport};
use motionsynth::probe::{
    class_targets, compare_transfer_vs_scratch, features_from_labels, load_checkpoint, predict_classes,
    predict_scores, pretrain as pretrain_probe, read_feature_csv, save_checkpoint, scratch_train, select_split,
    to_matrix, transfer_train, write_comparison_csv, write_feature_csv, write_history_csv, ClassifierOutcome, Head,
    Objective, ProbeModel, TrainConfig, N_QC_CLASSES,
};
use motionsynth::toy::{write_toy_fixture, ToyConfig, MOTION_FEATURES, QC_FEATURES};
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::{
    AuditArgs, CompareArgs, EvalArgs, Failure, FeaturesArgs, FilterArgs, GenerateArgs, PretrainArgs, ScratchArgs,
    SplitArgs, Task, ToyArgs, TrainOverrides, TransferArgs,
};

type Outcome = Result<(), Failure>;

fn require_file(path: &Path, what: &str) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::usage(format!("{what} {} does not exist", path.display())))
    }
}

fn create_dir(path: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(path).map_err(|e| Failure::data(format!("cannot create {}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::data(format!("cannot write {}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Outcome {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::data(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Failure::data(format!("cannot write {}: {e}", path.display())))
}

fn print_json(value: &impl Serialize) -> Outcome {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::data(e.to_string()))?;
    println!("{text}");
    Ok(())
}

pub fn print_config(cfg: &RunConfig) -> Outcome {
    print!("{}", cfg.to_toml()?);
    Ok(())
}

pub fn generate(mut cfg: RunConfig, a: GenerateArgs) -> Outcome {
    let manifest = a
        .manifest
        .or(cfg.paths.manifest.take())
        .ok_or_else(|| Failure::usage("generate needs --manifest (or paths.manifest in the config)"))?;
    let out = a
        .out
        .or(cfg.paths.out.take())
        .ok_or_else(|| Failure::usage("generate needs --out (or paths.out in the config)"))?;
    require_file(&manifest, "manifest")?;
    let mut gen = cfg.generation;
    if let Some(p) = a.passes {
        gen.passes = p;
    }
    if let Some(s) = a.seed {
        gen.master_seed = s;
    }
    if let Some(w) = a.workers {
        gen.workers = w;
    }
    gen.validate().map_err(Failure::usage_from)?;
    let entries = read_manifest(&manifest)?;
    let report = run_generation(&entries, &gen, &out)?;
    log::info!(
        "{} outputs ({} new, {} resumed, {} failed)",
        report.outputs,
        report.generated,
        report.resumed,
        report.failed
    );
    println!("{}", out.join("report.json").display());
    Ok(())
}

pub fn filter(a: FilterArgs) -> Outcome {
    require_file(&a.manifest, "manifest")?;
    let entries = read_manifest(&a.manifest)?;
    let kept = if a.keywords.is_empty() {
        filter_for_synthesis(&entries, &DEFAULT_MOTION_KEYWORDS)
    } else {
        filter_for_synthesis(&entries, &a.keywords)
    };
    write_manifest(&kept, &a.out)?;
    print_json(&json!({ "input": entries.len(), "kept": kept.len(), "manifest": a.out }))
}

pub fn split(a: SplitArgs) -> Outcome {
    require_file(&a.manifest, "manifest")?;
    let by_site = !a.synth_sites.is_empty() || !a.qc_sites.is_empty();
    if !by_site && a.fractions.is_none() {
        return Err(Failure::usage("split needs --synth-sites/--qc-sites and/or --fractions"));
    }
    let mut entries = read_manifest(&a.manifest)?;
    if by_site {
        entries = split_by_site(&entries, &a.synth_sites, &a.qc_sites)?;
    }
    if let Some(f) = &a.fractions {
        if f.len() != 3 {
            return Err(Failure::usage("--fractions takes train,val,test"));
        }
        entries = split_subjects(&entries, [f[0], f[1], f[2]], a.seed)?;
    }
    audit_manifest(&entries)?;
    write_manifest(&entries, &a.out)?;
    let count = |s: Split| entries.iter().filter(|e| e.split == s).count();
    print_json(&json!({
        "entries": entries.len(),
        "train": count(Split::Train),
        "val": count(Split::Val),
        "test": count(Split::Test),
        "manifest": a.out,
    }))
}

pub fn audit(a: AuditArgs) -> Outcome {
    require_file(&a.manifest, "manifest")?;
    let entries = read_manifest(&a.manifest)?;
    audit_manifest(&entries)?;
    print_json(&json!({ "entries": entries.len(), "ok": true }))
}

/// The `value` column (else the last one) and the `id` column if present.
fn read_column(path: &Path) -> Result<(Option<Vec<String>>, Vec<String>), Failure> {
    require_file(path, "input")?;
    let mut r = csv::Reader::from_path(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
    let headers = r.headers().map_err(|e| Failure::data(e.to_string()))?.clone();
    if headers.is_empty() {
        return Err(Failure::data(format!("{}: no columns", path.display())));
    }
    let value = headers.iter().position(|h| h == "value").unwrap_or(headers.len() - 1);
    let id = headers.iter().position(|h| h == "id");
    let (mut ids, mut values) = (Vec::new(), Vec::new());
    for rec in r.records() {
        let rec = rec.map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
        values.push(rec.get(value).unwrap_or("").trim().to_string());
        if let Some(i) = id {
            ids.push(rec.get(i).unwrap_or("").to_string());
        }
    }
    Ok((id.map(|_| ids), values))
}

fn parse_all<T: std::str::FromStr>(values: &[String], path: &Path) -> Result<Vec<T>, Failure> {
    values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            v.parse()
                .map_err(|_| Failure::data(format!("{}:{}: cannot parse {v:?}", path.display(), i + 2)))
        })
        .collect()
}

pub fn eval(a: EvalArgs) -> Outcome {
    let (pred_ids, pred) = read_column(&a.pred)?;
    let (truth_ids, truth) = read_column(&a.truth)?;
    if pred.len() != truth.len() {
        return Err(Failure::data(format!("{} predictions vs {} truth rows", pred.len(), truth.len())));
    }
    if let (Some(p), Some(t)) = (&pred_ids, &truth_ids) {
        if let Some(i) = p.iter().zip(t).position(|(x, y)| x != y) {
            return Err(Failure::data(format!("row {}: id {:?} vs {:?}", i + 2, p[i], t[i])));
        }
    }
    let report = match a.task {
        Task::Regression => {
            let p: Vec<f64> = parse_all(&pred, &a.pred)?;
            let t: Vec<f64> = parse_all(&truth, &a.truth)?;
            if let Some(path) = &a.calibration_out {
                let points = calibration_curve(&t, &p, a.calibration_points)?;
                write_calibration_csv(&points, create(path)?)?;
            }
            MetricsReport::regression(&t, &p)?
        }
        Task::Classification => {
            let p: Vec<usize> = parse_all(&pred, &a.pred)?;
            let t: Vec<usize> = parse_all(&truth, &a.truth)?;
            MetricsReport::classification(&ConfusionMatrix::from_labels(&t, &p, a.classes)?)
        }
    };
    if let Some(path) = &a.metrics_out {
        write_json(path, &report)?;
    }
    print_json(&report)
}

pub fn features(a: FeaturesArgs) -> Outcome {
    require_file(&a.run.join("labels.csv"), "generation labels")?;
    let rows = features_from_labels(&a.run, "labels.csv")?;
    write_feature_csv(&rows, &a.out)?;
    print_json(&json!({ "rows": rows.len(), "features": a.out }))
}

pub fn toy(cfg: RunConfig, a: ToyArgs) -> Outcome {
    let mut toy = cfg.toy.clone();
    if let Some(w) = a.workers {
        toy.workers = w;
    }
    create_dir(&a.out)?;
    let (motion, qc) = write_toy_fixture(&a.out, &toy)?;
    // a config that trains on this fixture with the toy step size
    let fixture_cfg = RunConfig {
        pretrain: ToyConfig::pretrain_config(),
        toy,
        ..cfg
    };
    let cfg_path = a.out.join("config.toml");
    std::fs::write(&cfg_path, fixture_cfg.to_toml()?)
        .map_err(|e| Failure::data(format!("cannot write {}: {e}", cfg_path.display())))?;
    print_json(&json!({
        "motion_features": a.out.join(MOTION_FEATURES),
        "motion_train": motion.train.targets.len(),
        "motion_val": motion.val.targets.len(),
        "qc_features": a.out.join(QC_FEATURES),
        "qc_train": qc.train.targets.len(),
        "qc_val": qc.val.targets.len(),
        "qc_test": qc.test.targets.len(),
        "config": cfg_path,
    }))
}

fn apply(mut t: TrainConfig, o: &TrainOverrides) -> Result<TrainConfig, Failure> {
    if let Some(lr) = o.lr {
        t.lr = lr;
    }
    if let Some(e) = o.max_epochs {
        t.max_epochs = e;
    }
    if let Some(s) = o.seed {
        t.seed = s;
    }
    t.validate().map_err(Failure::usage_from)?;
    Ok(t)
}

fn history_csv(path: &Path, outcome: &[motionsynth::probe::HistoryRow], objective: Objective) -> Outcome {
    Ok(write_history_csv(outcome, objective, create(path)?)?)
}

pub fn pretrain(cfg: RunConfig, a: PretrainArgs) -> Outcome {
    require_file(&a.features, "feature table")?;
    let train_cfg = apply(cfg.pretrain, &a.train)?;
    let rows = read_feature_csv(&a.features)?;
    let (x, y) = select_split(&rows, Split::Train);
    let (xv, yv) = select_split(&rows, Split::Val);
    let bins = cfg.generation.bins.clone();
    let out = pretrain_probe((&x, &y), (&xv, &yv), &bins, &cfg.architecture, &train_cfg)?;
    create_dir(&a.out)?;
    let stem = a.out.join("pretrained");
    save_checkpoint(&out.model, &stem)?;
    history_csv(&a.out.join("history.csv"), &out.history, Objective::KlRegression)?;
    let pred = predict_scores(&out.model.mlp, &to_matrix(&xv)?, &bins)?;
    write_calibration_csv(&calibration_curve(&yv, &pred, 10)?, create(&a.out.join("calibration.csv"))?)?;
    let report = MetricsReport::regression(&yv, &pred)?;
    write_json(&a.out.join("metrics.json"), &report)?;
    print_json(&json!({
        "checkpoint": stem,
        "best_epoch": out.best_epoch,
        "epochs": out.history.len(),
        "val": report,
    }))
}

struct QcData {
    train: (Vec<Vec<f64>>, Vec<usize>),
    val: (Vec<Vec<f64>>, Vec<usize>),
    test: (Vec<Vec<f64>>, Vec<usize>),
}

fn qc_data(path: &Path) -> Result<QcData, Failure> {
    require_file(path, "feature table")?;
    let rows = read_feature_csv(path)?;
    let part = |s| -> Result<(Vec<Vec<f64>>, Vec<usize>), Failure> {
        let (x, y) = select_split(&rows, s);
        Ok((x, class_targets(&y, N_QC_CLASSES)?))
    };
    Ok(QcData {
        train: part(Split::Train)?,
        val: part(Split::Val)?,
        test: part(Split::Test)?,
    })
}

fn test_report(model: &ProbeModel, test: &(Vec<Vec<f64>>, Vec<usize>)) -> Result<Option<MetricsReport>, Failure> {
    if test.0.is_empty() {
        return Ok(None);
    }
    let pred = predict_classes(&model.mlp, &to_matrix(&test.0)?)?;
    Ok(Some(MetricsReport::classification(&ConfusionMatrix::from_labels(
        &test.1,
        &pred,
        N_QC_CLASSES,
    )?)))
}

fn finish_classifier(out_dir: &Path, name: &str, outcome: ClassifierOutcome, data: &QcData) -> Outcome {
    create_dir(out_dir)?;
    let stem = out_dir.join(name);
    save_checkpoint(&outcome.model, &stem)?;
    history_csv(&out_dir.join("history.csv"), &outcome.history, Objective::CrossEntropy3Class)?;
    let test = test_report(&outcome.model, &data.test)?;
    let summary = json!({
        "checkpoint": stem,
        "best_epoch": outcome.best_epoch,
        "epochs": outcome.history.len(),
        "val": outcome.val,
        "test": test,
    });
    write_json(&out_dir.join("metrics.json"), &summary)?;
    print_json(&summary)
}

fn load_pretrained(stem: &PathBuf) -> Result<ProbeModel, Failure> {
    require_file(&stem.with_extension("json"), "checkpoint descriptor")?;
    let model = load_checkpoint(stem)?;
    if !matches!(model.head, Head::Bins { .. }) {
        return Err(Failure::usage(format!("{} is not a pretrained motion-score checkpoint", stem.display())));
    }
    Ok(model)
}

pub fn transfer(cfg: RunConfig, a: TransferArgs) -> Outcome {
    let train_cfg = apply(cfg.transfer, &a.train)?;
    let pretrained = load_pretrained(&a.checkpoint)?;
    let data = qc_data(&a.features)?;
    let outcome = transfer_train(
        &pretrained,
        (&data.train.0, &data.train.1),
        (&data.val.0, &data.val.1),
        &cfg.architecture,
        &train_cfg,
    )?;
    finish_classifier(&a.out, "transfer", outcome, &data)
}

pub fn scratch(cfg: RunConfig, a: ScratchArgs) -> Outcome {
    let train_cfg = apply(cfg.scratch, &a.train)?;
    let data = qc_data(&a.features)?;
    let outcome = scratch_train(
        (&data.train.0, &data.train.1),
        (&data.val.0, &data.val.1),
        &cfg.architecture,
        &train_cfg,
    )?;
    finish_classifier(&a.out, "scratch", outcome, &data)
}

pub fn compare(cfg: RunConfig, a: CompareArgs) -> Outcome {
    if a.seeds == 0 {
        return Err(Failure::usage("--seeds must be >= 1"));
    }
    let pretrained = load_pretrained(&a.checkpoint)?;
    let data = qc_data(&a.features)?;
    if data.test.0.is_empty() {
        return Err(Failure::data("feature table has no test rows"));
    }
    let seeds: Vec<u64> = (0..a.seeds).collect();
    let report = compare_transfer_vs_scratch(
        &pretrained,
        (&data.train.0, &data.train.1),
        (&data.val.0, &data.val.1),
        (&data.test.0, &data.test.1),
        &cfg.architecture,
        &cfg.transfer,
        &cfg.scratch,
        &seeds,
    )?;
    for arm in ["transfer", "scratch"] {
        if let Some(m) = report.median(arm) {
            log::info!("{arm}: median balanced accuracy {:.3}", m.balanced_accuracy);
        }
    }
    match &a.out {
        Some(path) => {
            write_comparison_csv(&report, create(path)?)?;
            println!("{}", path.display());
        }
        None => write_comparison_csv(&report, io::stdout().lock())?,
    }
    io::stdout().flush().map_err(|e| Failure::data(e.to_string()))
}
