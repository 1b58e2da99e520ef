use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use motionsynth::dataset::{write_manifest, ManifestEntry, Split};
use motionsynth::phantom::head;
use motionsynth::volume::write_volume;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_motionsynth"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: &str = r#"schema_version = 1

[generation.augment]
roi = [24, 24, 24]

[toy]
source_dims = [28, 32, 28]
spacing = 6.0
roi = [24, 24, 24]
train_sources = 3
val_sources = 2
passes = 2
qc_train = [2, 3, 4]
qc_val = [1, 2, 2]
qc_test = [2, 3, 3]
"#;

fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("small.toml");
    std::fs::write(&path, SMALL).unwrap();
    path
}

fn sources(dir: &Path, sites: &[&str]) -> PathBuf {
    let entries: Vec<ManifestEntry> = sites
        .iter()
        .enumerate()
        .map(|(i, site)| {
            let path = dir.join(format!("sub-{i}.nii.gz"));
            write_volume(&head([28, 32, 28], 6.0, i as u64), &path).unwrap();
            ManifestEntry::new(&format!("sub-{i}"), site, path)
        })
        .collect();
    let manifest = dir.join("manifest.csv");
    write_manifest(&entries, &manifest).unwrap();
    manifest
}

fn report_json(out: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap()
}

#[test]
fn help_and_bad_flags() {
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["generate", "--passes", "many"])), 1);
    assert_eq!(code(&run(&["frobnicate"])), 1);
}

#[test]
fn missing_manifest_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["generate", "--manifest", p(&dir.path().join("nope.csv")), "--out", p(dir.path())]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("nope.csv"));
    assert_eq!(code(&run(&["generate", "--out", p(dir.path())])), 1);
}

#[test]
fn config_round_trips_and_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["config"]);
    assert_eq!(code(&o), 0);
    let path = dir.path().join("c.toml");
    std::fs::write(&path, stdout(&o)).unwrap();
    let again = run(&["--config", p(&path), "config"]);
    assert_eq!(stdout(&again), stdout(&o));

    std::fs::write(&path, "schema_version = 1\n[generation]\npases = 3\n").unwrap();
    let bad = run(&["--config", p(&path), "config"]);
    assert_eq!(code(&bad), 1);
    assert!(stderr(&bad).contains("pases"));
}

#[test]
fn generate_passes_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = sources(dir.path(), &["A", "B"]);
    let cfg = small_config(dir.path());
    let out = dir.path().join("gen");
    let args = ["--config", p(&cfg), "generate", "--manifest", p(&manifest), "--out", p(&out), "--passes", "3"];
    let o = run(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = report_json(&out);
    assert_eq!(r["generated"], 6);
    let labels = std::fs::read_to_string(out.join("labels.csv")).unwrap();
    assert_eq!(labels.lines().count(), 1 + 6);

    let o = run(&args);
    assert_eq!(code(&o), 0);
    let r = report_json(&out);
    assert_eq!((r["generated"].as_u64(), r["resumed"].as_u64()), (Some(0), Some(6)));

    let features = dir.path().join("features.csv");
    let o = run(&["features", "--run", p(&out), "--out", p(&features)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(&features).unwrap().lines().count(), 7);
}

#[test]
fn split_rejects_overlapping_pools() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = sources(dir.path(), &["A", "B", "C"]);
    let out = dir.path().join("split.csv");
    let o = run(&["split", "--manifest", p(&manifest), "--out", p(&out), "--synth-sites", "A,B", "--qc-sites", "B,C"]);
    assert_eq!(code(&o), 1);
    assert!(!out.exists());

    let o = run(&[
        "split", "--manifest", p(&manifest), "--out", p(&out), "--synth-sites", "A,B", "--qc-sites", "C",
        "--fractions", "0.4,0.3,0.3",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(code(&run(&["audit", "--manifest", p(&out)])), 0);
}

#[test]
fn audit_reports_the_leaking_subject() {
    let dir = tempfile::tempdir().unwrap();
    let mut a = ManifestEntry::new("sub-leaky", "A", "x1.nii.gz");
    a.split = Split::Train;
    let mut b = ManifestEntry::new("sub-leaky", "A", "x2.nii.gz");
    b.split = Split::Val;
    let manifest = dir.path().join("m.csv");
    write_manifest(&[a, b], &manifest).unwrap();
    let o = run(&["audit", "--manifest", p(&manifest)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("sub-leaky"));
}

fn eval(dir: &Path, pred: &str, truth: &str, task: &str) -> serde_json::Value {
    let (pp, tp) = (dir.join("pred.csv"), dir.join("truth.csv"));
    std::fs::write(&pp, pred).unwrap();
    std::fs::write(&tp, truth).unwrap();
    let o = run(&["eval", "--pred", p(&pp), "--truth", p(&tp), "--task", task]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    serde_json::from_str(&stdout(&o)).unwrap()
}

fn column(values: impl Iterator<Item = String>) -> String {
    std::iter::once("id,value".to_string())
        .chain(values.enumerate().map(|(i, v)| format!("v{i},{v}")))
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn eval_fixtures() {
    let dir = tempfile::tempdir().unwrap();
    let scores = column([0.1, 1.7, 2.2, 3.9].iter().map(|x| x.to_string()));
    let r = eval(dir.path(), &scores, &scores, "regression");
    assert_eq!(r["r2"], 1.0);

    let labels = column([0, 1, 2, 2, 1].iter().map(|x| x.to_string()));
    let r = eval(dir.path(), &labels, &labels, "classification");
    assert_eq!(r["balanced_accuracy"], 1.0);

    let truth: Vec<String> = [(0, 9), (1, 90), (2, 125)]
        .iter()
        .flat_map(|&(c, n)| std::iter::repeat(c.to_string()).take(n))
        .collect();
    let r = eval(
        dir.path(),
        &column(std::iter::repeat("2".to_string()).take(224)),
        &column(truth.into_iter()),
        "classification",
    );
    assert!((r["balanced_accuracy"].as_f64().unwrap() - 1.0 / 3.0).abs() < 1e-12);
    assert!((r["f1"][2].as_f64().unwrap() - 0.7163).abs() < 1e-4);

    let (pp, tp) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    std::fs::write(&pp, "id,value\nx,1\n").unwrap();
    std::fs::write(&tp, "id,value\ny,1\n").unwrap();
    assert_eq!(code(&run(&["eval", "--pred", p(&pp), "--truth", p(&tp), "--task", "regression"])), 2);
}

#[test]
fn toy_probe_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let toy = dir.path().join("toy");
    let o = run(&["--config", p(&cfg), "toy", "--out", p(&toy)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let fixture_cfg = toy.join("config.toml");
    assert!(fixture_cfg.is_file());

    // learning rate 0: weights never move, so every epoch scores the same
    let frozen = dir.path().join("frozen");
    let o = run(&[
        "--config", p(&fixture_cfg), "probe", "pretrain", "--features", p(&toy.join("motion_features.csv")),
        "--out", p(&frozen), "--lr", "0", "--max-epochs", "4",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let history = std::fs::read_to_string(frozen.join("history.csv")).unwrap();
    let val_losses: Vec<&str> = history.lines().skip(1).map(|l| l.split(',').nth(2).unwrap()).collect();
    assert_eq!(val_losses.len(), 4);
    assert!(val_losses.iter().all(|v| *v == val_losses[0]));

    let trained = dir.path().join("trained");
    let o = run(&[
        "--config", p(&fixture_cfg), "probe", "pretrain", "--features", p(&toy.join("motion_features.csv")),
        "--out", p(&trained), "--max-epochs", "5",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["pretrained.bin", "pretrained.json", "calibration.csv", "metrics.json"] {
        assert!(trained.join(f).is_file(), "{f}");
    }

    let ckpt = trained.join("pretrained");
    let qc = toy.join("qc_features.csv");
    let o = run(&[
        "--config", p(&fixture_cfg), "probe", "transfer", "--checkpoint", p(&ckpt), "--features", p(&qc),
        "--out", p(&dir.path().join("transfer")), "--max-epochs", "3",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(summary["test"]["balanced_accuracy"].is_number());

    let table = dir.path().join("compare.csv");
    let o = run(&[
        "--config", p(&fixture_cfg), "probe", "compare", "--checkpoint", p(&ckpt), "--features", p(&qc),
        "--seeds", "5", "--out", p(&table),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = std::fs::read_to_string(&table).unwrap();
    assert_eq!(rows.lines().count(), 1 + 10 + 2);
    assert_eq!(rows.lines().filter(|l| l.contains("median")).count(), 2);

    // a classifier checkpoint cannot seed transfer
    let o = run(&[
        "probe", "transfer", "--checkpoint", p(&dir.path().join("transfer/transfer")), "--features", p(&qc),
        "--out", p(&dir.path().join("again")),
    ]);
    assert_eq!(code(&o), 1);
}
