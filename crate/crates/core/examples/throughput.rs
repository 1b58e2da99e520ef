//! Time batch generation of full-size volumes.
//!
//! Usage: `cargo run --release -p motionsynth --example throughput -- [volumes] [workers...]`
//! Defaults: 100 volumes, workers 1 and 8.

use std::path::Path;
use std::time::Instant;

use motionsynth::dataset::{run_generation, GenerationConfig, ManifestEntry};
use motionsynth::phantom::head;
use motionsynth::volume::write_volume;

fn peak_rss_mb() -> Option<f64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: f64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb / 1024.0)
}

fn main() {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().expect("integer argument")).collect();
    let volumes = args.first().copied().unwrap_or(100);
    let workers: Vec<usize> = if args.len() > 1 { args[1..].to_vec() } else { vec![1, 8] };

    let dir = tempfile::tempdir().expect("tempdir");
    let src = dir.path().join("src.nii.gz");
    write_volume(&head([182, 218, 182], 1.0, 0), &src).expect("write source");
    let entry = ManifestEntry::new("sub0", "A", &src);

    let mut baseline = None;
    for &w in &workers {
        let cfg = GenerationConfig {
            passes: volumes as u64,
            workers: w,
            master_seed: 1,
            ..GenerationConfig::default()
        };
        let out = dir.path().join(format!("out{w}"));
        let t = Instant::now();
        let report = run_generation(std::slice::from_ref(&entry), &cfg, Path::new(&out)).expect("generation");
        let secs = t.elapsed().as_secs_f64();
        let base = *baseline.get_or_insert(secs);
        println!(
            "workers={w} volumes={} seconds={secs:.1} per_volume={:.2} speedup={:.2} peak_rss_mb={:.0}",
            report.generated,
            secs / volumes as f64,
            base / secs,
            peak_rss_mb().unwrap_or(f64::NAN)
        );
    }
    println!("available_parallelism={}", std::thread::available_parallelism().map_or(0, |n| n.get()));
}
