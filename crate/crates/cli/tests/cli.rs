use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Mutex;
use std::time::Instant;

use serde_json::Value;
use tempfile::TempDir;

use mttrack_eval::{Manifest, SuiteSpec};

// Timing assertions need the CPU to themselves.
static SERIAL: Mutex<()> = Mutex::new(());

fn mttrack(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mttrack"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("run mttrack")
}

fn ok(args: &[&str]) -> Output {
    let out = mttrack(args);
    assert!(
        out.status.success(),
        "mttrack {} failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn suite(dir: &TempDir, name: &str, seed: u64, sequences: usize, frames: usize) -> PathBuf {
    let p = dir.path().join(name);
    ok(&[
        "--out", s(&p), "--seed", &seed.to_string(), "synth", "--sequences", &sequences.to_string(), "--frames",
        &frames.to_string(),
    ]);
    p
}

#[test]
fn exit_codes() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&mttrack(&["--help"])), 0);
    assert_eq!(code(&mttrack(&["frobnicate"])), 1);
    assert_eq!(code(&mttrack(&["track", "--ablation", "nonsense", "--sequences", "x"])), 1);
    let missing = dir.path().join("missing");
    let out = mttrack(&["--out", s(&dir.path().join("o")), "track", "--sequences", s(&missing)]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    let out = mttrack(&["selftest", "--inject-fault", "softmax"]);
    assert_eq!(code(&out), 3);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.lines().any(|l| l.starts_with("FAIL attention/softmax_rows_sum_to_one")));
}

#[test]
fn unknown_config_key_is_a_named_usage_error() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"train": {"epochs": 1, "learning_rate": 0.1}}"#).unwrap();
    let out = mttrack(&["--config", s(&cfg), "--out", s(dir.path()), "synth"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("learning_rate"), "{}", stderr(&out));
}

#[test]
fn synth_default_shape_and_reproducible_hashes() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["--out", s(&a), "--seed", "9", "synth"]);
    ok(&["--out", s(&b), "--seed", "9", "synth"]);
    let ma: Manifest = serde_json::from_value(json(&a.join("manifest.json"))).unwrap();
    let mb: Manifest = serde_json::from_value(json(&b.join("manifest.json"))).unwrap();
    assert_eq!(ma.sequences.len(), 20);
    assert!(ma.sequences.iter().all(|e| e.frames == 100));
    let hashes = |m: &Manifest| m.sequences.iter().map(|e| e.sha256.clone()).collect::<Vec<_>>();
    assert_eq!(hashes(&ma), hashes(&mb));
    // a different seed renders different sequences
    let c = suite(&dir, "c", 10, 2, 10);
    let mc: Manifest = serde_json::from_value(json(&c.join("manifest.json"))).unwrap();
    assert_ne!(mc.sequences[0].sha256, ma.sequences[0].sha256);
    assert!(a.join("config.json").is_file());
}

#[test]
fn synth_manifest_lists_requested_occlusions() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let dir = TempDir::new().unwrap();
    let spec_path = dir.path().join("spec.json");
    std::fs::write(
        &spec_path,
        r#"{"sequences": 3, "frames": 30, "occlusion_probability": 1.0,
            "occlusions": [{"start": 10, "duration": 6, "coverage": 1.0}]}"#,
    )
    .unwrap();
    let out = dir.path().join("suite");
    ok(&["--out", s(&out), "--seed", "4", "synth", "--spec", s(&spec_path)]);
    let manifest: Manifest = serde_json::from_value(json(&out.join("manifest.json"))).unwrap();
    // oracle: expand the same suite description in-process
    let mut spec: SuiteSpec = serde_json::from_str(&std::fs::read_to_string(&spec_path).unwrap()).unwrap();
    spec.seed = mttrack_core::RngSeed(4);
    let expected = spec.expand().unwrap();
    assert_eq!(manifest.sequences.len(), 3);
    for (entry, want) in manifest.sequences.iter().zip(&expected) {
        assert_eq!(entry.occlusions, want.occlusions);
        assert_eq!(entry.occlusions[0].start, 10);
        assert_eq!(entry.occlusions[0].duration, 6);
        assert_eq!(entry.occlusions[0].coverage, 1.0);
        // plus the randomly drawn one
        assert_eq!(entry.occlusions.len(), 2);
    }
}

#[test]
fn eval_errors_and_oracle_results() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let dir = TempDir::new().unwrap();
    let seqs = suite(&dir, "seqs", 1, 2, 8);
    let empty = dir.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let out = mttrack(&["--out", s(&dir.path().join("e0")), "eval", "--results", s(&empty), "--sequences", s(&seqs)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("no sequences"), "{}", stderr(&out));

    // ground truth copied as results for one of the two sequences
    let results = dir.path().join("results");
    let gt = std::fs::read(seqs.join("synth_000").join("groundtruth_rect.txt")).unwrap();
    std::fs::create_dir_all(results.join("synth_000")).unwrap();
    std::fs::write(results.join("synth_000").join("results.txt"), &gt).unwrap();
    let out = mttrack(&["--out", s(&dir.path().join("e1")), "eval", "--results", s(&results), "--sequences", s(&seqs)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("missing results for sequences: synth_001"), "{}", stderr(&out));

    let gt = std::fs::read(seqs.join("synth_001").join("groundtruth_rect.txt")).unwrap();
    std::fs::create_dir_all(results.join("synth_001")).unwrap();
    std::fs::write(results.join("synth_001").join("results.txt"), &gt).unwrap();
    let scored = dir.path().join("e2");
    ok(&["--out", s(&scored), "eval", "--results", s(&results), "--sequences", s(&seqs)]);
    let m = json(&scored.join("metrics.json"));
    assert_eq!(m["aggregate"]["precision_at_20"], 1.0);
    assert_eq!(m["aggregate"]["mean_cle"], 0.0);
    assert_eq!(m["sequences"]["synth_001"]["precision_at_20"], 1.0);
}

#[test]
fn train_smoke_is_fast_and_deterministic() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let dir = TempDir::new().unwrap();
    let data = suite(&dir, "data", 2, 2, 20);
    let mut bytes = Vec::new();
    for rep in ["a", "b"] {
        let out = dir.path().join(rep);
        let start = Instant::now();
        ok(&[
            "--out", s(&out), "--seed", "3", "train", "--data", s(&data), "--epochs", "1", "--samples-per-epoch", "8",
        ]);
        let secs = start.elapsed().as_secs_f64();
        assert!(secs < 60.0, "smoke training took {secs:.1}s");
        bytes.push(std::fs::read(out.join("model.ckpt")).unwrap());
        assert!(out.join("loss.csv").is_file());
        assert!(out.join("config.json").is_file());
    }
    assert_eq!(bytes[0], bytes[1]);
}

fn loss_trace(path: &Path) -> Vec<(usize, f64)> {
    let mut r = csv::Reader::from_path(path).unwrap();
    assert_eq!(r.headers().unwrap(), vec!["step", "epoch", "lr", "loss"]);
    r.records()
        .map(|rec| {
            let rec = rec.unwrap();
            (rec[1].parse().unwrap(), rec[3].parse().unwrap())
        })
        .collect()
}

#[test]
fn train_loss_trace_decreases() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let dir = TempDir::new().unwrap();
    let data = suite(&dir, "data", 5, 3, 30);
    let out = dir.path().join("model");
    let ckpt = dir.path().join("elsewhere.ckpt");
    ok(&[
        "--out", s(&out), "--seed", "5", "train", "--data", s(&data), "--checkpoint", s(&ckpt), "--ablation", "baseline",
        "--epochs", "6", "--samples-per-epoch", "32",
    ]);
    assert!(ckpt.is_file());
    let trace = loss_trace(&out.join("loss.csv"));
    assert_eq!(trace.len(), 6 * 4);
    let epoch_mean = |e: usize| {
        let v: Vec<f64> = trace.iter().filter(|t| t.0 == e).map(|t| t.1).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    assert!(epoch_mean(5) < epoch_mean(0), "{} vs {}", epoch_mean(5), epoch_mean(0));
}

#[test]
fn track_writes_results_and_sweeps() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let dir = TempDir::new().unwrap();
    let seqs = suite(&dir, "seqs", 6, 2, 12);
    let single = dir.path().join("single");
    ok(&["--out", s(&single), "track", "--sequences", s(&seqs), "--ablation", "full"]);
    for name in ["synth_000", "synth_001"] {
        let results = std::fs::read_to_string(single.join(name).join("results.txt")).unwrap();
        assert_eq!(results.lines().count(), 12);
        let summary = json(&single.join(name).join("summary.json"));
        assert_eq!(summary["frames"], 12);
        assert_eq!(summary["ablation"], "full");
        assert!(summary["fps"].as_f64().unwrap() > 0.0);
    }

    let sweep = dir.path().join("sweep");
    ok(&["--out", s(&sweep), "track", "--sequences", s(&seqs), "--n-hist", "0,1,2,3,4,5"]);
    for n in 0..=5 {
        for name in ["synth_000", "synth_001"] {
            let summary = json(&sweep.join(format!("n{n}")).join(name).join("summary.json"));
            assert_eq!(summary["n_hist"], n);
        }
    }

    // a threshold no score can pass keeps the memory frozen
    let frozen = dir.path().join("frozen");
    ok(&["--out", s(&frozen), "track", "--sequences", s(&seqs), "--tau", "1e9"]);
    let summary = json(&frozen.join("synth_000").join("summary.json"));
    assert!(summary["accepted"].as_array().unwrap().iter().all(|a| a == false));

    // a single sequence directory is accepted as well
    let one = dir.path().join("one");
    ok(&["--out", s(&one), "track", "--sequences", s(&seqs.join("synth_001"))]);
    assert!(one.join("synth_001").join("results.txt").is_file());
}

#[test]
fn bench_limits_window_and_is_stable() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let dir = TempDir::new().unwrap();
    let seqs = suite(&dir, "seqs", 7, 1, 80);
    let mut fps = Vec::new();
    for rep in ["a", "b"] {
        let out = dir.path().join(rep);
        ok(&["--out", s(&out), "bench", "--sequence", s(&seqs), "--frames", "10"]);
        fps.push(json(&out.join("bench.json")));
    }
    assert_eq!(fps[0]["frames"], 10);
    let stages = fps[0]["stage_ms"].as_object().unwrap();
    assert!(stages.values().all(|v| v.as_f64().unwrap() >= 0.0));
    assert_eq!(fps[0]["params_analytic"], fps[0]["params_checkpoint"]);

    let mut runs = Vec::new();
    for rep in ["c", "d"] {
        let out = dir.path().join(rep);
        ok(&["--out", s(&out), "bench", "--sequence", s(&seqs), "--frames", "60"]);
        runs.push(json(&out.join("bench.json"))["fps"].as_f64().unwrap());
    }
    let ratio = runs[0].max(runs[1]) / runs[0].min(runs[1]);
    assert!(ratio <= 1.2, "fps {runs:?}");
}
