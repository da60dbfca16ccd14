//! One function per subcommand. Each writes its outputs plus the effective
//! configuration into the output directory and returns its report.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use mttrack_core::selftest::{run_core_checks, CheckResult};
use mttrack_core::tracker::{
    load_checkpoint, save_checkpoint, toy_train, Ablation, Network, ParamBreakdown, StageTimes, Tracker,
    TrainReport,
};
use mttrack_core::transformer::TransformerSwitches;
use mttrack_core::{BBox, Fault, Graph, Tensor};
use mttrack_eval::{compute_metrics, format_boxes, parse_boxes, write_suite, Manifest, MetricsReport, Sequence, TrackResult};

use crate::config::RunConfig;
use crate::data::{sequences_at, training_set};
use crate::error::{CliError, CliResult};
use crate::oracle::metric_oracle_checks;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOSS_FILE: &str = "loss.csv";
pub const RESULTS_FILE: &str = "results.txt";
pub const SUMMARY_FILE: &str = "summary.json";

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn create_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report serializes")
}

/// The configured checkpoint, or a freshly initialized model.
pub fn network(cfg: &RunConfig) -> CliResult<Network> {
    match &cfg.checkpoint {
        Some(p) => Ok(load_checkpoint(p)?),
        None => {
            log::warn!("no checkpoint given; using an untrained model");
            Ok(Network::new(&cfg.model)?)
        }
    }
}

// ------------------------------------------------------------------ synth

pub fn cmd_synth(cfg: &RunConfig) -> CliResult<Manifest> {
    let out = cfg.out_dir()?;
    let manifest = write_suite(&cfg.synth, out)?;
    cfg.echo(out)?;
    Ok(manifest)
}

// ------------------------------------------------------------------ train

/// Trains on every sequence under the data directory and writes the
/// checkpoint (to `cfg.checkpoint`, else `model.ckpt` in the output
/// directory) and a per-step loss trace.
pub fn cmd_train(cfg: &RunConfig) -> CliResult<TrainReport> {
    let out = cfg.out_dir()?;
    let data = cfg
        .data_dir
        .as_deref()
        .ok_or_else(|| CliError::Usage("no training data directory (use --data)".into()))?;
    let seqs = sequences_at(data)?;
    let train = training_set(&seqs)?;
    log::info!("training {} on {} sequences", cfg.train.ablation, train.len());
    let mut net = Network::new(&cfg.model)?;
    let report = toy_train(&mut net, &train, &cfg.train)?;
    create_dir(out)?;
    let ckpt = cfg.checkpoint.clone().unwrap_or_else(|| out.join(CHECKPOINT_FILE));
    save_checkpoint(&net, &ckpt)?;
    write_loss_trace(&out.join(LOSS_FILE), &report, cfg.train.samples_per_epoch.div_ceil(cfg.train.batch_size))?;
    cfg.echo(out)?;
    Ok(report)
}

fn write_loss_trace(path: &Path, report: &TrainReport, steps_per_epoch: usize) -> CliResult<()> {
    let csv_err = |e: csv::Error| CliError::data(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["step", "epoch", "lr", "loss"]).map_err(csv_err)?;
    for (i, loss) in report.step_losses.iter().enumerate() {
        let epoch = i / steps_per_epoch;
        let lr = report.epoch_lrs[epoch];
        w.write_record([i.to_string(), epoch.to_string(), lr.to_string(), loss.to_string()])
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

// ------------------------------------------------------------------ track

/// Per-sequence record written next to `results.txt`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackSummary {
    pub sequence: String,
    pub ablation: Ablation,
    pub tau: f64,
    pub n_hist: usize,
    pub frames: usize,
    /// Frames per second over the whole sequence, initialization included.
    pub fps: f64,
    /// Confidence of every tracked frame (frame 0 is the initialization).
    pub scores: Vec<f64>,
    /// Whether each tracked frame entered the template memory.
    pub accepted: Vec<bool>,
    /// Serialized tracker state size after the last frame.
    pub state_bytes: usize,
}

/// Runs one sequence from its first ground-truth box.
pub fn track_sequence(tracker: &Tracker, seq: &Sequence) -> CliResult<(Vec<BBox>, TrackSummary)> {
    let first = seq.frames[0].load()?;
    let start = Instant::now();
    let mut state = tracker.init(&first, seq.gt[0])?;
    let mut elapsed = start.elapsed();
    let mut boxes = vec![seq.gt[0]];
    let (mut scores, mut accepted) = (Vec::new(), Vec::new());
    for f in &seq.frames[1..] {
        let img = f.load()?;
        let t = Instant::now();
        let step = tracker.track(&mut state, &img)?;
        elapsed += t.elapsed();
        boxes.push(step.bbox);
        scores.push(step.score);
        accepted.push(step.accepted);
    }
    let secs = elapsed.as_secs_f64();
    let summary = TrackSummary {
        sequence: seq.name.clone(),
        ablation: tracker.ablation(),
        tau: state.mem.tau(),
        n_hist: tracker.cfg().n_hist,
        frames: seq.len(),
        fps: if secs > 0.0 { seq.len() as f64 / secs } else { 0.0 },
        scores,
        accepted,
        state_bytes: state.to_bytes().len(),
    };
    Ok((boxes, summary))
}

/// Tracks every sequence under `sequences`. With several memory sizes each
/// setting writes to its own `n{k}` subdirectory; otherwise results go to
/// `{out}/{sequence}/`.
pub fn cmd_track(cfg: &RunConfig, sequences: &Path) -> CliResult<BTreeMap<usize, Vec<TrackSummary>>> {
    let out = cfg.out_dir()?;
    let seqs = sequences_at(sequences)?;
    let base = network(cfg)?;
    let settings: Vec<Option<usize>> = if cfg.track.n_hist.is_empty() {
        vec![None]
    } else {
        cfg.track.n_hist.iter().map(|&n| Some(n)).collect()
    };
    let sweep = settings.len() > 1;
    let mut all = BTreeMap::new();
    for n in settings {
        let net = match n {
            Some(n) => base.with_history(n)?,
            None => base.clone(),
        };
        let n_eff = net.cfg().n_hist;
        let mut tracker = Tracker::new(Arc::new(net), cfg.track.ablation);
        if let Some(tau) = cfg.track.tau {
            tracker = tracker.with_tau(tau);
        }
        let dir = if sweep { out.join(format!("n{n_eff}")) } else { out.to_path_buf() };
        let summaries = seqs
            .par_iter()
            .map(|seq| {
                let (boxes, summary) = track_sequence(&tracker, seq)?;
                let sdir = dir.join(&seq.name);
                create_dir(&sdir)?;
                write(&sdir.join(RESULTS_FILE), format_boxes(&boxes))?;
                write(&sdir.join(SUMMARY_FILE), to_json(&summary))?;
                Ok(summary)
            })
            .collect::<CliResult<Vec<_>>>()?;
        cfg.echo(&dir)?;
        all.insert(n_eff, summaries);
    }
    Ok(all)
}

// ------------------------------------------------------------------ eval

/// Scores `{results}/{name}/results.txt` against every sequence under
/// `sequences`; writes `metrics.json` and curve CSVs.
pub fn cmd_eval(cfg: &RunConfig, results: &Path, sequences: &Path) -> CliResult<MetricsReport> {
    let out = cfg.out_dir()?;
    let available: Vec<PathBuf> = std::fs::read_dir(results)
        .map_err(|e| CliError::io(results, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(RESULTS_FILE).is_file())
        .collect();
    if available.is_empty() {
        return Err(CliError::data(format!("no sequences with results in {}", results.display())));
    }
    let seqs = sequences_at(sequences)?;
    let missing: Vec<&str> = seqs
        .iter()
        .filter(|s| !results.join(&s.name).join(RESULTS_FILE).is_file())
        .map(|s| s.name.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(CliError::data(format!("missing results for sequences: {}", missing.join(", "))));
    }
    let mut tracked = BTreeMap::new();
    for s in &seqs {
        let dir = results.join(&s.name);
        let path = dir.join(RESULTS_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        let boxes = parse_boxes(&text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        let summary: Option<TrackSummary> = std::fs::read_to_string(dir.join(SUMMARY_FILE))
            .ok()
            .and_then(|t| serde_json::from_str(&t).ok());
        let (scores, fps) = summary.map(|s| (s.scores, s.fps)).unwrap_or_default();
        tracked.insert(s.name.clone(), TrackResult { boxes, scores, fps });
    }
    let gts = seqs.iter().map(|s| (s.name.clone(), s.gt.clone())).collect();
    let report = compute_metrics(&tracked, &gts)?;
    report.write(out)?;
    cfg.echo(out)?;
    Ok(report)
}

// ------------------------------------------------------------------ selftest

#[derive(Debug, Clone, Serialize)]
pub struct SelftestReport {
    pub checks: Vec<CheckResult>,
    pub passed: bool,
    pub seconds: f64,
}

impl SelftestReport {
    pub fn failed(&self) -> usize {
        self.checks.iter().filter(|c| !c.passed).count()
    }
}

/// Numerical checks of the kernel, attention, memory and metrics.
pub fn cmd_selftest(fault: Fault) -> CliResult<SelftestReport> {
    let start = Instant::now();
    let mut checks = run_core_checks(fault)?;
    checks.extend(metric_oracle_checks()?);
    Ok(SelftestReport {
        passed: checks.iter().all(|c| c.passed),
        checks,
        seconds: start.elapsed().as_secs_f64(),
    })
}

// ------------------------------------------------------------------ bench

/// Matrix products issued by one transformer pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatmulCounts {
    pub decoder_layers: usize,
    pub with_reuse: usize,
    pub without_reuse: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub sequence: String,
    pub ablation: Ablation,
    /// Timed frames (after warm-up).
    pub frames: usize,
    pub fps: f64,
    /// Mean milliseconds per timed frame.
    pub stage_ms: StageTimes,
    pub params_analytic: ParamBreakdown,
    pub params_checkpoint: ParamBreakdown,
    pub matmuls: MatmulCounts,
}

pub fn matmul_counts(net: &Network) -> CliResult<MatmulCounts> {
    let cfg = net.cfg();
    let (side, c) = (cfg.map_size(), cfg.channels);
    let mut rng = cfg.seed.derive(77).rng();
    let map = Tensor::randn(&[side, side, c], &mut rng);
    let hist = Tensor::randn(&[side * side, c], &mut rng);
    let count = |reuse_logits: bool| -> CliResult<usize> {
        let mut g = Graph::new();
        let (m, h) = (g.constant(map.clone()), g.constant(hist.clone()));
        let sw = TransformerSwitches {
            reuse_logits,
            ..TransformerSwitches::default()
        };
        net.model.transformer.forward(&mut g, &net.store, m, h, sw)?;
        Ok(g.matmul_count())
    };
    Ok(MatmulCounts {
        decoder_layers: net.model.transformer.decoders.len(),
        with_reuse: count(true)?,
        without_reuse: count(false)?,
    })
}

/// Times the tracker on the first sequence under `sequence`.
pub fn cmd_bench(cfg: &RunConfig, sequence: &Path) -> CliResult<BenchReport> {
    let out = cfg.out_dir()?;
    let seq = sequences_at(sequence)?.remove(0);
    let net = Arc::new(network(cfg)?);
    let tracker = Tracker::new(Arc::clone(&net), cfg.track.ablation);
    let images = seq.images()?;
    let mut state = tracker.init(&images[0], seq.gt[0])?;
    let warmup = cfg.bench.warmup.min(images.len() - 1);
    for img in &images[1..=warmup] {
        tracker.track(&mut state, img)?;
    }
    let timed: Vec<_> = images[1 + warmup..].iter().take(cfg.bench.frames.max(1)).collect();
    if timed.is_empty() {
        return Err(CliError::data(format!("sequence {} is too short to time", seq.name)));
    }
    let mut stages = StageTimes::default();
    let start = Instant::now();
    for img in &timed {
        let (_, t) = tracker.track_timed(&mut state, img)?;
        stages.add(&t);
    }
    let secs = start.elapsed().as_secs_f64();
    let n = timed.len();
    let report = BenchReport {
        sequence: seq.name.clone(),
        ablation: cfg.track.ablation,
        frames: n,
        fps: n as f64 / secs,
        stage_ms: stages.scaled(1.0 / n as f64),
        params_analytic: ParamBreakdown::analytic(net.cfg()),
        params_checkpoint: ParamBreakdown::measured(&net.store),
        matmuls: matmul_counts(&net)?,
    };
    create_dir(out)?;
    write(&out.join("bench.json"), to_json(&report))?;
    cfg.echo(out)?;
    Ok(report)
}
