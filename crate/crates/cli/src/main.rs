use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mttrack_cli::commands::{cmd_bench, cmd_eval, cmd_selftest, cmd_synth, cmd_track, cmd_train};
use mttrack_cli::{CliError, CliResult, RunConfig};
use mttrack_core::tracker::Ablation;
use mttrack_core::Fault;
use mttrack_eval::SuiteSpec;

/// Single-object tracking with temporal correlation and a mutual transformer.
#[derive(Debug, Parser)]
#[command(name = "mttrack", version)]
struct Cli {
    /// JSON run configuration; flags take precedence over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for model initialization, training and synthesis.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic benchmark suite and its manifest.
    Synth {
        /// Suite description (JSON); replaces the config's `synth` section.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        sequences: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Train a model on every sequence under a directory.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Where to write the checkpoint (default: OUT/model.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        ablation: Option<Ablation>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        samples_per_epoch: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Track sequences and write per-frame boxes and a summary.
    Track {
        #[command(flatten)]
        model: ModelArgs,
        /// A sequence directory or a directory of sequences.
        #[arg(long)]
        sequences: PathBuf,
        /// Memory threshold on the raw confidence.
        #[arg(long, allow_hyphen_values = true)]
        tau: Option<f64>,
        /// Memory sizes; several values run a sweep.
        #[arg(long, value_delimiter = ',')]
        n_hist: Vec<usize>,
    },
    /// Score tracking results against ground truth.
    Eval {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        sequences: PathBuf,
    },
    /// Run the numerical self-checks.
    Selftest {
        /// Deliberately break an operation to exercise the checks.
        #[arg(long)]
        inject_fault: Option<FaultArg>,
    },
    /// Time the tracker and report parameter and matmul counts.
    Bench {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        sequence: PathBuf,
        /// Timed frames.
        #[arg(long)]
        frames: Option<usize>,
    },
}

#[derive(Debug, Args)]
struct ModelArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    ablation: Option<Ablation>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FaultArg {
    Softmax,
}

impl ModelArgs {
    fn apply(self, cfg: &mut RunConfig) {
        if let Some(c) = self.checkpoint {
            cfg.checkpoint = Some(c);
        }
        if let Some(a) = self.ablation {
            cfg.track.ablation = a;
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("--threads: {e}")))?;
    }
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if let Some(out) = cli.out {
        cfg.out_dir = Some(out);
    }
    match cli.command {
        Command::Synth { spec, sequences, frames } => {
            if let Some(path) = spec {
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
                let seed = cfg.synth.seed;
                cfg.synth = serde_json::from_str::<SuiteSpec>(&text)
                    .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
                if cli.seed.is_some() {
                    cfg.synth.seed = seed;
                }
            }
            if let Some(n) = sequences {
                cfg.synth.sequences = n;
            }
            if let Some(n) = frames {
                cfg.synth.frames = n;
            }
            let manifest = cmd_synth(&cfg)?;
            for e in &manifest.sequences {
                println!("{} {} frames {}", e.name, e.frames, e.sha256);
            }
        }
        Command::Train {
            data,
            checkpoint,
            ablation,
            epochs,
            samples_per_epoch,
            batch_size,
        } => {
            if data.is_some() {
                cfg.data_dir = data;
            }
            if checkpoint.is_some() {
                cfg.checkpoint = checkpoint;
            }
            if let Some(a) = ablation {
                cfg.train.ablation = a;
            }
            if let Some(n) = epochs {
                cfg.train.epochs = n;
            }
            if let Some(n) = samples_per_epoch {
                cfg.train.samples_per_epoch = n;
            }
            if let Some(n) = batch_size {
                cfg.train.batch_size = n;
            }
            let report = cmd_train(&cfg)?;
            for (i, l) in report.epoch_losses.iter().enumerate() {
                println!("epoch {i} loss {l:.5} lr {:.2e}", report.epoch_lrs[i]);
            }
        }
        Command::Track {
            model,
            sequences,
            tau,
            n_hist,
        } => {
            model.apply(&mut cfg);
            if tau.is_some() {
                cfg.track.tau = tau;
            }
            if !n_hist.is_empty() {
                cfg.track.n_hist = n_hist;
            }
            for (n, summaries) in cmd_track(&cfg, &sequences)? {
                for s in summaries {
                    let accepted = s.accepted.iter().filter(|&&a| a).count();
                    println!(
                        "n_hist {n} {} frames {} fps {:.1} accepted {accepted}",
                        s.sequence, s.frames, s.fps
                    );
                }
            }
        }
        Command::Eval { results, sequences } => {
            let report = cmd_eval(&cfg, &results, &sequences)?;
            for (name, m) in report.sequences.iter().chain([(&"aggregate".to_string(), &report.aggregate)]) {
                println!(
                    "{name} auc {:.4} precision@20 {:.4} mean_cle {:.2}",
                    m.auc, m.precision_at_20, m.mean_cle
                );
            }
        }
        Command::Selftest { inject_fault } => {
            let fault = match inject_fault {
                Some(FaultArg::Softmax) => Fault::CorruptSoftmax,
                None => Fault::None,
            };
            let report = cmd_selftest(fault)?;
            for c in &report.checks {
                println!(
                    "{} {} max_error={:.3e} tolerance={:.1e} {}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.max_error,
                    c.tolerance,
                    c.detail
                );
            }
            println!("{} checks, {} failed, {:.1}s", report.checks.len(), report.failed(), report.seconds);
            if let Some(out) = &cfg.out_dir {
                std::fs::create_dir_all(out).map_err(|e| CliError::Usage(e.to_string()))?;
                let text = serde_json::to_string_pretty(&report).expect("report serializes");
                std::fs::write(out.join("selftest.json"), text).map_err(|e| CliError::Usage(e.to_string()))?;
            }
            if !report.passed {
                return Err(CliError::SelftestFailed {
                    failed: report.failed(),
                });
            }
        }
        Command::Bench {
            model,
            sequence,
            frames,
        } => {
            model.apply(&mut cfg);
            if let Some(n) = frames {
                cfg.bench.frames = n;
            }
            let report = cmd_bench(&cfg, &sequence)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
