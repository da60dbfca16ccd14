//! Run configuration: a JSON file layered under command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use mttrack_core::tracker::{Ablation, TrackerConfig, TrainConfig};
use mttrack_core::RngSeed;
use mttrack_eval::SuiteSpec;

use crate::error::{CliError, CliResult};

/// File name of the effective configuration written to every output
/// directory.
pub const CONFIG_ECHO: &str = "config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Model geometry; defaults to the toy configuration.
    pub model: TrackerConfig,
    pub train: TrainConfig,
    pub synth: SuiteSpec,
    pub track: TrackOptions,
    pub bench: BenchOptions,
    pub checkpoint: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: TrackerConfig::toy(),
            train: TrainConfig::default(),
            synth: SuiteSpec::default(),
            track: TrackOptions::default(),
            bench: BenchOptions::default(),
            checkpoint: None,
            data_dir: None,
            out_dir: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackOptions {
    pub ablation: Ablation,
    /// Memory threshold; the model's own when unset.
    pub tau: Option<f64>,
    /// Memory sizes to run; one run with the checkpoint's size when empty.
    pub n_hist: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchOptions {
    /// Frames in the timing window (after initialization).
    pub frames: usize,
    /// Tracked frames discarded before timing starts.
    pub warmup: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self { frames: 50, warmup: 2 }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))
    }

    /// Loads `path`, or the defaults when no file is given.
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                Self::from_json(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))
            }
        }
    }

    /// One seed for model initialization, training and synthesis.
    pub fn set_seed(&mut self, seed: u64) {
        self.model.seed = RngSeed(seed);
        self.train.seed = RngSeed(seed);
        self.synth.seed = RngSeed(seed);
    }

    /// Writes the configuration as `config.json` into `dir`.
    pub fn echo(&self, dir: &Path) -> CliResult<()> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(dir.join(CONFIG_ECHO), text).map_err(|e| CliError::io(dir, e))
    }

    pub fn out_dir(&self) -> CliResult<&Path> {
        self.out_dir
            .as_deref()
            .ok_or_else(|| CliError::Usage("no output directory (use --out)".into()))
    }
}
