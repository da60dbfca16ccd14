//! End-to-end tracker: toy backbone, temporal correlation, mutual
//! transformer, localization head, online update and toy trainer.

mod checkpoint;
mod model;
mod online;
mod post;
mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::RngSeed;
use crate::transformer::{AttentionConfig, TransformerSwitches};

pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, network_from_bytes, parse_checkpoint, read_checkpoint,
    save_checkpoint, CheckpointTensor, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use model::{Backbone, Head, MtModel, Network, ParamBreakdown};
pub use online::{StageTimes, TrackStep, Tracker, TrackerState};
pub use post::{decode_cell, hanning, select_target};
pub use train::{
    assign_targets, lr_at, toy_train, CellTargets, TrainConfig, TrainReport, TrainSequence,
};

/// Geometry and hyper-parameters of the tracker. The default is the
/// full-size model; [`TrackerConfig::toy`] is small enough to train on a CPU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    pub search_size: usize,
    pub template_size: usize,
    pub stride: usize,
    pub channels: usize,
    /// Output widths of the three stride-2 backbone stages.
    pub backbone_widths: [usize; 3],
    pub head_hidden: usize,
    /// Template memory capacity (number of historical features).
    pub n_hist: usize,
    /// Historical frames per training sample.
    pub l_train: usize,
    pub tau: f64,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub filter_reduction: usize,
    pub window_influence: f64,
    /// Weight of the new prediction when smoothing the box size.
    pub smoothing: f64,
    pub min_box: f64,
    pub seed: RngSeed,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            search_size: 287,
            template_size: 127,
            stride: 8,
            channels: 192,
            backbone_widths: [32, 64, 128],
            head_hidden: 192,
            n_hist: 3,
            l_train: 3,
            tau: 3.0,
            heads: 6,
            enc_layers: 1,
            dec_layers: 2,
            filter_reduction: 2,
            window_influence: 0.30,
            smoothing: 0.7,
            min_box: 2.0,
            seed: RngSeed::default(),
        }
    }
}

impl TrackerConfig {
    /// Reduced model for CPU training and the synthetic benchmark:
    /// 63/127 crops, 24 channels, a 9x9 correlation grid.
    pub fn toy() -> Self {
        Self {
            search_size: 127,
            template_size: 63,
            channels: 24,
            backbone_widths: [8, 16, 24],
            head_hidden: 24,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Input(msg));
        if self.stride != 8 {
            return bad(format!("stride must be 8 (three stride-2 stages), got {}", self.stride));
        }
        for (name, s) in [("search_size", self.search_size), ("template_size", self.template_size)] {
            if s < 15 || s % 8 != 7 {
                return bad(format!("{name} {s} must be >= 15 and congruent to 7 mod 8"));
            }
        }
        if self.search_size <= self.template_size {
            return bad(format!(
                "search_size {} must exceed template_size {}",
                self.search_size, self.template_size
            ));
        }
        if self.backbone_widths.contains(&0) || self.head_hidden == 0 {
            return bad("layer widths must be positive".into());
        }
        if !(self.tau.is_finite() || self.tau == f64::INFINITY) {
            return bad(format!("invalid tau {}", self.tau));
        }
        if !(0.0..=1.0).contains(&self.window_influence) || !(0.0..=1.0).contains(&self.smoothing) {
            return bad("window_influence and smoothing must lie in [0, 1]".into());
        }
        if !(self.min_box > 0.0) {
            return bad(format!("min_box must be positive, got {}", self.min_box));
        }
        self.attention().validate()
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            heads: self.heads,
            model_dim: self.channels,
            encoder_layers: self.enc_layers,
            decoder_layers: self.dec_layers,
            reduction: self.filter_reduction,
        }
    }

    /// Spatial size of the backbone output for a crop of `size` pixels.
    pub fn feature_size(&self, size: usize) -> usize {
        (size - 7) / 8
    }

    pub fn template_feat(&self) -> usize {
        self.feature_size(self.template_size)
    }

    pub fn search_feat(&self) -> usize {
        self.feature_size(self.search_size)
    }

    /// Side of the correlation grid.
    pub fn map_size(&self) -> usize {
        self.search_feat() - self.template_feat() + 1
    }

    /// Search crop side relative to the template crop side.
    pub fn search_factor(&self) -> f64 {
        self.search_size as f64 / self.template_size as f64
    }

    /// Crop coordinate of the receptive-field center of correlation cell `j`.
    pub fn cell_center(&self, j: usize) -> f64 {
        (self.stride * j) as f64 + self.template_size as f64 / 2.0
    }

    /// Offset between backbone cell `k`'s receptive-field center and the
    /// `[k * stride, (k + 1) * stride)` cell convention of the masking grid.
    pub fn feature_offset(&self) -> f64 {
        7.5 - self.stride as f64 / 2.0
    }
}

/// Model variants of the component ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Plain depth-wise correlation with the initial template.
    Baseline,
    /// Temporal correlation only.
    Temcor,
    /// Mutual transformer only.
    Mt,
    NoEncoder,
    NoFilter,
    #[default]
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::Baseline,
        Ablation::Temcor,
        Ablation::Mt,
        Ablation::NoEncoder,
        Ablation::NoFilter,
        Ablation::Full,
    ];

    pub fn switches(self) -> Switches {
        let (temporal, transformer, encoder, filter) = match self {
            Ablation::Baseline => (false, false, false, false),
            Ablation::Temcor => (true, false, false, false),
            Ablation::Mt => (false, true, true, true),
            Ablation::NoEncoder => (true, true, false, true),
            Ablation::NoFilter => (true, true, true, false),
            Ablation::Full => (true, true, true, true),
        };
        Switches {
            temporal,
            transformer,
            encoder,
            filter,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Baseline => "baseline",
            Ablation::Temcor => "temcor",
            Ablation::Mt => "mt",
            Ablation::NoEncoder => "no-encoder",
            Ablation::NoFilter => "no-filter",
            Ablation::Full => "full",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Input(format!("unknown ablation {s:?}")))
    }
}

/// Which stages of the pipeline run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Switches {
    /// Multi-template fusion; when off the fused template is `T0` (beta = 0).
    pub temporal: bool,
    /// Mutual transformer; when off the raw correlation map reaches the head
    /// and the historical map is never updated.
    pub transformer: bool,
    pub encoder: bool,
    pub filter: bool,
}

impl Switches {
    pub fn transformer_switches(self) -> TransformerSwitches {
        TransformerSwitches {
            encoder: self.encoder,
            filter: self.filter,
            reuse_logits: true,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_geometry() {
        let c = TrackerConfig::default();
        c.validate().unwrap();
        assert_eq!((c.template_feat(), c.search_feat(), c.map_size()), (15, 35, 21));
        assert_eq!(c.cell_center(10), 143.5);
        assert_eq!(c.cell_center(10), c.search_size as f64 / 2.0);
    }

    #[test]
    fn toy_geometry() {
        let c = TrackerConfig::toy();
        c.validate().unwrap();
        assert_eq!((c.template_feat(), c.search_feat(), c.map_size()), (7, 15, 9));
        assert_eq!(c.cell_center(4), c.search_size as f64 / 2.0);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = TrackerConfig::toy();
        c.search_size = 128;
        assert!(c.validate().is_err());
        let mut c = TrackerConfig::toy();
        c.channels = 25;
        assert!(c.validate().is_err());
        let unknown = serde_json::from_str::<TrackerConfig>(r#"{"chanels": 3}"#);
        assert!(unknown.unwrap_err().to_string().contains("chanels"));
    }

    #[test]
    fn ablation_names_roundtrip() {
        for a in Ablation::ALL {
            assert_eq!(a.as_str().parse::<Ablation>().unwrap(), a);
            assert_eq!(serde_json::to_string(&a).unwrap(), format!("\"{a}\""));
        }
        assert!("none".parse::<Ablation>().is_err());
    }
}
