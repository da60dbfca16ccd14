//! Sequence I/O, synthetic benchmark generation, one-pass evaluation and
//! precision/success metrics.

pub mod metrics;
pub mod ope;
pub mod sequence;
pub mod synthetic;

pub use metrics::{compute_metrics, MetricsReport, SequenceMetrics, TrackResult};
pub use ope::{ground_truths, run_ope, run_sequence, OpeOutput, SequenceTracker};
pub use sequence::{format_boxes, load_sequence, load_sequences, parse_boxes, save_sequence, Frame, Sequence};
pub use synthetic::{generate_synthetic, write_suite, Manifest, SuiteSpec, SyntheticScene, SyntheticSpec};
