//! One-pass evaluation: initialize on the first ground-truth box, then track
//! every remaining frame without re-initialization.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;

use mttrack_core::image::Image;
use mttrack_core::tracker::{Tracker, TrackerState};
use mttrack_core::{BBox, Result};

use crate::metrics::TrackResult;
use crate::sequence::Sequence;

/// Anything that can follow a single target through a sequence.
pub trait SequenceTracker: Sync {
    type State: Send;

    fn init(&self, frame: &Image, bbox: BBox) -> Result<Self::State>;

    /// Returns the predicted box and its confidence.
    fn track(&self, state: &mut Self::State, frame: &Image) -> Result<(BBox, f64)>;
}

impl SequenceTracker for Tracker {
    type State = TrackerState;

    fn init(&self, frame: &Image, bbox: BBox) -> Result<TrackerState> {
        Tracker::init(self, frame, bbox)
    }

    fn track(&self, state: &mut TrackerState, frame: &Image) -> Result<(BBox, f64)> {
        let step = Tracker::track(self, state, frame)?;
        Ok((step.bbox, step.score))
    }
}

/// Runs one sequence. The first output is the initial ground-truth box;
/// FPS counts every frame including the initialization.
pub fn run_sequence<T: SequenceTracker>(tracker: &T, seq: &Sequence) -> Result<TrackResult> {
    let first = seq.frames[0].load()?;
    let start = Instant::now();
    let mut state = tracker.init(&first, seq.gt[0])?;
    let mut elapsed = start.elapsed();
    let mut boxes = vec![seq.gt[0]];
    let mut scores = vec![1.0];
    for f in &seq.frames[1..] {
        let img = f.load()?;
        let t = Instant::now();
        let (b, s) = tracker.track(&mut state, &img)?;
        elapsed += t.elapsed();
        boxes.push(b);
        scores.push(s);
    }
    let secs = elapsed.as_secs_f64();
    let fps = if secs > 0.0 { seq.len() as f64 / secs } else { f64::INFINITY };
    Ok(TrackResult { boxes, scores, fps })
}

#[derive(Debug, Clone, Default)]
pub struct OpeOutput {
    pub results: BTreeMap<String, TrackResult>,
    /// Sequences whose run returned an error, with the message.
    pub failures: BTreeMap<String, String>,
}

/// Runs every sequence, in parallel when `parallel` is set. A failing
/// sequence is logged and excluded rather than aborting the run.
pub fn run_ope<T: SequenceTracker>(tracker: &T, seqs: &[Sequence], parallel: bool) -> OpeOutput {
    let run = |s: &Sequence| (s.name.clone(), run_sequence(tracker, s));
    let outcomes: Vec<_> = if parallel {
        seqs.par_iter().map(run).collect()
    } else {
        seqs.iter().map(run).collect()
    };
    let mut out = OpeOutput::default();
    for (name, r) in outcomes {
        match r {
            Ok(r) => {
                out.results.insert(name, r);
            }
            Err(e) => {
                log::warn!("sequence {name} failed and is excluded: {e}");
                out.failures.insert(name, e.to_string());
            }
        }
    }
    out
}

pub fn ground_truths(seqs: &[Sequence]) -> BTreeMap<String, Vec<BBox>> {
    seqs.iter().map(|s| (s.name.clone(), s.gt.clone())).collect()
}
