//! Sequence discovery shared by the commands.

use std::path::Path;

use rayon::prelude::*;

use mttrack_core::tracker::TrainSequence;
use mttrack_eval::sequence::GT_FILE;
use mttrack_eval::{load_sequence, load_sequences, Sequence};

use crate::error::{CliError, CliResult};

/// A single sequence directory, or every sequence directory below `path`.
pub fn sequences_at(path: &Path) -> CliResult<Vec<Sequence>> {
    if !path.is_dir() {
        return Err(CliError::data(format!("{} is not a directory", path.display())));
    }
    let seqs = if path.join(GT_FILE).is_file() {
        vec![load_sequence(path)?]
    } else {
        load_sequences(path)?
    };
    if seqs.is_empty() {
        return Err(CliError::data(format!("no sequences found under {}", path.display())));
    }
    Ok(seqs)
}

/// Decodes every frame for training.
pub fn training_set(seqs: &[Sequence]) -> CliResult<Vec<TrainSequence>> {
    seqs.par_iter()
        .map(|s| {
            let frames = s.images()?.iter().map(|f| (**f).clone()).collect();
            Ok(TrainSequence {
                frames,
                boxes: s.gt.clone(),
            })
        })
        .collect()
}
