//! Reconstruction training examples: one masked turn in, the original
//! utterance out.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dialog::{mask_utterances, serialize, Dialog, MaskSpec};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReconstructionExample {
    #[serde(rename = "input")]
    pub input_text: String,
    #[serde(rename = "target")]
    pub target_text: String,
    pub dialog_id: String,
    /// 1-based index of the masked turn.
    #[serde(rename = "t")]
    pub masked_index: usize,
}

pub fn make_example(d: &Dialog, t: usize, mask: &str) -> Result<ReconstructionExample> {
    let target = d.turn(t)?.text.clone();
    let masked = mask_utterances(d, &MaskSpec::single(t)?, mask)?;
    Ok(ReconstructionExample {
        input_text: serialize(&masked, mask),
        target_text: target,
        dialog_id: d.id.clone(),
        masked_index: t,
    })
}

/// Draws `per_dialog` distinct turns per dialog (capped at the dialog length)
/// uniformly at random. Output order follows input order; the draw is fully
/// determined by `seed`.
pub fn make_corpus<'a>(
    dialogs: impl IntoIterator<Item = &'a Dialog>,
    seed: u64,
    per_dialog: usize,
    mask: &str,
) -> Result<Vec<ReconstructionExample>> {
    if per_dialog == 0 {
        return Err(Error::Config("per_dialog must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for d in dialogs {
        let n = d.len();
        if n == 0 {
            return Err(Error::DialogShape {
                dialog_id: d.id.clone(),
                message: "dialog has no utterances".into(),
            });
        }
        for i in index::sample(&mut rng, n, per_dialog.min(n)) {
            out.push(make_example(d, i + 1, mask)?);
        }
    }
    Ok(out)
}

/// Seed for shard `shard` of a sharded run.
pub fn shard_seed(seed: u64, shard: u64) -> u64 {
    seed ^ shard
}
