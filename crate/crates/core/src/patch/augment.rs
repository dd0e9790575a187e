//! Paired raw/compressed batches for patch pre-training, and the item-dropout
//! ablation that shares the same selection masks.

use super::layout::{PromptLayout, Segment};
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Compression probability `p = step / total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompressionSchedule {
    pub total_steps: u64,
    pub step: u64,
}

impl CompressionSchedule {
    pub fn new(total_steps: u64, step: u64) -> Result<Self> {
        if total_steps == 0 || step > total_steps {
            return Err(Error::InvalidArgument(format!(
                "schedule step {step} outside 0..={total_steps}"
            )));
        }
        Ok(Self { total_steps, step })
    }

    pub fn p(&self) -> f64 {
        self.step as f64 / self.total_steps as f64
    }
}

/// SplitMix64 finaliser folded over the parts.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// Which history entries get compressed (or dropped) for one example.
pub fn selection_mask(n: usize, p: f64, seed: u64, example_id: u64, step: u64) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, example_id, step]));
    (0..n).map(|_| rng.gen::<f64>() < p).collect()
}

/// Originals first, then one derived copy per surviving example.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedBatch {
    pub originals: Vec<PromptLayout>,
    pub copies: Vec<PromptLayout>,
    /// Copies dropped because nothing was left of the history.
    pub skipped: usize,
}

impl AugmentedBatch {
    pub fn all(&self) -> impl Iterator<Item = &PromptLayout> {
        self.originals.iter().chain(&self.copies)
    }

    pub fn len(&self) -> usize {
        self.originals.len() + self.copies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn history_of(layout: &PromptLayout) -> Vec<Segment> {
    layout.history_segments().cloned().collect()
}

fn patch_selected(history: Vec<Segment>, mask: &[bool]) -> Vec<Segment> {
    history
        .into_iter()
        .zip(mask)
        .map(|(s, &hit)| match s {
            Segment::Raw { item_id, tokens } if hit => Segment::ItemPatch { item_id, tokens },
            other => other,
        })
        .collect()
}

/// Each example's copy has every item independently turned into an item
/// patch with probability `schedule.p()`.
pub fn augment_pretraining(
    batch: &[(u64, PromptLayout)],
    schedule: &CompressionSchedule,
    seed: u64,
) -> AugmentedBatch {
    let p = schedule.p();
    let mut copies = Vec::with_capacity(batch.len());
    for (id, layout) in batch {
        let history = history_of(layout);
        let mask = selection_mask(history.len(), p, seed, *id, schedule.step);
        copies.push(PromptLayout::assemble(
            patch_selected(history, &mask),
            layout.target.clone(),
        ));
    }
    AugmentedBatch {
        originals: batch.iter().map(|(_, l)| l.clone()).collect(),
        copies,
        skipped: 0,
    }
}

/// Ablation: selected items are removed instead of patched. A copy with no
/// items left is skipped and counted.
pub fn augment_dropout(
    batch: &[(u64, PromptLayout)],
    schedule: &CompressionSchedule,
    seed: u64,
) -> AugmentedBatch {
    let p = schedule.p();
    let mut copies = Vec::with_capacity(batch.len());
    let mut skipped = 0;
    for (id, layout) in batch {
        let history = history_of(layout);
        let mask = selection_mask(history.len(), p, seed, *id, schedule.step);
        let kept: Vec<Segment> = history
            .into_iter()
            .zip(&mask)
            .filter(|(_, &hit)| !hit)
            .map(|(s, _)| s)
            .collect();
        if kept.is_empty() {
            skipped += 1;
            log::debug!("dropout emptied example {id}; skipped");
            continue;
        }
        copies.push(PromptLayout::assemble(kept, layout.target.clone()));
    }
    AugmentedBatch {
        originals: batch.iter().map(|(_, l)| l.clone()).collect(),
        copies,
        skipped,
    }
}
