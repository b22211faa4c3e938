use std::collections::HashMap;

use rand::Rng;

use super::table::{LearningParams, QTable};
use super::QError;
use crate::catalog::BlockCode;
use crate::reward::EvalStatus;
use crate::space::SearchSpace;

/// One trained model and the reward it produced.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayEntry {
    pub blocks: Vec<BlockCode>,
    pub net_string: String,
    /// Validation accuracy, used as the terminal reward. 0 for failed models.
    pub accuracy: f64,
    pub iteration: u64,
    pub epsilon: f64,
    pub param_count: u64,
    /// Milliseconds since the Unix epoch, or a logical tick.
    pub wall_time: u64,
    pub status: EvalStatus,
}

/// Append-only store of trained models, at most one entry per block sequence.
#[derive(Debug, Clone, Default)]
pub struct ReplayMemory {
    entries: Vec<ReplayEntry>,
    index: HashMap<Vec<BlockCode>, usize>,
}

impl ReplayMemory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, entry: ReplayEntry) -> Result<(), QError> {
        if !(0.0..=1.0).contains(&entry.accuracy) {
            return Err(QError::RewardOutOfRange(entry.accuracy));
        }
        if self.index.contains_key(&entry.blocks) {
            return Err(QError::DuplicateEntry(entry.net_string));
        }
        self.index.insert(entry.blocks.clone(), self.entries.len());
        self.entries.push(entry);
        Ok(())
    }

    pub fn get(&self, blocks: &[BlockCode]) -> Option<&ReplayEntry> {
        self.index.get(blocks).map(|&i| &self.entries[i])
    }

    pub fn contains(&self, blocks: &[BlockCode]) -> bool {
        self.index.contains_key(blocks)
    }

    pub fn entries(&self) -> &[ReplayEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Re-applies the update for `n_samples` entries drawn uniformly with
/// replacement, in draw order.
pub fn replay_update<R: Rng + ?Sized>(
    q: &mut QTable,
    memory: &ReplayMemory,
    n_samples: usize,
    rng: &mut R,
    params: LearningParams,
    space: &SearchSpace,
) -> Result<(), QError> {
    if memory.is_empty() {
        return Err(QError::EmptyMemory);
    }
    for _ in 0..n_samples {
        let entry = &memory.entries[rng.random_range(0..memory.len())];
        let trajectory = space.trajectory(&entry.blocks)?;
        q.update(&trajectory, entry.accuracy, params)?;
    }
    Ok(())
}
