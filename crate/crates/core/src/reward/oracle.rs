//! Deterministic stand-in for training.
//!
//! The score of a network is the mean base score of its blocks plus a bonus
//! for each concatenation-bearing group it contains, plus seeded Gaussian
//! noise. Any poison block (by default `B(1)`) pins the score to a fixed
//! value. Everything depends only on the multiset of codes, so permuting the
//! blocks never changes the score.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::RewardError;
use crate::catalog::{BlockCode, BlockId, BLOCK_COUNT};
use crate::space::SearchSpace;

pub const DEFAULT_BASE_SCORES: [f64; BLOCK_COUNT as usize] = [
    0.85, // B(0)
    0.50, // B(1), poisoned by default
    0.80, 0.82, 0.80, // B(2)..B(4)
    0.70, 0.72, 0.68, // B(5)..B(7)
    0.74, 0.76, 0.78, 0.75, // B(8)..B(11)
];

#[derive(Debug, Clone, PartialEq)]
pub struct OracleConfig {
    pub base_scores: [f64; BLOCK_COUNT as usize],
    pub noise_sigma: f64,
    pub seed: u64,
    pub poison_codes: Vec<BlockId>,
    pub poison_value: f64,
    /// Added once when any of `B(2)..B(4)` is present.
    pub bonus_residual_concat: f64,
    /// Added once when any of `B(8)..B(11)` is present.
    pub bonus_inception_concat: f64,
    /// Added once when any of `B(5)..B(7)` is present.
    pub bonus_plain_inception: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            base_scores: DEFAULT_BASE_SCORES,
            noise_sigma: 0.02,
            seed: 0,
            poison_codes: vec![BlockId::new(1).expect("valid")],
            poison_value: 0.1,
            bonus_residual_concat: 0.05,
            bonus_inception_concat: 0.03,
            bonus_plain_inception: 0.0,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<(), RewardError> {
        let bad = |m: String| Err(RewardError::Config(m));
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {} must be finite and >= 0", self.noise_sigma));
        }
        if !(0.0..=1.0).contains(&self.poison_value) {
            return bad(format!("poison_value {} outside [0, 1]", self.poison_value));
        }
        let all = self.base_scores.iter().chain([
            &self.bonus_residual_concat,
            &self.bonus_inception_concat,
            &self.bonus_plain_inception,
        ]);
        if all.into_iter().any(|v| !v.is_finite()) {
            return bad("scores and bonuses must be finite".into());
        }
        Ok(())
    }
}

/// Scores a complete code sequence (`[B(0), ..., SM]`).
pub fn oracle_evaluate(config: &OracleConfig, codes: &[BlockCode]) -> Result<f64, RewardError> {
    config.validate()?;
    let blocks: Vec<BlockId> = codes.iter().filter_map(|c| c.as_block()).collect();
    let depth = u32::try_from(blocks.len().max(1)).unwrap_or(u32::MAX);
    SearchSpace::new(depth)?.trajectory(codes)?;

    if blocks.iter().any(|b| config.poison_codes.contains(b)) {
        return Ok(config.poison_value);
    }

    let mean = blocks.iter().map(|b| config.base_scores[b.index() as usize]).sum::<f64>() / blocks.len() as f64;
    let has = |range: std::ops::RangeInclusive<u8>| blocks.iter().any(|b| range.contains(&b.index()));
    let mut score = mean;
    if has(2..=4) {
        score += config.bonus_residual_concat;
    }
    if has(8..=11) {
        score += config.bonus_inception_concat;
    }
    if has(5..=7) {
        score += config.bonus_plain_inception;
    }
    if config.noise_sigma > 0.0 {
        score += multiset_noise(config.seed, codes, config.noise_sigma);
    }
    Ok(score.clamp(0.0, 1.0))
}

fn multiset_noise(seed: u64, codes: &[BlockCode], sigma: f64) -> f64 {
    let mut key: Vec<u8> = codes
        .iter()
        .map(|c| match c {
            BlockCode::Block(id) => id.index(),
            BlockCode::Gap => 100,
            BlockCode::Sm => 101,
        })
        .collect();
    key.sort_unstable();
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(&key);
    let digest = hasher.finalize();
    let mut seed_bytes = [0u8; 32];
    seed_bytes.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(seed_bytes);
    Normal::new(0.0, sigma).expect("sigma validated").sample(&mut rng)
}
