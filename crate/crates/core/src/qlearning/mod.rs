//! Tabular Q-learning over the block-selection MDP.
//!
//! The agent keeps one value per (state, action) pair. A sampled trajectory
//! receives the trained network's validation accuracy as its only reward, on
//! the terminal transition, and the update runs backwards along the
//! trajectory so the reward reaches the start state within one call.
//! Previously trained models are replayed from [`ReplayMemory`] to speed up
//! convergence.

mod policy;
mod replay;
mod schedule;
mod table;

use thiserror::Error;

pub use policy::{greedy_trajectory, sample_trajectory};
pub use replay::{replay_update, ReplayEntry, ReplayMemory};
pub use schedule::{EpsilonSchedule, Stage};
pub use table::{LearningParams, QTable, DEFAULT_Q0};

use crate::space::SpaceError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QError {
    #[error("reward {0} outside [0, 1]")]
    RewardOutOfRange(f64),
    #[error("learning parameters out of range (alpha {alpha}, gamma {gamma})")]
    BadParams { alpha: f64, gamma: f64 },
    #[error("replay memory is empty")]
    EmptyMemory,
    #[error("replay memory already holds {0}")]
    DuplicateEntry(String),
    #[error("epsilon schedule: {0}")]
    Schedule(String),
    #[error("malformed Q-table record `{0}`")]
    Record(String),
    #[error(transparent)]
    Space(#[from] SpaceError),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{BlockCode, BlockId};
    use crate::reward::EvalStatus;
    use crate::space::{encode_net, SearchSpace, State};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn blk(i: u8) -> BlockCode {
        BlockCode::block(i).unwrap()
    }

    fn space(d: u32) -> SearchSpace {
        SearchSpace::new(d).unwrap()
    }

    fn terminal_only(codes: &[BlockCode]) -> crate::space::Trajectory {
        space(5).trajectory(codes).unwrap()
    }

    #[test]
    fn terminal_update_hand_value() {
        let t = terminal_only(&[blk(0), BlockCode::Sm]);
        let mut q = QTable::new(0.5);
        q.update(&t, 0.9, LearningParams::default()).unwrap();
        let s1 = State::Block { depth: 1, block: BlockId::DENSE };
        assert!((q.get(s1, BlockCode::Sm) - 0.504).abs() < 1e-12);
        // Start -> B(0) bootstraps from max over (1, B(0)): SM now holds 0.504.
        let expected_start = 0.99 * 0.5 + 0.01 * 0.504;
        assert!((q.get(State::Start, blk(0)) - expected_start).abs() < 1e-12);
    }

    #[test]
    fn zero_alpha_is_a_no_op() {
        let mut q = QTable::new(0.5);
        q.set(State::Start, blk(0), 0.7);
        let before = q.clone();
        let params = LearningParams { alpha: 0.0, gamma: 1.0 };
        for t in space(2).enumerate_all().unwrap() {
            q.update(&t, 0.33, params).unwrap();
        }
        assert_eq!(q, before);
    }

    #[test]
    fn alpha_one_gamma_zero_sets_reward() {
        let t = terminal_only(&[blk(0), blk(3), BlockCode::Gap, BlockCode::Sm]);
        let mut q = QTable::new(0.5);
        q.update(&t, 0.7, LearningParams { alpha: 1.0, gamma: 0.0 }).unwrap();
        assert_eq!(q.get(State::PostGap { depth: 2 }, BlockCode::Sm), 0.7);
        // Intermediate transitions observe 0 with no future term.
        assert_eq!(q.get(State::Start, blk(0)), 0.0);
    }

    #[test]
    fn reward_is_delivered_only_at_the_terminal_transition() {
        // With alpha = 1, gamma = 1 every transition copies the value of its
        // successor, so the whole path carries exactly the reward.
        let t = terminal_only(&[blk(0), blk(4), blk(9), BlockCode::Sm]);
        let mut q = QTable::new(0.0);
        q.update(&t, 0.62, LearningParams { alpha: 1.0, gamma: 1.0 }).unwrap();
        for tr in t.transitions() {
            assert_eq!(q.get(tr.from, tr.action), 0.62);
        }
    }

    #[test]
    fn rejects_out_of_range_reward() {
        let t = terminal_only(&[blk(0), BlockCode::Sm]);
        let mut q = QTable::default();
        assert!(q.update(&t, 1.5, LearningParams::default()).is_err());
        assert!(q.update(&t, f64::NAN, LearningParams::default()).is_err());
        assert!(q.is_empty());
    }

    #[test]
    fn all_default_table_greedy_tie_break() {
        let q = QTable::default();
        let t = greedy_trajectory(&q, &space(5));
        assert_eq!(encode_net(&t, 10), "[B(0),B(0),B(0),B(0),B(0),GAP(10),SM(10)]");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample_trajectory(&q, 0.0, &mut rng, &space(5)), t);
    }

    #[test]
    fn greedy_picks_unique_maximum() {
        let mut q = QTable::new(0.5);
        q.set(State::Block { depth: 1, block: BlockId::DENSE }, BlockCode::Sm, 0.99);
        let t = greedy_trajectory(&q, &space(5));
        assert_eq!(t.codes(), vec![blk(0), BlockCode::Sm]);
    }

    #[test]
    fn epsilon_one_is_uniform_over_legal_actions() {
        // Count the action taken from (1, B(0)) over 1e5 fully random walks.
        let q = QTable::default();
        let s = space(5);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000usize;
        let mut counts = [0usize; 14];
        for _ in 0..n {
            let t = sample_trajectory(&q, 1.0, &mut rng, &s);
            let a = t.transitions()[1].action;
            let idx = BlockCode::all().position(|c| c == a).unwrap();
            counts[idx] += 1;
        }
        let p = 1.0 / 14.0;
        let mean = n as f64 * p;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for (i, &c) in counts.iter().enumerate() {
            assert!((c as f64 - mean).abs() < 3.0 * sigma, "action {i}: {c} vs {mean}±{sigma}");
        }
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let q = QTable::default();
        let s = space(5);
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50).map(|_| sample_trajectory(&q, 0.6, &mut rng, &s)).collect::<Vec<_>>()
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
    }

    fn entry(codes: Vec<BlockCode>, accuracy: f64) -> ReplayEntry {
        ReplayEntry {
            net_string: crate::space::encode_codes(&codes, 10),
            blocks: codes,
            accuracy,
            iteration: 1,
            epsilon: 1.0,
            param_count: 0,
            wall_time: 0,
            status: EvalStatus::Ok,
        }
    }

    #[test]
    fn replay_zero_samples_is_a_no_op() {
        let mut mem = ReplayMemory::new();
        mem.insert(entry(vec![blk(0), BlockCode::Sm], 0.8)).unwrap();
        let mut q = QTable::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        replay_update(&mut q, &mem, 0, &mut rng, LearningParams::default(), &space(5)).unwrap();
        assert!(q.is_empty());
    }

    #[test]
    fn replay_single_entry_equals_repeated_updates() {
        let codes = vec![blk(0), blk(2), BlockCode::Gap, BlockCode::Sm];
        let mut mem = ReplayMemory::new();
        mem.insert(entry(codes.clone(), 0.77)).unwrap();
        let mut replayed = QTable::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        replay_update(&mut replayed, &mem, 3, &mut rng, LearningParams::default(), &space(5)).unwrap();

        let mut direct = QTable::default();
        let t = space(5).trajectory(&codes).unwrap();
        for _ in 0..3 {
            direct.update(&t, 0.77, LearningParams::default()).unwrap();
        }
        assert_eq!(replayed, direct);
    }

    #[test]
    fn replay_is_reproducible() {
        let s = space(3);
        let mut mem = ReplayMemory::new();
        for (i, t) in s.enumerate_all().unwrap().enumerate().step_by(37) {
            mem.insert(entry(t.codes(), (i % 10) as f64 / 10.0)).unwrap();
        }
        let run = || {
            let mut q = QTable::default();
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            replay_update(&mut q, &mem, 500, &mut rng, LearningParams::default(), &s).unwrap();
            let mut text = String::new();
            q.write_records(&mut text);
            text
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn replay_requires_entries() {
        let mut q = QTable::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = replay_update(&mut q, &ReplayMemory::new(), 1, &mut rng, LearningParams::default(), &space(5));
        assert_eq!(err, Err(QError::EmptyMemory));
    }

    #[test]
    fn memory_rejects_duplicates() {
        let mut mem = ReplayMemory::new();
        mem.insert(entry(vec![blk(0), BlockCode::Sm], 0.8)).unwrap();
        assert!(matches!(
            mem.insert(entry(vec![blk(0), BlockCode::Sm], 0.5)),
            Err(QError::DuplicateEntry(_))
        ));
        assert_eq!(mem.len(), 1);
        assert_eq!(mem.get(&[blk(0), BlockCode::Sm]).unwrap().accuracy, 0.8);
    }

    #[test]
    fn records_roundtrip() {
        let s = space(3);
        let mut q = QTable::new(0.25);
        for (i, t) in s.enumerate_all().unwrap().enumerate().take(200) {
            q.update(&t, (i as f64 * 0.618).fract(), LearningParams::default()).unwrap();
        }
        let mut text = String::new();
        q.write_records(&mut text);
        let back = QTable::from_records(0.25, text.lines()).unwrap();
        assert_eq!(back, q);
        assert_eq!(back.digest(), q.digest());
        assert!(QTable::parse_record("q 0 B(0) B(0) 0.5").is_err());
        assert!(QTable::parse_record("q 1 START B(0) 0.5").is_err());
        assert!(QTable::parse_record("q 1 B(0) B(0) NaN").is_err());
        assert!(QTable::parse_record("q 1 B(0) B(0) 0.5 extra").is_err());
    }

    // Deterministic, distinct rewards for the convergence check.
    fn hashed_reward(codes: &[BlockCode]) -> f64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for c in codes {
            let idx = BlockCode::all().position(|x| x == *c).unwrap() as u64;
            h = (h ^ (idx + 1)).wrapping_mul(0x0100_0000_01b3);
        }
        (h >> 11) as f64 / (1u64 << 53) as f64
    }

    #[test]
    fn uniform_sampling_converges_to_enumerated_optimum() {
        let s = space(2);
        let all: Vec<_> = s.enumerate_all().unwrap().collect();
        let best = all
            .iter()
            .max_by(|a, b| hashed_reward(&a.codes()).total_cmp(&hashed_reward(&b.codes())))
            .unwrap();
        let rewards: Vec<f64> = all.iter().map(|t| hashed_reward(&t.codes())).collect();
        let mut sorted = rewards.clone();
        sorted.sort_by(f64::total_cmp);
        sorted.dedup();
        assert_eq!(sorted.len(), all.len(), "oracle rewards must be distinct");

        let mut q = QTable::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let params = LearningParams { alpha: 0.1, gamma: 1.0 };
        for _ in 0..5_000 {
            let t = sample_trajectory(&q, 1.0, &mut rng, &s);
            q.update(&t, hashed_reward(&t.codes()), params).unwrap();
        }
        assert_eq!(&greedy_trajectory(&q, &s), best);
    }

    fn arb_trajectory(max_depth: u32) -> impl Strategy<Value = Vec<BlockCode>> {
        (0..max_depth, prop::collection::vec(0u8..12, 4), any::<bool>()).prop_map(|(extra, picks, gap)| {
            let mut codes = vec![BlockCode::Block(BlockId::DENSE)];
            codes.extend(picks.into_iter().take(extra as usize).map(|i| BlockCode::block(i).unwrap()));
            if gap {
                codes.push(BlockCode::Gap);
            }
            codes.push(BlockCode::Sm);
            codes
        })
    }

    proptest! {
        #[test]
        fn values_stay_in_unit_interval(
            q0 in 0.0f64..=1.0,
            alpha in 0.0f64..=1.0,
            gamma in 0.0f64..=1.0,
            steps in prop::collection::vec((arb_trajectory(5), 0.0f64..=1.0), 1..40),
        ) {
            let s = space(5);
            let mut q = QTable::new(q0);
            for (codes, r) in steps {
                let t = s.trajectory(&codes).unwrap();
                q.update(&t, r, LearningParams { alpha, gamma }).unwrap();
            }
            for (_, _, v) in q.iter() {
                prop_assert!((0.0..=1.0).contains(&v), "{v}");
            }
        }

        #[test]
        fn greedy_is_shift_invariant(
            steps in prop::collection::vec((arb_trajectory(4), 0.0f64..=1.0), 1..30),
            shift in 0.01f64..10.0,
        ) {
            let s = space(4);
            let mut q = QTable::new(0.5);
            for (codes, r) in steps {
                q.update(&s.trajectory(&codes).unwrap(), r, LearningParams { alpha: 0.3, gamma: 1.0 }).unwrap();
            }
            let mut shifted = QTable::new(0.5 + shift);
            for (st, a, v) in q.iter() {
                shifted.set(st, a, v + shift);
            }
            prop_assert_eq!(greedy_trajectory(&q, &s), greedy_trajectory(&shifted, &s));
        }

        #[test]
        fn sampled_trajectories_roundtrip_through_net_strings(seed in any::<u64>(), eps in 0.0f64..=1.0) {
            let s = space(5);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = sample_trajectory(&QTable::default(), eps, &mut rng, &s);
            let back = crate::space::decode_net(&encode_net(&t, 10), 5).unwrap();
            prop_assert_eq!(back.trajectory, t);
        }
    }
}
