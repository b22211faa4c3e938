use rand::Rng;

use super::table::QTable;
use crate::space::{SearchSpace, Trajectory};

/// Walks the MDP from the start state, taking a uniformly random legal
/// action with probability `epsilon` and the greedy action otherwise.
///
/// One uniform draw is consumed per step (plus one index draw on exploring
/// steps), so the result is a pure function of the table, `epsilon` and the
/// RNG state.
pub fn sample_trajectory<R: Rng + ?Sized>(
    q: &QTable,
    epsilon: f64,
    rng: &mut R,
    space: &SearchSpace,
) -> Trajectory {
    assert!((0.0..=1.0).contains(&epsilon), "epsilon {epsilon} outside [0, 1]");
    walk(space, |state| {
        let legal = space.legal_actions(state).expect("walk stops at terminal");
        if rng.random::<f64>() < epsilon {
            legal[rng.random_range(0..legal.len())]
        } else {
            q.best_action(space, state).expect("non-terminal").0
        }
    })
}

/// The purely greedy path; same as `sample_trajectory` with `epsilon = 0`.
pub fn greedy_trajectory(q: &QTable, space: &SearchSpace) -> Trajectory {
    walk(space, |state| q.best_action(space, state).expect("non-terminal").0)
}

fn walk(space: &SearchSpace, mut choose: impl FnMut(crate::space::State) -> crate::space::Action) -> Trajectory {
    let mut state = space.initial_state();
    let mut codes = Vec::with_capacity(space.max_depth() as usize + 2);
    while !state.is_terminal() {
        let action = choose(state);
        codes.push(action);
        state = space.apply(state, action).expect("chosen among legal actions");
    }
    space.trajectory(&codes).expect("walk yields a complete trajectory")
}
