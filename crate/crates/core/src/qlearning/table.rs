use std::collections::BTreeMap;
use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use super::QError;
use crate::catalog::{parse_code, BlockCode};
use crate::space::{Action, SearchSpace, State, Trajectory};

/// Step size and discount of the update rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearningParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for LearningParams {
    fn default() -> Self {
        LearningParams { alpha: 0.01, gamma: 1.0 }
    }
}

impl LearningParams {
    pub fn validate(&self) -> Result<(), QError> {
        // alpha = 0 is accepted as a frozen table.
        if !(0.0..=1.0).contains(&self.alpha) || !(0.0..=1.0).contains(&self.gamma) {
            return Err(QError::BadParams { alpha: self.alpha, gamma: self.gamma });
        }
        Ok(())
    }
}

/// Default value of unseen state-action pairs.
pub const DEFAULT_Q0: f64 = 0.5;

/// Tabular state-action values.
///
/// Pairs whose value equals `q0` are not stored, so two tables that answer
/// every lookup identically also serialize identically.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    q0: f64,
    values: BTreeMap<(State, Action), f64>,
}

impl Default for QTable {
    fn default() -> Self {
        QTable::new(DEFAULT_Q0)
    }
}

impl QTable {
    pub fn new(q0: f64) -> Self {
        QTable { q0, values: BTreeMap::new() }
    }

    pub fn q0(&self) -> f64 {
        self.q0
    }

    pub fn get(&self, state: State, action: Action) -> f64 {
        self.values.get(&(state, action)).copied().unwrap_or(self.q0)
    }

    pub fn set(&mut self, state: State, action: Action, value: f64) {
        if value == self.q0 {
            self.values.remove(&(state, action));
        } else {
            self.values.insert((state, action), value);
        }
    }

    /// Number of stored (non-default) pairs.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (State, Action, f64)> + '_ {
        self.values.iter().map(|(&(s, a), &v)| (s, a, v))
    }

    /// Greedy action: the first legal action (in tie-break order) whose value
    /// is maximal, together with that value.
    pub fn best_action(&self, space: &SearchSpace, state: State) -> Result<(Action, f64), QError> {
        let legal = space.legal_actions(state)?;
        let mut best = (legal[0], self.get(state, legal[0]));
        for &a in &legal[1..] {
            let v = self.get(state, a);
            if v > best.1 {
                best = (a, v);
            }
        }
        Ok(best)
    }

    /// Applies the one-step update to every transition of `trajectory`,
    /// last transition first.
    ///
    /// The terminal transition observes `reward` and has no future term; all
    /// earlier transitions observe 0 and bootstrap from the greedy value of
    /// their successor state under the current table.
    pub fn update(&mut self, trajectory: &Trajectory, reward: f64, params: LearningParams) -> Result<(), QError> {
        if !(0.0..=1.0).contains(&reward) {
            return Err(QError::RewardOutOfRange(reward));
        }
        params.validate()?;
        let space = SearchSpace::new(trajectory.max_depth())?;
        for t in trajectory.transitions().iter().rev() {
            let (observed, future) = if t.to.is_terminal() {
                (reward, 0.0)
            } else {
                (0.0, self.best_action(&space, t.to)?.1)
            };
            let old = self.get(t.from, t.action);
            let new = (1.0 - params.alpha) * old + params.alpha * (observed + params.gamma * future);
            self.set(t.from, t.action, new);
        }
        Ok(())
    }

    /// One line per stored pair: `q <depth> <state> <action> <value>`, where
    /// state is `START`, `B(n)` or `GAP`. Values use the shortest decimal
    /// form that round-trips exactly.
    pub fn write_records(&self, out: &mut String) {
        for (s, a, v) in self.iter() {
            let tag = match s {
                State::Start => "START".to_string(),
                State::Block { block, .. } => block.to_string(),
                State::PostGap { .. } => "GAP".to_string(),
                State::Terminal { .. } => unreachable!("terminal states have no actions"),
            };
            writeln!(out, "q {} {} {} {}", s.depth(), tag, a, v).expect("writing to String");
        }
    }

    pub fn parse_record(line: &str) -> Result<(State, Action, f64), QError> {
        let bad = || QError::Record(line.to_string());
        let mut parts = line.split(' ');
        if parts.next() != Some("q") {
            return Err(bad());
        }
        let (Some(depth), Some(tag), Some(action), Some(value), None) =
            (parts.next(), parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(bad());
        };
        let depth: u32 = depth.parse().map_err(|_| bad())?;
        let state = match tag {
            "START" if depth == 0 => State::Start,
            "GAP" if depth > 0 => State::PostGap { depth },
            _ if depth > 0 => match parse_code(tag) {
                Ok(BlockCode::Block(block)) => State::Block { depth, block },
                _ => return Err(bad()),
            },
            _ => return Err(bad()),
        };
        let action = match action {
            "GAP" => BlockCode::Gap,
            "SM" => BlockCode::Sm,
            other => parse_code(other).map_err(|_| bad())?,
        };
        let value: f64 = value.parse().map_err(|_| bad())?;
        if !value.is_finite() {
            return Err(bad());
        }
        Ok((state, action, value))
    }

    pub fn from_records<'a>(q0: f64, lines: impl IntoIterator<Item = &'a str>) -> Result<Self, QError> {
        let mut table = QTable::new(q0);
        for line in lines {
            let (s, a, v) = Self::parse_record(line)?;
            table.set(s, a, v);
        }
        Ok(table)
    }

    /// Hex SHA-256 over q0 and the serialized records.
    pub fn digest(&self) -> String {
        let mut text = format!("q0 {}\n", self.q0);
        self.write_records(&mut text);
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}
