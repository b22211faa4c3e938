//! The block-selection MDP: states, legal actions, transitions and the
//! net-string codec.
//!
//! A network always opens with the dense block `B(0)`. Every later layer may
//! be any of the twelve blocks until `max_depth` blocks have been placed; at
//! any depth >= 1 the agent may terminate with `SM`, or with `GAP` followed by
//! a forced `SM`. `GAP` does not consume a block slot.

use std::fmt;

use thiserror::Error;

use crate::catalog::{format_code, parse_item, BlockCode, BlockId, CatalogError};

/// Largest supported `max_depth`.
pub const MAX_SUPPORTED_DEPTH: u32 = 32;

/// Refuse to enumerate spaces larger than this.
pub const ENUMERATION_LIMIT: u128 = 10_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpaceError {
    #[error("max_depth must be in 1..={MAX_SUPPORTED_DEPTH}, got {0}")]
    BadMaxDepth(u32),
    #[error("no actions are legal in terminal state {0}")]
    TerminalState(State),
    #[error("action {action} is not legal in state {state}")]
    IllegalAction { state: State, action: BlockCode },
    #[error("a network must start with B(0), found {0}")]
    MustStartWithDense(String),
    #[error("network has {blocks} blocks, more than max_depth {max_depth}")]
    TooDeep { blocks: usize, max_depth: u32 },
    #[error("network does not end with a terminator")]
    Incomplete,
    #[error("items after the final SM terminator")]
    TrailingItems,
    #[error("net string: {0}")]
    Syntax(String),
    #[error("net string: {0}")]
    Code(#[from] CatalogError),
    #[error("terminators disagree on class count ({0} vs {1})")]
    ClassMismatch(u32, u32),
    #[error("space holds {count} trajectories, more than the enumeration limit {ENUMERATION_LIMIT}")]
    TooMany { count: u128 },
}

/// A node of the MDP. Q-values are keyed on this value, so two prefixes that
/// end in the same block at the same depth share a state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum State {
    Start,
    Block { depth: u32, block: BlockId },
    PostGap { depth: u32 },
    Terminal { depth: u32 },
}

impl State {
    pub fn depth(self) -> u32 {
        match self {
            State::Start => 0,
            State::Block { depth, .. } | State::PostGap { depth } | State::Terminal { depth } => depth,
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, State::Terminal { .. })
    }
}

impl fmt::Display for State {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            State::Start => write!(f, "(0, start)"),
            State::Block { depth, block } => write!(f, "({depth}, {block})"),
            State::PostGap { depth } => write!(f, "({depth}, post-GAP)"),
            State::Terminal { depth } => write!(f, "({depth}, terminal)"),
        }
    }
}

/// The decision for the next layer.
pub type Action = BlockCode;

/// All actions in tie-break order: `B(0)..B(11)`, `GAP`, `SM`.
fn all_actions() -> &'static [Action; 14] {
    use std::sync::OnceLock;
    static ALL: OnceLock<[Action; 14]> = OnceLock::new();
    ALL.get_or_init(|| {
        let mut out = [BlockCode::Sm; 14];
        for (slot, code) in out.iter_mut().zip(BlockCode::all()) {
            *slot = code;
        }
        out
    })
}

const START_ACTIONS: [Action; 1] = [BlockCode::Block(BlockId::DENSE)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Transition {
    pub from: State,
    pub action: Action,
    pub to: State,
}

/// A complete start-to-terminal path. Always valid for its `max_depth`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Trajectory {
    max_depth: u32,
    transitions: Vec<Transition>,
}

impl Trajectory {
    pub fn max_depth(&self) -> u32 {
        self.max_depth
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    /// The selected codes, ending in `SM` (optionally preceded by `GAP`).
    pub fn codes(&self) -> Vec<BlockCode> {
        self.transitions.iter().map(|t| t.action).collect()
    }

    /// Number of block layers (terminators excluded).
    pub fn block_count(&self) -> usize {
        self.transitions.iter().filter(|t| !t.action.is_terminator()).count()
    }
}

/// The MDP for a fixed maximum number of block layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SearchSpace {
    max_depth: u32,
}

impl SearchSpace {
    pub fn new(max_depth: u32) -> Result<Self, SpaceError> {
        if (1..=MAX_SUPPORTED_DEPTH).contains(&max_depth) {
            Ok(SearchSpace { max_depth })
        } else {
            Err(SpaceError::BadMaxDepth(max_depth))
        }
    }

    pub fn max_depth(&self) -> u32 {
        self.max_depth
    }

    pub fn initial_state(&self) -> State {
        State::Start
    }

    /// Legal actions in tie-break order. Never empty for a non-terminal state.
    pub fn legal_actions(&self, state: State) -> Result<&'static [Action], SpaceError> {
        let all = all_actions();
        match state {
            State::Start => Ok(&START_ACTIONS),
            State::Block { depth, .. } if depth < self.max_depth => Ok(&all[..]),
            State::Block { .. } => Ok(&all[12..]),
            State::PostGap { .. } => Ok(&all[13..]),
            State::Terminal { .. } => Err(SpaceError::TerminalState(state)),
        }
    }

    pub fn apply(&self, state: State, action: Action) -> Result<State, SpaceError> {
        if !self.legal_actions(state)?.contains(&action) {
            return Err(SpaceError::IllegalAction { state, action });
        }
        let depth = state.depth();
        Ok(match action {
            BlockCode::Block(block) => State::Block { depth: depth + 1, block },
            BlockCode::Gap => State::PostGap { depth },
            BlockCode::Sm => State::Terminal { depth },
        })
    }

    /// Validates a code sequence and builds its trajectory.
    pub fn trajectory(&self, codes: &[BlockCode]) -> Result<Trajectory, SpaceError> {
        match codes.first() {
            Some(BlockCode::Block(id)) if *id == BlockId::DENSE => {}
            Some(other) => return Err(SpaceError::MustStartWithDense(format_code(*other, 0))),
            None => return Err(SpaceError::Incomplete),
        }
        let blocks = codes.iter().filter(|c| !c.is_terminator()).count();
        if blocks > self.max_depth as usize {
            return Err(SpaceError::TooDeep { blocks, max_depth: self.max_depth });
        }
        let mut state = self.initial_state();
        let mut transitions = Vec::with_capacity(codes.len());
        for &action in codes {
            if state.is_terminal() {
                return Err(SpaceError::TrailingItems);
            }
            let next = self.apply(state, action)?;
            transitions.push(Transition { from: state, action, to: next });
            state = next;
        }
        if !state.is_terminal() {
            return Err(SpaceError::Incomplete);
        }
        Ok(Trajectory { max_depth: self.max_depth, transitions })
    }

    /// Closed-form number of complete trajectories: sum over d of 2 * 12^(d-1).
    pub fn size(&self) -> u128 {
        (1..=self.max_depth).map(|d| 2 * 12u128.pow(d - 1)).sum()
    }

    /// Every complete trajectory exactly once, in lexicographic code order.
    pub fn enumerate_all(&self) -> Result<Enumerate, SpaceError> {
        let count = self.size();
        if count > ENUMERATION_LIMIT {
            return Err(SpaceError::TooMany { count });
        }
        Ok(Enumerate::new(*self))
    }
}

/// Depth-first enumeration in action order, which is lexicographic because
/// no complete trajectory is a prefix of another.
pub struct Enumerate {
    space: SearchSpace,
    // (state, index of the chosen action among its legal actions)
    frames: Vec<(State, usize)>,
    fresh: bool,
}

impl Enumerate {
    fn new(space: SearchSpace) -> Self {
        let mut e = Enumerate { space, frames: Vec::new(), fresh: true };
        e.descend(space.initial_state());
        e
    }

    fn descend(&mut self, mut state: State) {
        while !state.is_terminal() {
            let action = self.space.legal_actions(state).expect("non-terminal")[0];
            self.frames.push((state, 0));
            state = self.space.apply(state, action).expect("legal");
        }
    }

    fn current(&self) -> Trajectory {
        let mut transitions = Vec::with_capacity(self.frames.len());
        let mut iter = self.frames.iter().peekable();
        while let Some(&(from, idx)) = iter.next() {
            let action = self.space.legal_actions(from).expect("non-terminal")[idx];
            let to = match iter.peek() {
                Some(&&(next, _)) => next,
                None => self.space.apply(from, action).expect("legal"),
            };
            transitions.push(Transition { from, action, to });
        }
        Trajectory { max_depth: self.space.max_depth, transitions }
    }

    fn advance(&mut self) {
        while let Some((state, idx)) = self.frames.pop() {
            let legal = self.space.legal_actions(state).expect("non-terminal");
            if idx + 1 < legal.len() {
                self.frames.push((state, idx + 1));
                let next = self.space.apply(state, legal[idx + 1]).expect("legal");
                self.descend(next);
                return;
            }
        }
    }
}

impl Iterator for Enumerate {
    type Item = Trajectory;

    fn next(&mut self) -> Option<Trajectory> {
        if self.fresh {
            self.fresh = false;
        } else {
            self.advance();
        }
        if self.frames.is_empty() {
            None
        } else {
            Some(self.current())
        }
    }
}

/// Renders `[B(0),...,SM(c)]` with no whitespace.
pub fn encode_net(trajectory: &Trajectory, classes: u32) -> String {
    encode_codes(&trajectory.codes(), classes)
}

pub(crate) fn encode_codes(codes: &[BlockCode], classes: u32) -> String {
    let items: Vec<String> = codes.iter().map(|&c| format_code(c, classes)).collect();
    format!("[{}]", items.join(","))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodedNet {
    pub trajectory: Trajectory,
    pub classes: u32,
}

/// Parses a net string and checks it against the trajectory rules.
pub fn decode_net(text: &str, max_depth: u32) -> Result<DecodedNet, SpaceError> {
    let space = SearchSpace::new(max_depth)?;
    let (codes, classes) = parse_net_codes(text)?;
    let trajectory = space.trajectory(&codes)?;
    Ok(DecodedNet { trajectory, classes: classes.ok_or(SpaceError::Incomplete)? })
}

/// Syntax-only parse of a net string into codes and the terminator class count.
pub fn parse_net_codes(text: &str) -> Result<(Vec<BlockCode>, Option<u32>), SpaceError> {
    let inner = text
        .strip_prefix('[')
        .and_then(|t| t.strip_suffix(']'))
        .ok_or_else(|| SpaceError::Syntax(format!("`{text}` is not bracketed")))?;
    if inner.is_empty() {
        return Err(SpaceError::Syntax("empty net".into()));
    }
    let mut classes: Option<u32> = None;
    let mut codes = Vec::new();
    for item in inner.split(',') {
        let (code, c) = parse_item(item)?;
        if let Some(c) = c {
            match classes {
                Some(prev) if prev != c => return Err(SpaceError::ClassMismatch(prev, c)),
                _ => classes = Some(c),
            }
        }
        codes.push(code);
    }
    Ok((codes, classes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blk(i: u8) -> BlockCode {
        BlockCode::block(i).unwrap()
    }

    fn space(d: u32) -> SearchSpace {
        SearchSpace::new(d).unwrap()
    }

    #[test]
    fn initial_state_examples() {
        let s = space(5);
        assert_eq!(s.initial_state().depth(), 0);
        assert_eq!(s.legal_actions(s.initial_state()).unwrap(), &[blk(0)]);
        assert_eq!(s.apply(s.initial_state(), blk(0)).unwrap().depth(), 1);
    }

    #[test]
    fn legal_action_examples() {
        let s = space(5);
        let b3 = BlockId::new(3).unwrap();
        assert_eq!(
            s.legal_actions(State::Block { depth: 5, block: b3 }).unwrap(),
            &[BlockCode::Gap, BlockCode::Sm]
        );
        assert_eq!(s.legal_actions(State::Block { depth: 1, block: BlockId::DENSE }).unwrap().len(), 14);
        assert_eq!(s.legal_actions(State::PostGap { depth: 3 }).unwrap(), &[BlockCode::Sm]);
        assert!(matches!(
            s.legal_actions(State::Terminal { depth: 2 }),
            Err(SpaceError::TerminalState(_))
        ));
    }

    #[test]
    fn apply_examples() {
        let s = space(5);
        let d1 = State::Block { depth: 1, block: BlockId::DENSE };
        let d2 = s.apply(d1, blk(3)).unwrap();
        assert_eq!(d2, State::Block { depth: 2, block: BlockId::new(3).unwrap() });
        assert_eq!(s.apply(d2, BlockCode::Gap).unwrap(), State::PostGap { depth: 2 });
        assert_eq!(s.apply(State::PostGap { depth: 2 }, BlockCode::Sm).unwrap(), State::Terminal { depth: 2 });

        let err = s.apply(State::PostGap { depth: 2 }, blk(4)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("post-GAP") && msg.contains("4"), "{msg}");
        assert!(s.apply(State::Start, blk(1)).is_err());
    }

    #[test]
    fn encode_examples() {
        let s = space(5);
        let t = s.trajectory(&[blk(0), blk(0), BlockCode::Sm]).unwrap();
        assert_eq!(encode_net(&t, 10), "[B(0),B(0),SM(10)]");
        let t = s.trajectory(&[blk(0), BlockCode::Gap, BlockCode::Sm]).unwrap();
        assert_eq!(encode_net(&t, 10), "[B(0),GAP(10),SM(10)]");
    }

    #[test]
    fn decode_examples() {
        let d = decode_net("[B(0),B(8),B(3),B(0),SM(10)]", 5).unwrap();
        assert_eq!(d.trajectory.block_count(), 4);
        assert_eq!(d.classes, 10);

        assert!(matches!(decode_net("[B(3),SM(10)]", 5), Err(SpaceError::MustStartWithDense(_))));
        assert!(matches!(
            decode_net("[B(0),B(0),B(0),B(0),B(0),B(0),SM(10)]", 5),
            Err(SpaceError::TooDeep { blocks: 6, max_depth: 5 })
        ));
    }

    #[test]
    fn decode_rejects_malformed() {
        for bad in [
            "",
            "[]",
            "B(0),SM(10)",
            "[B(0), SM(10)]",
            "[B(0),SM(10)",
            "[B(0)]",
            "[B(0),GAP(10)]",
            "[B(0),SM(10),SM(10)]",
            "[B(0),SM(10),B(1)]",
            "[B(0),GAP(10),B(1),SM(10)]",
            "[B(0),GAP(10),SM(100)]",
            "[B(0),B(12),SM(10)]",
            "[SM(10)]",
        ] {
            assert!(decode_net(bad, 5).is_err(), "accepted {bad:?}");
        }
    }

    #[test]
    fn small_enumerations() {
        let all: Vec<_> = space(1).enumerate_all().unwrap().map(|t| encode_net(&t, 10)).collect();
        assert_eq!(all, vec!["[B(0),GAP(10),SM(10)]", "[B(0),SM(10)]"]);
        assert_eq!(space(2).enumerate_all().unwrap().count(), 26);
        assert_eq!(space(2).size(), 26);
        assert_eq!(space(5).size(), 45_242);
    }

    #[test]
    fn enumeration_is_sorted_and_unique() {
        let codes: Vec<Vec<BlockCode>> = space(3).enumerate_all().unwrap().map(|t| t.codes()).collect();
        assert_eq!(codes.len() as u128, space(3).size());
        assert!(codes.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn enumeration_guard() {
        assert!(space(7).enumerate_all().is_ok());
        match space(8).enumerate_all() {
            Err(SpaceError::TooMany { count }) => assert_eq!(count, space(8).size()),
            Ok(_) => panic!("depth 8 should exceed the guard"),
            Err(e) => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn bad_max_depth() {
        assert!(SearchSpace::new(0).is_err());
        assert!(SearchSpace::new(MAX_SUPPORTED_DEPTH + 1).is_err());
    }
}
