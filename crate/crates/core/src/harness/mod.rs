//! Runs a search end to end: walks the epsilon schedule, trains each new
//! model once, updates the agent, and persists enough state after every
//! iteration to resume after a crash.
//!
//! A run directory holds three files: the replay DB (`replay.jsonl`, one row
//! per iteration), the search log (`search_log.jsonl`, adds the Q-table
//! digest) and the checkpoint.

mod checkpoint;
mod config;
mod records;
mod search;

use std::path::Path;

use thiserror::Error;

pub use checkpoint::{Checkpoint, RngState};
pub use config::{ClockMode, ConfigFile, EvaluatorConfig, SearchConfig};
pub use records::{append_jsonl, read_jsonl, stream_jsonl, truncate_lines, DbRow, LogRecord, SearchLog};
pub use search::{resume, run_search, Search, StepOutcome, CHECKPOINT_FILE, DB_FILE, LOG_FILE};

use crate::qlearning::QError;
use crate::space::SpaceError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {reason}")]
    Io { path: String, reason: String },
    #[error("{0}")]
    Corrupt(String),
    #[error("{0} already exists; resume the run or pick a new directory")]
    AlreadyExists(String),
    #[error("evaluator: {0}")]
    Evaluator(String),
    #[error(transparent)]
    Q(#[from] QError),
    #[error(transparent)]
    Space(#[from] SpaceError),
}

impl HarnessError {
    pub(crate) fn io(path: &Path, e: std::io::Error) -> Self {
        HarnessError::Io { path: path.display().to_string(), reason: e.to_string() }
    }
}
