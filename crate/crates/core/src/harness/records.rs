//! Append-only JSONL files written by a run.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::reward::EvalStatus;

/// One replay DB line; every iteration writes one, cached or not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DbRow {
    pub iteration: u64,
    /// Epsilon of the stage the sample belongs to.
    pub epsilon: f64,
    pub net: String,
    pub accuracy: f64,
    pub params: u64,
    pub cached: bool,
    pub status: EvalStatus,
    pub timestamp: u64,
    #[serde(default)]
    pub stage: usize,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

/// One search log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: u64,
    pub stage: usize,
    pub epsilon: f64,
    pub net: String,
    pub accuracy: f64,
    pub cached: bool,
    /// Exploration was forced because the stage hit its attempt cap.
    #[serde(default)]
    pub forced_explore: bool,
    /// Digest of the Q-table after this iteration's updates.
    pub q_hash: String,
}

pub type SearchLog = Vec<LogRecord>;

pub fn append_jsonl<T: Serialize>(path: &Path, record: &T) -> Result<(), HarnessError> {
    let mut line = serde_json::to_string(record).expect("records serialize");
    line.push('\n');
    let mut file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| HarnessError::io(path, e))?;
    file.write_all(line.as_bytes()).map_err(|e| HarnessError::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, HarnessError> {
    let file = File::open(path).map_err(|e| HarnessError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| HarnessError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line)
            .map_err(|e| HarnessError::Corrupt(format!("{} line {}: {e}", path.display(), i + 1)))?;
        out.push(record);
    }
    Ok(out)
}

/// Streams rows one at a time, for files too large to hold in memory.
pub fn stream_jsonl<T: DeserializeOwned>(
    path: &Path,
) -> Result<impl Iterator<Item = Result<T, HarnessError>>, HarnessError> {
    let file = File::open(path).map_err(|e| HarnessError::io(path, e))?;
    let shown = path.display().to_string();
    Ok(BufReader::new(file)
        .lines()
        .enumerate()
        .filter(|(_, l)| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(move |(i, line)| {
            let line = line.map_err(|e| HarnessError::Io { path: shown.clone(), reason: e.to_string() })?;
            serde_json::from_str(&line).map_err(|e| HarnessError::Corrupt(format!("{shown} line {}: {e}", i + 1)))
        }))
}

/// Cuts a file back to its first `keep` lines, dropping anything written
/// after the last checkpoint. A missing file counts as empty.
pub fn truncate_lines(path: &Path, keep: u64) -> Result<(), HarnessError> {
    let text = match std::fs::read(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound && keep == 0 => return Ok(()),
        Err(e) => return Err(HarnessError::io(path, e)),
    };
    let mut seen = 0u64;
    let mut cut = 0usize;
    for (i, b) in text.iter().enumerate() {
        if seen == keep {
            break;
        }
        if *b == b'\n' {
            seen += 1;
            cut = i + 1;
        }
    }
    if seen < keep {
        return Err(HarnessError::Corrupt(format!(
            "{} holds {seen} complete lines, checkpoint expects {keep}",
            path.display()
        )));
    }
    if cut < text.len() {
        let file = OpenOptions::new().write(true).open(path).map_err(|e| HarnessError::io(path, e))?;
        file.set_len(cut as u64).map_err(|e| HarnessError::io(path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(i: u64) -> DbRow {
        DbRow {
            iteration: i,
            epsilon: 1.0,
            net: "[B(0),SM(10)]".into(),
            accuracy: 0.85,
            params: 721274,
            cached: false,
            status: EvalStatus::Ok,
            timestamp: i,
            stage: 0,
            detail: String::new(),
        }
    }

    #[test]
    fn row_layout() {
        let line = serde_json::to_string(&row(1)).unwrap();
        assert_eq!(
            line,
            r#"{"iteration":1,"epsilon":1.0,"net":"[B(0),SM(10)]","accuracy":0.85,"params":721274,"cached":false,"status":"ok","timestamp":1,"stage":0}"#
        );
    }

    #[test]
    fn append_read_truncate() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("db.jsonl");
        for i in 1..=4 {
            append_jsonl(&path, &row(i)).unwrap();
        }
        std::fs::OpenOptions::new().append(true).open(&path).unwrap().write_all(b"{\"iterat").unwrap();
        assert!(read_jsonl::<DbRow>(&path).is_err());
        truncate_lines(&path, 2).unwrap();
        let rows: Vec<DbRow> = read_jsonl(&path).unwrap();
        assert_eq!(rows, vec![row(1), row(2)]);
        let streamed: Vec<DbRow> = stream_jsonl(&path).unwrap().collect::<Result<_, _>>().unwrap();
        assert_eq!(streamed, rows);
        assert!(truncate_lines(&path, 3).is_err());
        truncate_lines(&dir.path().join("absent"), 0).unwrap();
    }
}
