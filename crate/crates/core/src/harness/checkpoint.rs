//! Resumable search state.
//!
//! The file is one JSON document on one line followed by a
//! `sha256 <hex>` footer over that line. It is replaced atomically after
//! every iteration.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ConfigFile;
use super::HarnessError;
use crate::qlearning::QTable;

pub(super) const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Decimal, since JSON numbers cannot hold a u128 portably.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng, HarnessError> {
        let bad = |what: &str| HarnessError::Corrupt(format!("checkpoint rng {what}"));
        let bytes = hex::decode(&self.seed).map_err(|_| bad("seed"))?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| bad("seed length"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad("word position"))?);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ConfigFile,
    /// Iterations completed so far.
    pub iteration: u64,
    pub next_request_id: u64,
    pub stage: usize,
    pub stage_unique: u32,
    pub stage_attempts: u64,
    pub rng: RngState,
    pub db_rows: u64,
    pub log_rows: u64,
    pub finished: bool,
    pub q0: f64,
    pub q_records: Vec<String>,
}

impl Checkpoint {
    pub fn q_table(&self) -> Result<QTable, HarnessError> {
        QTable::from_records(self.q0, self.q_records.iter().map(String::as_str))
            .map_err(|e| HarnessError::Corrupt(format!("checkpoint Q-table: {e}")))
    }

    pub fn records_of(q: &QTable) -> Vec<String> {
        let mut text = String::new();
        q.write_records(&mut text);
        text.lines().map(str::to_string).collect()
    }

    pub fn to_text(&self) -> String {
        let mut body = serde_json::to_string(self).expect("checkpoint serializes");
        body.push('\n');
        let digest = hex::encode(Sha256::digest(body.as_bytes()));
        format!("{body}sha256 {digest}\n")
    }

    pub fn from_text(text: &str) -> Result<Self, HarnessError> {
        let integrity = |m: &str| HarnessError::Corrupt(format!("checkpoint integrity check failed: {m}"));
        let body_end = text.find('\n').ok_or_else(|| integrity("missing sha256 footer"))? + 1;
        let (body, footer) = text.split_at(body_end);
        let recorded = footer
            .strip_prefix("sha256 ")
            .map(str::trim_end)
            .ok_or_else(|| integrity("missing sha256 footer"))?;
        if recorded != hex::encode(Sha256::digest(body.as_bytes())) {
            return Err(integrity("sha256 mismatch"));
        }
        let cp: Checkpoint =
            serde_json::from_str(body).map_err(|e| HarnessError::Corrupt(format!("checkpoint body: {e}")))?;
        if cp.version != VERSION {
            return Err(HarnessError::Corrupt(format!("unsupported checkpoint version {}", cp.version)));
        }
        Ok(cp)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_text(&text)
    }

    /// Writes to a sibling temp file, syncs, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        let tmp = path.with_extension("tmp");
        let mut file = std::fs::File::create(&tmp).map_err(|e| HarnessError::io(&tmp, e))?;
        file.write_all(self.to_text().as_bytes()).map_err(|e| HarnessError::io(&tmp, e))?;
        file.sync_all().map_err(|e| HarnessError::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| HarnessError::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let _: u64 = rng.random();
        Checkpoint {
            version: VERSION,
            config: ConfigFile { seed: Some(5), ..ConfigFile::default() },
            iteration: 3,
            next_request_id: 4,
            stage: 0,
            stage_unique: 3,
            stage_attempts: 3,
            rng: RngState::capture(&rng),
            db_rows: 3,
            log_rows: 3,
            finished: false,
            q0: 0.5,
            q_records: vec!["q 0 START B(0) 0.5123".into()],
        }
    }

    #[test]
    fn text_round_trip() {
        let cp = sample();
        assert_eq!(Checkpoint::from_text(&cp.to_text()).unwrap(), cp);
        assert_eq!(cp.q_table().unwrap().len(), 1);
    }

    #[test]
    fn rng_state_resumes_the_stream() {
        let mut a = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..7 {
            let _: u32 = a.random();
        }
        let mut b = RngState::capture(&a).restore().unwrap();
        let xs: Vec<u64> = (0..5).map(|_| a.random()).collect();
        let ys: Vec<u64> = (0..5).map(|_| b.random()).collect();
        assert_eq!(xs, ys);
    }

    #[test]
    fn integrity_failures_are_named() {
        let text = sample().to_text();
        let truncated = &text[..text.len() / 2];
        let err = Checkpoint::from_text(truncated).unwrap_err().to_string();
        assert!(err.contains("integrity check failed"), "{err}");
        let tampered = text.replacen("\"iteration\":3", "\"iteration\":4", 1);
        let err = Checkpoint::from_text(&tampered).unwrap_err().to_string();
        assert!(err.contains("sha256 mismatch"), "{err}");
        let body_only = text.lines().next().unwrap().to_string() + "\n";
        assert!(Checkpoint::from_text(&body_only).unwrap_err().to_string().contains("missing sha256 footer"));
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("checkpoint");
        sample().save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), sample());
        assert!(!path.with_extension("tmp").exists());
    }
}
