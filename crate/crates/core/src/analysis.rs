//! Reports over a replay DB: top-k tables, per-stage accuracy summaries and
//! structural queries.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::format_millions;
use crate::catalog::{format_code, parse_code, BlockCode, BlockId, ConcatMode, Family};
use crate::harness::{stream_jsonl, DbRow, HarnessError};
use crate::space::parse_net_codes;

pub const VALID_QUERIES: &str = "contains:<code>, swap_pairs, concat_effect";

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("replay DB is empty")]
    Empty,
    #[error("unknown query {0:?}; valid queries: {VALID_QUERIES}")]
    UnknownQuery(String),
    #[error("invalid query code: {0}")]
    BadCode(String),
    #[error("row {iteration}: {reason}")]
    BadRow { iteration: u64, reason: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Harness(#[from] HarnessError),
}

/// One trained model, deduplicated by net string.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub net: String,
    pub accuracy: f64,
    pub iteration: u64,
    pub params: u64,
}

/// Collapses rows to one entry per distinct net: cached rows are skipped and
/// a net evaluated more than once keeps its best result. The output is
/// sorted by accuracy descending, then iteration, then net, so it does not
/// depend on row order.
pub fn entries(rows: &[DbRow]) -> Vec<Entry> {
    let mut best: HashMap<&str, Entry> = HashMap::new();
    for row in rows.iter().filter(|r| !r.cached) {
        let candidate = Entry { net: row.net.clone(), accuracy: row.accuracy, iteration: row.iteration, params: row.params };
        best.entry(row.net.as_str())
            .and_modify(|e| {
                if rank(&candidate, e).is_lt() {
                    *e = candidate.clone();
                }
            })
            .or_insert(candidate);
    }
    let mut out: Vec<Entry> = best.into_values().collect();
    out.sort_by(rank);
    out
}

fn rank(a: &Entry, b: &Entry) -> std::cmp::Ordering {
    b.accuracy
        .total_cmp(&a.accuracy)
        .then(a.iteration.cmp(&b.iteration))
        .then_with(|| a.net.cmp(&b.net))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopRow {
    pub net: String,
    pub accuracy: f64,
    /// Iteration at which the model was chosen.
    pub order: u64,
    pub params: u64,
}

impl fmt::Display for TopRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}  {:.2}  {}  {}", self.net, self.accuracy * 100.0, self.order, format_millions(self.params))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopK {
    pub rows: Vec<TopRow>,
    pub note: Option<String>,
}

impl fmt::Display for TopK {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for row in &self.rows {
            writeln!(f, "{row}")?;
        }
        if let Some(note) = &self.note {
            writeln!(f, "note: {note}")?;
        }
        Ok(())
    }
}

pub fn top_k(rows: &[DbRow], k: usize) -> Result<TopK, AnalysisError> {
    if rows.is_empty() {
        return Err(AnalysisError::Empty);
    }
    let all = entries(rows);
    let note = (k > all.len()).then(|| format!("requested {k} rows, DB holds {} distinct models", all.len()));
    let rows = all
        .into_iter()
        .take(k)
        .map(|e| TopRow { net: e.net, accuracy: e.accuracy, order: e.iteration, params: e.params })
        .collect();
    Ok(TopK { rows, note })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub epsilon: f64,
    /// Rows in the stage, cached reselections included.
    pub model_count: u64,
    pub mean_accuracy: f64,
    pub max_accuracy: f64,
}

/// Summarizes every selection of each stage, highest epsilon first.
pub fn stage_stats(rows: &[DbRow]) -> Vec<StageStats> {
    let mut groups: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for row in rows {
        groups.entry(row.epsilon.to_bits()).or_default().push(row.accuracy);
    }
    let mut out: Vec<StageStats> = groups
        .into_iter()
        .map(|(bits, accs)| StageStats {
            epsilon: f64::from_bits(bits),
            model_count: accs.len() as u64,
            mean_accuracy: accs.iter().sum::<f64>() / accs.len() as f64,
            max_accuracy: accs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
        .collect();
    out.sort_by(|a, b| b.epsilon.total_cmp(&a.epsilon));
    out
}

/// Same result as [`stage_stats`] computed in one pass over the file with
/// running means, for DBs too large to load.
pub fn stage_stats_streaming(path: &Path) -> Result<Vec<StageStats>, AnalysisError> {
    let mut acc: Vec<StageStats> = Vec::new();
    for row in stream_jsonl::<DbRow>(path)? {
        let row = row?;
        let slot = match acc.iter_mut().position(|s| s.epsilon.to_bits() == row.epsilon.to_bits()) {
            Some(i) => &mut acc[i],
            None => {
                acc.push(StageStats { epsilon: row.epsilon, model_count: 0, mean_accuracy: 0.0, max_accuracy: f64::NEG_INFINITY });
                acc.last_mut().unwrap()
            }
        };
        slot.model_count += 1;
        slot.mean_accuracy += (row.accuracy - slot.mean_accuracy) / slot.model_count as f64;
        slot.max_accuracy = slot.max_accuracy.max(row.accuracy);
    }
    acc.sort_by(|a, b| b.epsilon.total_cmp(&a.epsilon));
    Ok(acc)
}

pub fn write_stage_csv<W: Write>(stats: &[StageStats], out: W) -> Result<(), AnalysisError> {
    let mut w = csv::Writer::from_writer(out);
    for s in stats {
        w.serialize(s)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_stage_csv<R: Read>(input: R) -> Result<Vec<StageStats>, AnalysisError> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize().map(|s| s.map_err(AnalysisError::from)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Query {
    Contains(BlockCode),
    SwapPairs,
    ConcatEffect,
}

impl FromStr for Query {
    type Err = AnalysisError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if let Some(code) = s.strip_prefix("contains:") {
            let code = parse_code(code.trim()).map_err(|e| AnalysisError::BadCode(e.to_string()))?;
            return Ok(Query::Contains(code));
        }
        match s {
            "swap_pairs" => Ok(Query::SwapPairs),
            "concat_effect" => Ok(Query::ConcatEffect),
            other => Err(AnalysisError::UnknownQuery(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Option<Summary> {
        let values: Vec<f64> = values.into_iter().collect();
        if values.is_empty() {
            return None;
        }
        Some(Summary {
            count: values.len(),
            mean: values.iter().sum::<f64>() / values.len() as f64,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "n={} mean={:.2} min={:.2} max={:.2}",
            self.count,
            self.mean * 100.0,
            self.min * 100.0,
            self.max * 100.0
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwapPair {
    pub first: Entry,
    pub second: Entry,
    /// `second.accuracy - first.accuracy`.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub label: String,
    pub members: Vec<BlockId>,
    pub summary: Option<Summary>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Report {
    Contains { code: BlockCode, entries: Vec<Entry>, summary: Option<Summary> },
    SwapPairs(Vec<SwapPair>),
    ConcatEffect(Vec<Group>),
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Report::Contains { code, entries, summary } => {
                writeln!(f, "contains {}: {}", format_code(*code, 10), show(summary))?;
                for e in entries {
                    writeln!(f, "{}  {:.2}  {}", e.net, e.accuracy * 100.0, e.iteration)?;
                }
            }
            Report::SwapPairs(pairs) => {
                writeln!(f, "swap pairs: {}", pairs.len())?;
                for p in pairs {
                    writeln!(f, "{}  {}  {:+.2}", p.first.net, p.second.net, p.delta * 100.0)?;
                }
            }
            Report::ConcatEffect(groups) => {
                for g in groups {
                    writeln!(f, "{:<20}  {}", g.label, show(&g.summary))?;
                }
            }
        }
        Ok(())
    }
}

fn show(summary: &Option<Summary>) -> String {
    summary.map_or_else(|| "n=0".to_string(), |s| s.to_string())
}

fn codes_of(entry: &Entry) -> Result<Vec<BlockCode>, AnalysisError> {
    parse_net_codes(&entry.net)
        .map(|(codes, _)| codes)
        .map_err(|e| AnalysisError::BadRow { iteration: entry.iteration, reason: e.to_string() })
}

pub fn structural_query(rows: &[DbRow], query: &Query) -> Result<Report, AnalysisError> {
    let all = entries(rows);
    let mut parsed = Vec::with_capacity(all.len());
    for e in all {
        let codes = codes_of(&e)?;
        parsed.push((e, codes));
    }
    Ok(match *query {
        Query::Contains(code) => {
            let hits: Vec<Entry> = parsed.into_iter().filter(|(_, c)| c.contains(&code)).map(|(e, _)| e).collect();
            let summary = Summary::of(hits.iter().map(|e| e.accuracy));
            Report::Contains { code, entries: hits, summary }
        }
        Query::SwapPairs => Report::SwapPairs(swap_pairs(parsed)),
        Query::ConcatEffect => Report::ConcatEffect(concat_effect(&parsed)),
    })
}

/// Pairs of entries whose code multisets (terminators included) are equal
/// while their orders differ.
fn swap_pairs(parsed: Vec<(Entry, Vec<BlockCode>)>) -> Vec<SwapPair> {
    let mut by_multiset: BTreeMap<Vec<BlockCode>, Vec<Entry>> = BTreeMap::new();
    for (e, mut codes) in parsed {
        codes.sort();
        by_multiset.entry(codes).or_default().push(e);
    }
    let mut pairs = Vec::new();
    for mut group in by_multiset.into_values() {
        group.sort_by(|a, b| a.iteration.cmp(&b.iteration).then_with(|| a.net.cmp(&b.net)));
        for i in 0..group.len() {
            for j in i + 1..group.len() {
                let (a, b) = (&group[i], &group[j]);
                pairs.push(SwapPair { first: a.clone(), second: b.clone(), delta: b.accuracy - a.accuracy });
            }
        }
    }
    pairs.sort_by(|x, y| x.first.iteration.cmp(&y.first.iteration).then(x.second.iteration.cmp(&y.second.iteration)));
    pairs
}

fn concat_effect(parsed: &[(Entry, Vec<BlockCode>)]) -> Vec<Group> {
    let classes: [(&str, fn(BlockId) -> bool); 3] = [
        ("inception", |b| b.family() == Family::InceptionLike && b.concat_mode() == ConcatMode::None),
        ("inception+concat", |b| b.family() == Family::InceptionLike && b.concat_mode() != ConcatMode::None),
        ("residual+concat", |b| b.family() == Family::Residual && b.concat_mode() != ConcatMode::None),
    ];
    classes
        .iter()
        .map(|(name, pick)| {
            let members: Vec<BlockId> = BlockId::all().filter(|b| pick(*b)).collect();
            let names: Vec<String> = members.iter().map(|b| format_code(BlockCode::Block(*b), 10)).collect();
            let summary = Summary::of(
                parsed
                    .iter()
                    .filter(|(_, codes)| codes.iter().any(|c| c.as_block().is_some_and(|b| members.contains(&b))))
                    .map(|(e, _)| e.accuracy),
            );
            Group { label: format!("{name} {}", names.join(",")), members, summary }
        })
        .collect()
}
