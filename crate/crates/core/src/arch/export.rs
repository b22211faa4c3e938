//! Text forms of a graph: the line-per-node export read by the trainer, and a
//! human-readable per-block summary.
//!
//! Export layout:
//!
//! ```text
//! multiblock-graph 1
//! net [B(0),SM(10)]
//! input 3x32x32
//! classes 10
//! params 1234
//! nodes 57
//! id	kind	hyper	inputs	out_shape	block
//! 0	Input	-	-	3x32x32	-
//! 1	Conv	k=3x3,s=1,p=1x1,f=16	0	16x32x32	0
//! ```
//!
//! Node lines are tab-separated. `inputs` is a comma-separated id list and
//! `block` the code position that emitted the node.

use std::fmt::Write as _;

use super::{count_params, ArchError, ArchitectureGraph, Hyper, LayerKind, LayerNode, TensorShape};
use crate::catalog::format_code;
use crate::space::parse_net_codes;

const MAGIC: &str = "multiblock-graph 1";
const COLUMNS: &str = "id\tkind\thyper\tinputs\tout_shape\tblock";

pub fn export_graph(g: &ArchitectureGraph) -> String {
    let mut out = String::new();
    writeln!(out, "{MAGIC}").unwrap();
    writeln!(out, "net {}", g.net).unwrap();
    writeln!(out, "input {}", g.input_shape).unwrap();
    writeln!(out, "classes {}", g.class_count).unwrap();
    writeln!(out, "params {}", g.param_count).unwrap();
    writeln!(out, "nodes {}", g.nodes.len()).unwrap();
    writeln!(out, "{COLUMNS}").unwrap();
    for n in &g.nodes {
        let inputs = if n.inputs.is_empty() {
            "-".to_string()
        } else {
            n.inputs.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
        };
        let block = n.block.map_or_else(|| "-".to_string(), |b| b.to_string());
        writeln!(out, "{}\t{}\t{}\t{}\t{}\t{}", n.id, n.kind, n.hyper, inputs, n.out_shape, block).unwrap();
    }
    out
}

/// Reads an exported graph back and checks it: structure, shapes, and that
/// the recorded parameter total matches the recount.
pub fn parse_graph(text: &str) -> Result<ArchitectureGraph, ArchError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut next = |want: &str| -> Result<(usize, String), ArchError> {
        let (no, line) = lines.next().ok_or(ArchError::Parse { line: 0, reason: format!("missing {want}") })?;
        Ok((no, line.to_string()))
    };
    let header = |(no, line): (usize, String), key: &str| -> Result<(usize, String), ArchError> {
        line.strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .map(|v| (no, v.to_string()))
            .ok_or(ArchError::Parse { line: no, reason: format!("expected `{key} ...`") })
    };
    let err = |line: usize, reason: String| ArchError::Parse { line, reason };

    let (no, magic) = next("header")?;
    if magic != MAGIC {
        return Err(err(no, format!("expected `{MAGIC}`")));
    }
    let (_, net) = header(next("net")?, "net")?;
    let (no, input) = header(next("input")?, "input")?;
    let input_shape: TensorShape = input.parse().map_err(|e| err(no, e))?;
    let (no, classes) = header(next("classes")?, "classes")?;
    let class_count: u32 = classes.parse().map_err(|_| err(no, "bad class count".into()))?;
    let (no, params) = header(next("params")?, "params")?;
    let param_count: u64 = params.parse().map_err(|_| err(no, "bad params".into()))?;
    let (no, count) = header(next("nodes")?, "nodes")?;
    let count: usize = count.parse().map_err(|_| err(no, "bad node count".into()))?;
    let (no, columns) = next("column header")?;
    if columns != COLUMNS {
        return Err(err(no, "unexpected column header".into()));
    }

    let mut nodes = Vec::with_capacity(count);
    for _ in 0..count {
        let (no, line) = next("node line")?;
        let fields: Vec<&str> = line.split('\t').collect();
        let [id, kind, hyper, inputs, shape, block] = fields[..] else {
            return Err(err(no, format!("expected 6 fields, found {}", fields.len())));
        };
        let opt_list = |s: &str| -> Result<Vec<usize>, ArchError> {
            if s == "-" {
                return Ok(Vec::new());
            }
            s.split(',').map(|v| v.parse().map_err(|_| err(no, format!("bad id `{v}`")))).collect()
        };
        nodes.push(LayerNode {
            id: id.parse().map_err(|_| err(no, format!("bad id `{id}`")))?,
            kind: LayerKind::from_name(kind).ok_or_else(|| err(no, format!("unknown kind `{kind}`")))?,
            hyper: hyper.parse::<Hyper>().map_err(|e| err(no, e))?,
            inputs: opt_list(inputs)?,
            out_shape: shape.parse().map_err(|e| err(no, e))?,
            block: if block == "-" {
                None
            } else {
                Some(block.parse().map_err(|_| err(no, format!("bad block `{block}`")))?)
            },
        });
    }
    if let Some((no, extra)) = lines.find(|(_, l)| !l.trim().is_empty()) {
        return Err(err(no, format!("trailing content `{extra}`")));
    }

    let graph = ArchitectureGraph { nodes, input_shape, class_count, param_count, net };
    graph.validate()?;
    let recount = count_params(&graph);
    if recount != param_count {
        return Err(err(5, format!("header says {param_count} params, nodes sum to {recount}")));
    }
    Ok(graph)
}

/// Parameter count in millions with two decimals, e.g. `4.32M`.
pub fn format_millions(params: u64) -> String {
    format!("{:.2}M", params as f64 / 1e6)
}

/// Per-block shape table followed by the parameter total.
pub fn summarize(g: &ArchitectureGraph) -> String {
    let codes = parse_net_codes(&g.net).map(|(c, _)| c).unwrap_or_default();
    let mut out = String::new();
    writeln!(out, "net     {}", g.net).unwrap();
    writeln!(out, "input   {}", g.input_shape).unwrap();
    writeln!(out, "{:>3}  {:<8}  {:<12}  {:>12}", "pos", "block", "output", "params").unwrap();
    for (pos, code) in codes.iter().enumerate() {
        let Some(last) = g.nodes.iter().rev().find(|n| n.block == Some(pos)) else { continue };
        let label = format_code(*code, g.class_count);
        writeln!(out, "{pos:>3}  {label:<8}  {:<12}  {:>12}", last.out_shape.to_string(), g.block_params(pos)).unwrap();
    }
    writeln!(out, "total   {} ({})", g.param_count, format_millions(g.param_count)).unwrap();
    out
}
