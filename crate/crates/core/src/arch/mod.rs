//! Expansion of a trajectory into a concrete layer graph, with shape
//! inference and parameter counting.

mod build;
mod export;

use std::fmt;

use thiserror::Error;

pub use build::{build, build_with, BuildOptions, PoolRounding};
pub use export::{export_graph, format_millions, parse_graph, summarize};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ArchError {
    #[error("spatial underflow in {block} at position {position}: input {shape} is too small")]
    SpatialUnderflow { block: String, position: usize, shape: TensorShape },
    #[error("channel mismatch in {block}: template declares {expected} channels, branches produce {actual}")]
    ChannelMismatch { block: String, expected: u32, actual: u32 },
    #[error("shape mismatch at node {node}: {reason}")]
    ShapeMismatch { node: usize, reason: String },
    #[error("invalid build input: {0}")]
    BadInput(String),
    #[error("graph text line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorShape {
    pub channels: u32,
    pub height: u32,
    pub width: u32,
}

impl TensorShape {
    pub fn new(channels: u32, height: u32, width: u32) -> Result<Self, ArchError> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(ArchError::BadInput(format!("shape {channels}x{height}x{width} has a zero dimension")));
        }
        Ok(TensorShape { channels, height, width })
    }

    pub fn elements(self) -> u64 {
        u64::from(self.channels) * u64::from(self.height) * u64::from(self.width)
    }

    fn with_channels(self, channels: u32) -> Self {
        TensorShape { channels, ..self }
    }
}

impl fmt::Display for TensorShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

impl std::str::FromStr for TensorShape {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let dims: Vec<u32> = s
            .split('x')
            .map(|d| d.parse::<u32>().map_err(|_| format!("bad shape `{s}`")))
            .collect::<Result<_, _>>()?;
        match dims[..] {
            [c, h, w] => TensorShape::new(c, h, w).map_err(|e| e.to_string()),
            _ => Err(format!("bad shape `{s}` (expected CxHxW)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Input,
    Conv,
    BatchNorm,
    ReLU,
    Concat,
    Add,
    AvgPool,
    GlobalAvgPool,
    FullyConnected,
    Softmax,
}

impl LayerKind {
    const ALL: [LayerKind; 10] = [
        LayerKind::Input,
        LayerKind::Conv,
        LayerKind::BatchNorm,
        LayerKind::ReLU,
        LayerKind::Concat,
        LayerKind::Add,
        LayerKind::AvgPool,
        LayerKind::GlobalAvgPool,
        LayerKind::FullyConnected,
        LayerKind::Softmax,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Input => "Input",
            LayerKind::Conv => "Conv",
            LayerKind::BatchNorm => "BatchNorm",
            LayerKind::ReLU => "ReLU",
            LayerKind::Concat => "Concat",
            LayerKind::Add => "Add",
            LayerKind::AvgPool => "AvgPool",
            LayerKind::GlobalAvgPool => "GlobalAvgPool",
            LayerKind::FullyConnected => "FullyConnected",
            LayerKind::Softmax => "Softmax",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Layer hyper-parameters; unset fields do not apply to the layer kind.
/// `filters` doubles as the output width of a fully connected layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Hyper {
    pub kernel: Option<(u32, u32)>,
    pub stride: Option<u32>,
    pub pad: Option<(u32, u32)>,
    pub filters: Option<u32>,
}

impl fmt::Display for Hyper {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if let Some((h, w)) = self.kernel {
            parts.push(format!("k={h}x{w}"));
        }
        if let Some(s) = self.stride {
            parts.push(format!("s={s}"));
        }
        if let Some((h, w)) = self.pad {
            parts.push(format!("p={h}x{w}"));
        }
        if let Some(n) = self.filters {
            parts.push(format!("f={n}"));
        }
        if parts.is_empty() {
            f.write_str("-")
        } else {
            f.write_str(&parts.join(","))
        }
    }
}

impl std::str::FromStr for Hyper {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let mut hyper = Hyper::default();
        if s == "-" {
            return Ok(hyper);
        }
        let pair = |v: &str| -> Result<(u32, u32), String> {
            let (a, b) = v.split_once('x').ok_or_else(|| format!("bad pair `{v}`"))?;
            Ok((a.parse().map_err(|_| format!("bad pair `{v}`"))?, b.parse().map_err(|_| format!("bad pair `{v}`"))?))
        };
        let num = |v: &str| v.parse::<u32>().map_err(|_| format!("bad number `{v}`"));
        for part in s.split(',') {
            let (key, value) = part.split_once('=').ok_or_else(|| format!("bad hyper `{part}`"))?;
            match key {
                "k" => hyper.kernel = Some(pair(value)?),
                "s" => hyper.stride = Some(num(value)?),
                "p" => hyper.pad = Some(pair(value)?),
                "f" => hyper.filters = Some(num(value)?),
                _ => return Err(format!("unknown hyper key `{key}`")),
            }
        }
        Ok(hyper)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerNode {
    pub id: usize,
    pub kind: LayerKind,
    pub hyper: Hyper,
    pub inputs: Vec<usize>,
    pub out_shape: TensorShape,
    /// Position in the code sequence of the block that emitted this node;
    /// `None` for the input node.
    pub block: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchitectureGraph {
    pub nodes: Vec<LayerNode>,
    pub input_shape: TensorShape,
    pub class_count: u32,
    pub param_count: u64,
    /// Net string of the code sequence the graph was built from.
    pub net: String,
}

impl ArchitectureGraph {
    /// Trainable parameters of one node, from its own hyper-parameters and
    /// the shapes of its inputs.
    pub fn node_params(&self, node: &LayerNode) -> u64 {
        let input = |i: usize| self.nodes[node.inputs[i]].out_shape;
        match node.kind {
            LayerKind::Conv => {
                let (kh, kw) = node.hyper.kernel.unwrap_or((1, 1));
                let cin = u64::from(input(0).channels);
                let cout = u64::from(node.out_shape.channels);
                u64::from(kh) * u64::from(kw) * cin * cout + cout
            }
            LayerKind::BatchNorm => 2 * u64::from(node.out_shape.channels),
            LayerKind::FullyConnected => {
                let out = u64::from(node.out_shape.channels);
                input(0).elements() * out + out
            }
            _ => 0,
        }
    }

    /// Parameters of every node emitted for code position `position`.
    pub fn block_params(&self, position: usize) -> u64 {
        self.nodes.iter().filter(|n| n.block == Some(position)).map(|n| self.node_params(n)).sum()
    }

    /// Parameters excluding the GAP/SM classifier nodes.
    pub fn feature_params(&self) -> u64 {
        let terminators = self.terminator_positions();
        self.nodes
            .iter()
            .filter(|n| n.block.is_some_and(|p| !terminators.contains(&p)))
            .map(|n| self.node_params(n))
            .sum()
    }

    fn terminator_positions(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.kind, LayerKind::GlobalAvgPool | LayerKind::FullyConnected | LayerKind::Softmax))
            .filter_map(|n| n.block)
            .collect()
    }

    /// Checks the structural invariants: ids in order, inputs point
    /// backwards, one source, one softmax sink, and per-node shape rules.
    pub fn validate(&self) -> Result<(), ArchError> {
        let bad = |node: usize, reason: String| Err(ArchError::ShapeMismatch { node, reason });
        let mut consumed = vec![false; self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            if n.id != i {
                return bad(i, format!("id {} out of order", n.id));
            }
            if n.inputs.iter().any(|&j| j >= i) {
                return bad(i, "input does not precede node".into());
            }
            for &j in &n.inputs {
                consumed[j] = true;
            }
            let shapes: Vec<TensorShape> = n.inputs.iter().map(|&j| self.nodes[j].out_shape).collect();
            let arity_ok = match n.kind {
                LayerKind::Input => shapes.is_empty(),
                LayerKind::Concat | LayerKind::Add => shapes.len() >= 2,
                _ => shapes.len() == 1,
            };
            if !arity_ok {
                return bad(i, format!("{} with {} inputs", n.kind, shapes.len()));
            }
            match n.kind {
                LayerKind::Input if i != 0 => return bad(i, "input node must come first".into()),
                LayerKind::Concat => {
                    if shapes.iter().any(|s| (s.height, s.width) != (n.out_shape.height, n.out_shape.width)) {
                        return bad(i, "concat inputs disagree on spatial dims".into());
                    }
                    let sum: u32 = shapes.iter().map(|s| s.channels).sum();
                    if sum != n.out_shape.channels {
                        return bad(i, format!("concat of {sum} channels yields {}", n.out_shape.channels));
                    }
                }
                LayerKind::Add => {
                    if shapes.iter().any(|s| *s != n.out_shape) {
                        return bad(i, "add inputs disagree".into());
                    }
                }
                LayerKind::BatchNorm | LayerKind::ReLU if shapes[0] != n.out_shape => {
                    return bad(i, "elementwise layer changed shape".into());
                }
                _ => {}
            }
        }
        if self.nodes.first().map(|n| n.kind) != Some(LayerKind::Input) {
            return bad(0, "graph must start with an input node".into());
        }
        let sinks: Vec<usize> = (0..self.nodes.len()).filter(|&i| !consumed[i]).collect();
        match sinks[..] {
            [s] if self.nodes[s].kind == LayerKind::Softmax => Ok(()),
            _ => bad(self.nodes.len().saturating_sub(1), format!("expected a single softmax sink, found {sinks:?}")),
        }
    }
}

/// Sum of every node's parameter formula.
pub fn count_params(graph: &ArchitectureGraph) -> u64 {
    graph.nodes.iter().map(|n| graph.node_params(n)).sum()
}
