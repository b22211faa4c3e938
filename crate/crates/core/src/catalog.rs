//! Block modules and terminators that make up the search vocabulary.
//!
//! Twelve block modules are available: one dense block `B(0)`, four residual
//! blocks `B(1)..B(4)` and seven inception-like blocks `B(5)..B(11)`. Two
//! terminators close a network: global average pooling (`GAP`) and the
//! softmax classifier (`SM`).
//!
//! The internal composition of every block is read from a TOML template
//! ([`BUILTIN_TEMPLATE`] by default) so that filter counts and branch
//! topologies can be corrected without touching code. The structural facts
//! that define the search space (families, concatenation modes, unit counts)
//! are validated on load.

use std::fmt;
use std::path::Path;
use std::sync::OnceLock;

use serde::Deserialize;
use thiserror::Error;

/// Number of block modules in the catalog.
pub const BLOCK_COUNT: u8 = 12;

/// Template shipped with the crate.
pub const BUILTIN_TEMPLATE: &str = include_str!("../data/catalog.toml");

const TEMPLATE_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CatalogError {
    #[error("malformed block code token `{0}`")]
    Malformed(String),
    #[error("block code out of range in `{0}` (valid: B(0)..B(11))")]
    OutOfRange(String),
    #[error("catalog template: {0}")]
    Template(String),
    #[error("reading catalog template {path}: {reason}")]
    Io { path: String, reason: String },
}

/// Index of one of the twelve block modules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BlockId(u8);

impl BlockId {
    pub fn new(index: u8) -> Result<Self, CatalogError> {
        if index < BLOCK_COUNT {
            Ok(BlockId(index))
        } else {
            Err(CatalogError::OutOfRange(format!("B({index})")))
        }
    }

    pub const fn index(self) -> u8 {
        self.0
    }

    pub fn all() -> impl Iterator<Item = BlockId> + Clone {
        (0..BLOCK_COUNT).map(BlockId)
    }

    pub const DENSE: BlockId = BlockId(0);

    pub fn family(self) -> Family {
        match self.0 {
            0 => Family::Dense,
            1..=4 => Family::Residual,
            _ => Family::InceptionLike,
        }
    }

    /// Concatenation mode fixed by the block's definition.
    pub fn concat_mode(self) -> ConcatMode {
        match self.0 {
            0 | 1 | 5..=7 => ConcatMode::None,
            4 => ConcatMode::EveryUnit,
            _ => ConcatMode::FinalOnly,
        }
    }
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "B({})", self.0)
    }
}

/// A block module or one of the two terminators.
///
/// The derived ordering (blocks by index, then `Gap`, then `Sm`) is the
/// tie-break order used by greedy action selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BlockCode {
    Block(BlockId),
    Gap,
    Sm,
}

impl BlockCode {
    pub fn block(index: u8) -> Result<Self, CatalogError> {
        BlockId::new(index).map(BlockCode::Block)
    }

    pub fn is_terminator(self) -> bool {
        !matches!(self, BlockCode::Block(_))
    }

    pub fn as_block(self) -> Option<BlockId> {
        match self {
            BlockCode::Block(id) => Some(id),
            _ => None,
        }
    }

    /// All 14 codes in tie-break order.
    pub fn all() -> impl Iterator<Item = BlockCode> + Clone {
        BlockId::all()
            .map(BlockCode::Block)
            .chain([BlockCode::Gap, BlockCode::Sm])
    }
}

impl fmt::Display for BlockCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockCode::Block(id) => id.fmt(f),
            BlockCode::Gap => f.write_str("GAP"),
            BlockCode::Sm => f.write_str("SM"),
        }
    }
}

/// Renders a code in net-string notation: `B(n)`, `GAP(c)` or `SM(c)`.
pub fn format_code(code: BlockCode, classes: u32) -> String {
    match code {
        BlockCode::Block(id) => id.to_string(),
        BlockCode::Gap => format!("GAP({classes})"),
        BlockCode::Sm => format!("SM({classes})"),
    }
}

/// Parses `B(n)`, `GAP(c)` or `SM(c)`; the class count is dropped.
pub fn parse_code(text: &str) -> Result<BlockCode, CatalogError> {
    parse_item(text).map(|(code, _)| code)
}

/// Parses one net-string item, returning the class count for terminators.
pub fn parse_item(text: &str) -> Result<(BlockCode, Option<u32>), CatalogError> {
    let malformed = || CatalogError::Malformed(text.to_string());
    let open = text.find('(').ok_or_else(malformed)?;
    let (tag, rest) = text.split_at(open);
    let arg = rest
        .strip_prefix('(')
        .and_then(|r| r.strip_suffix(')'))
        .ok_or_else(malformed)?;
    let value = parse_decimal(arg).ok_or_else(malformed)?;
    match tag {
        "B" => {
            let index = u8::try_from(value)
                .ok()
                .filter(|&v| v < BLOCK_COUNT)
                .ok_or_else(|| CatalogError::OutOfRange(text.to_string()))?;
            Ok((BlockCode::Block(BlockId(index)), None))
        }
        "GAP" | "SM" => {
            let classes = u32::try_from(value)
                .ok()
                .filter(|&c| c > 0)
                .ok_or_else(malformed)?;
            let code = if tag == "GAP" { BlockCode::Gap } else { BlockCode::Sm };
            Ok((code, Some(classes)))
        }
        _ => Err(malformed()),
    }
}

// Canonical decimal: digits only, no sign, no leading zeros.
fn parse_decimal(s: &str) -> Option<u64> {
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) || (s.len() > 1 && s.starts_with('0')) {
        return None;
    }
    s.parse().ok()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    Dense,
    Residual,
    InceptionLike,
}

/// Where the block input is concatenated with unit outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ConcatMode {
    None,
    FinalOnly,
    EveryUnit,
}

/// Order of the operations inside a composite convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvCompositeOrder {
    ConvBnRelu,
    BnReluConv,
}

/// Output spatial size divided by input spatial size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpatialFactor {
    pub num: u32,
    pub den: u32,
}

impl SpatialFactor {
    pub const IDENTITY: SpatialFactor = SpatialFactor { num: 1, den: 1 };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchOp {
    /// Composite convolution, stride 1, same padding.
    Conv { kernel: (u32, u32), filters: u32 },
    /// Average pooling, stride 1, same padding.
    AvgPool { kernel: u32 },
}

impl BranchOp {
    fn parse(token: &str) -> Result<Self, CatalogError> {
        let bad = || CatalogError::Template(format!("bad branch op `{token}`"));
        let kernel = |s: &str| -> Option<(u32, u32)> {
            let (h, w) = s.split_once('x')?;
            let (h, w) = (h.parse().ok()?, w.parse().ok()?);
            (h > 0 && w > 0 && h % 2 == 1 && w % 2 == 1).then_some((h, w))
        };
        if let Some(rest) = token.strip_prefix("conv") {
            let (k, f) = rest.split_once(':').ok_or_else(bad)?;
            let kernel = kernel(k).ok_or_else(bad)?;
            let filters = f.parse().ok().filter(|&f| f > 0).ok_or_else(bad)?;
            Ok(BranchOp::Conv { kernel, filters })
        } else if let Some(rest) = token.strip_prefix("avgpool") {
            match kernel(rest) {
                Some((h, w)) if h == w => Ok(BranchOp::AvgPool { kernel: h }),
                _ => Err(bad()),
            }
        } else {
            Err(bad())
        }
    }
}

impl fmt::Display for BranchOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BranchOp::Conv { kernel, filters } => write!(f, "conv{}x{}:{}", kernel.0, kernel.1, filters),
            BranchOp::AvgPool { kernel } => write!(f, "avgpool{kernel}x{kernel}"),
        }
    }
}

/// One parallel path of an inception-like unit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Branch(pub Vec<BranchOp>);

impl Branch {
    /// Filters produced by the branch's last convolution, if any.
    pub fn output_filters(&self) -> Option<u32> {
        self.0.iter().rev().find_map(|op| match op {
            BranchOp::Conv { filters, .. } => Some(*filters),
            BranchOp::AvgPool { .. } => None,
        })
    }
}

/// Structural description of one block module.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSpec {
    pub code: BlockId,
    pub family: Family,
    pub unit_count: u32,
    pub concat_mode: ConcatMode,
    /// Residual: filters of each unit. Inception-like: merged width of each unit.
    pub channel_profile: Vec<u32>,
    pub spatial_factor: SpatialFactor,
    /// Dense family only.
    pub growth_rate: Option<u32>,
    /// Dense family only: composite layers in each dense sub-block.
    pub dense_layers_per_block: Option<u32>,
    /// Dense family only: stem filters used when the block opens the network.
    pub stem_filters: Option<u32>,
    /// Inception-like family only.
    pub branches: Vec<Branch>,
}

impl BlockSpec {
    pub fn conv_order(&self) -> ConvCompositeOrder {
        match self.family {
            Family::Dense => ConvCompositeOrder::BnReluConv,
            _ => ConvCompositeOrder::ConvBnRelu,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TerminatorSpec {
    pub code: BlockCode,
    pub name: &'static str,
    /// Terminator that must follow this one, if any.
    pub forces: Option<BlockCode>,
}

#[derive(Debug, Clone, Copy)]
pub enum CatalogEntry<'a> {
    Block(&'a BlockSpec),
    Terminator(&'a TerminatorSpec),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Catalog {
    blocks: Vec<BlockSpec>,
    terminators: [TerminatorSpec; 2],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TemplateFile {
    version: u32,
    block: Vec<TemplateRecord>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TemplateRecord {
    code: u8,
    family: String,
    concat: String,
    units: u32,
    #[serde(default)]
    channels: Vec<u32>,
    dense_layers: Option<u32>,
    growth_rate: Option<u32>,
    stem_filters: Option<u32>,
    #[serde(default)]
    branches: Vec<Vec<String>>,
}

impl Catalog {
    pub fn from_toml_str(text: &str) -> Result<Self, CatalogError> {
        let file: TemplateFile =
            toml::from_str(text).map_err(|e| CatalogError::Template(e.message().to_string()))?;
        if file.version != TEMPLATE_VERSION {
            return Err(CatalogError::Template(format!(
                "unsupported version {} (expected {TEMPLATE_VERSION})",
                file.version
            )));
        }
        let mut slots: Vec<Option<BlockSpec>> = vec![None; BLOCK_COUNT as usize];
        for rec in file.block {
            let spec = rec.into_spec()?;
            let slot = &mut slots[spec.code.index() as usize];
            if slot.is_some() {
                return Err(CatalogError::Template(format!("duplicate record for {}", spec.code)));
            }
            *slot = Some(spec);
        }
        let blocks = slots
            .into_iter()
            .enumerate()
            .map(|(i, s)| s.ok_or_else(|| CatalogError::Template(format!("missing record for B({i})"))))
            .collect::<Result<Vec<_>, _>>()?;

        let inception_plain: Vec<&Vec<u32>> = blocks[5..=7].iter().map(|b| &b.channel_profile).collect();
        if inception_plain[0] == inception_plain[1]
            || inception_plain[0] == inception_plain[2]
            || inception_plain[1] == inception_plain[2]
        {
            return Err(CatalogError::Template(
                "B(5), B(6), B(7) must have distinct channel profiles".into(),
            ));
        }

        Ok(Catalog {
            blocks,
            terminators: [
                TerminatorSpec {
                    code: BlockCode::Gap,
                    name: "Global Avg. Pooling",
                    forces: Some(BlockCode::Sm),
                },
                TerminatorSpec {
                    code: BlockCode::Sm,
                    name: "Softmax",
                    forces: None,
                },
            ],
        })
    }

    pub fn load(path: &Path) -> Result<Self, CatalogError> {
        let text = std::fs::read_to_string(path).map_err(|e| CatalogError::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::from_toml_str(&text)
    }

    pub fn block(&self, id: BlockId) -> &BlockSpec {
        &self.blocks[id.index() as usize]
    }

    pub fn blocks(&self) -> &[BlockSpec] {
        &self.blocks
    }

    pub fn terminators(&self) -> &[TerminatorSpec; 2] {
        &self.terminators
    }

    /// All twelve blocks followed by the two terminators.
    pub fn entries(&self) -> Vec<CatalogEntry<'_>> {
        self.blocks
            .iter()
            .map(CatalogEntry::Block)
            .chain(self.terminators.iter().map(CatalogEntry::Terminator))
            .collect()
    }
}

/// The built-in catalog.
pub fn catalog() -> &'static Catalog {
    static CATALOG: OnceLock<Catalog> = OnceLock::new();
    CATALOG.get_or_init(|| Catalog::from_toml_str(BUILTIN_TEMPLATE).expect("built-in catalog is valid"))
}

impl TemplateRecord {
    fn into_spec(self) -> Result<BlockSpec, CatalogError> {
        let id = BlockId::new(self.code)
            .map_err(|_| CatalogError::Template(format!("block code {} out of range", self.code)))?;
        let err = |msg: String| CatalogError::Template(format!("{id}: {msg}"));

        let family = match self.family.as_str() {
            "dense" => Family::Dense,
            "residual" => Family::Residual,
            "inception" => Family::InceptionLike,
            other => return Err(err(format!("unknown family `{other}`"))),
        };
        if family != id.family() {
            return Err(err(format!("family must be {:?}", id.family())));
        }
        let concat_mode = match self.concat.as_str() {
            "none" => ConcatMode::None,
            "final" => ConcatMode::FinalOnly,
            "every" => ConcatMode::EveryUnit,
            other => return Err(err(format!("unknown concat mode `{other}`"))),
        };
        if concat_mode != id.concat_mode() {
            return Err(err(format!("concat mode must be {:?}", id.concat_mode())));
        }
        if self.units == 0 {
            return Err(err("units must be positive".into()));
        }

        let branches = self
            .branches
            .iter()
            .map(|ops| {
                let ops = ops.iter().map(|t| BranchOp::parse(t)).collect::<Result<Vec<_>, _>>()?;
                let branch = Branch(ops);
                if branch.output_filters().is_none() {
                    return Err(err("every branch must end in a convolution".into()));
                }
                Ok(branch)
            })
            .collect::<Result<Vec<_>, _>>()?;

        let mut spec = BlockSpec {
            code: id,
            family,
            unit_count: self.units,
            concat_mode,
            channel_profile: self.channels,
            spatial_factor: SpatialFactor::IDENTITY,
            growth_rate: None,
            dense_layers_per_block: None,
            stem_filters: None,
            branches,
        };

        match family {
            Family::Dense => {
                let (Some(k), Some(layers), Some(stem)) = (self.growth_rate, self.dense_layers, self.stem_filters)
                else {
                    return Err(err("dense block needs growth_rate, dense_layers, stem_filters".into()));
                };
                if k == 0 || layers == 0 || stem == 0 {
                    return Err(err("dense parameters must be positive".into()));
                }
                if !spec.channel_profile.is_empty() || !spec.branches.is_empty() {
                    return Err(err("dense block takes no channels or branches".into()));
                }
                // Each sub-block is followed by a transition that halves H and W.
                let den = 2u32
                    .checked_pow(self.units)
                    .ok_or_else(|| err("too many dense sub-blocks".into()))?;
                spec.spatial_factor = SpatialFactor { num: 1, den };
                spec.growth_rate = Some(k);
                spec.dense_layers_per_block = Some(layers);
                spec.stem_filters = Some(stem);
            }
            Family::Residual | Family::InceptionLike => {
                if self.growth_rate.is_some() || self.dense_layers.is_some() || self.stem_filters.is_some() {
                    return Err(err("dense-only fields on a non-dense block".into()));
                }
                if spec.channel_profile.len() != self.units as usize || spec.channel_profile.contains(&0) {
                    return Err(err("channels must list one positive width per unit".into()));
                }
                if family == Family::Residual {
                    if self.units != 3 {
                        return Err(err("residual blocks have three units".into()));
                    }
                    if !spec.branches.is_empty() {
                        return Err(err("residual blocks take no branches".into()));
                    }
                } else if spec.branches.is_empty() {
                    return Err(err("inception-like block needs branches".into()));
                }
            }
        }
        Ok(spec)
    }
}
