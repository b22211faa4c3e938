use super::{count_params, ArchError, ArchitectureGraph, Hyper, LayerKind, LayerNode, TensorShape};
use crate::catalog::{catalog, BlockCode, BlockSpec, BranchOp, Catalog, ConcatMode, Family};
use crate::space::{encode_net, Trajectory};

/// Output-size rounding of strided pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PoolRounding {
    /// `ceil((h - k) / s) + 1`, never below 1.
    #[default]
    Ceil,
    /// `floor((h - k) / s) + 1`; an input smaller than the window is an error.
    Floor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BuildOptions {
    pub pool_rounding: PoolRounding,
}

/// Builds with the built-in catalog and default options.
pub fn build(t: &Trajectory, input_shape: TensorShape, class_count: u32) -> Result<ArchitectureGraph, ArchError> {
    build_with(catalog(), t, input_shape, class_count, BuildOptions::default())
}

pub fn build_with(
    catalog: &Catalog,
    t: &Trajectory,
    input_shape: TensorShape,
    class_count: u32,
    options: BuildOptions,
) -> Result<ArchitectureGraph, ArchError> {
    if class_count == 0 {
        return Err(ArchError::BadInput("class count must be at least 1".into()));
    }
    let mut b = Builder { nodes: Vec::new(), position: None, label: String::new(), options };
    let mut x = b.push(LayerKind::Input, Hyper::default(), vec![], input_shape)?;
    for (position, code) in t.codes().into_iter().enumerate() {
        b.position = Some(position);
        b.label = code.to_string();
        x = match code {
            BlockCode::Block(id) => {
                let spec = catalog.block(id);
                match spec.family {
                    Family::Dense => b.dense(spec, x, position == 0)?,
                    Family::Residual => b.residual(spec, x)?,
                    Family::InceptionLike => b.inception(spec, x)?,
                }
            }
            BlockCode::Gap => {
                let s = b.shape(x);
                b.push(LayerKind::GlobalAvgPool, Hyper::default(), vec![x], TensorShape { height: 1, width: 1, ..s })?
            }
            BlockCode::Sm => {
                let fc = Hyper { filters: Some(class_count), ..Hyper::default() };
                let out = TensorShape { channels: class_count, height: 1, width: 1 };
                let x = b.push(LayerKind::FullyConnected, fc, vec![x], out)?;
                b.push(LayerKind::Softmax, Hyper::default(), vec![x], out)?
            }
        };
    }
    let mut graph = ArchitectureGraph {
        nodes: b.nodes,
        input_shape,
        class_count,
        param_count: 0,
        net: encode_net(t, class_count),
    };
    graph.param_count = count_params(&graph);
    Ok(graph)
}

struct Builder {
    nodes: Vec<LayerNode>,
    position: Option<usize>,
    label: String,
    options: BuildOptions,
}

impl Builder {
    fn shape(&self, id: usize) -> TensorShape {
        self.nodes[id].out_shape
    }

    fn push(&mut self, kind: LayerKind, hyper: Hyper, inputs: Vec<usize>, out_shape: TensorShape) -> Result<usize, ArchError> {
        let id = self.nodes.len();
        let shapes: Vec<TensorShape> = inputs.iter().map(|&i| self.shape(i)).collect();
        let mismatch = |reason: &str| ArchError::ShapeMismatch { node: id, reason: reason.to_string() };
        match kind {
            LayerKind::Concat if shapes.iter().any(|s| (s.height, s.width) != (out_shape.height, out_shape.width)) => {
                return Err(mismatch("concat inputs disagree on spatial dims"));
            }
            LayerKind::Add if shapes.iter().any(|s| *s != out_shape) => {
                return Err(mismatch("add inputs disagree"));
            }
            _ => {}
        }
        self.nodes.push(LayerNode { id, kind, hyper, inputs, out_shape, block: self.position });
        Ok(id)
    }

    fn conv(&mut self, x: usize, kernel: (u32, u32), filters: u32) -> Result<usize, ArchError> {
        let pad = (kernel.0 / 2, kernel.1 / 2);
        let hyper = Hyper { kernel: Some(kernel), stride: Some(1), pad: Some(pad), filters: Some(filters) };
        let out = self.shape(x).with_channels(filters);
        self.push(LayerKind::Conv, hyper, vec![x], out)
    }

    fn bn(&mut self, x: usize) -> Result<usize, ArchError> {
        let s = self.shape(x);
        self.push(LayerKind::BatchNorm, Hyper::default(), vec![x], s)
    }

    fn relu(&mut self, x: usize) -> Result<usize, ArchError> {
        let s = self.shape(x);
        self.push(LayerKind::ReLU, Hyper::default(), vec![x], s)
    }

    fn concat(&mut self, parts: Vec<usize>) -> Result<usize, ArchError> {
        let first = self.shape(parts[0]);
        let channels = parts.iter().map(|&p| self.shape(p).channels).sum();
        self.push(LayerKind::Concat, Hyper::default(), parts, first.with_channels(channels))
    }

    /// Conv, BN, ReLU.
    fn conv_bn_relu(&mut self, x: usize, kernel: (u32, u32), filters: u32) -> Result<usize, ArchError> {
        let c = self.conv(x, kernel, filters)?;
        let n = self.bn(c)?;
        self.relu(n)
    }

    /// BN, ReLU, Conv.
    fn bn_relu_conv(&mut self, x: usize, kernel: (u32, u32), filters: u32) -> Result<usize, ArchError> {
        let n = self.bn(x)?;
        let r = self.relu(n)?;
        self.conv(r, kernel, filters)
    }

    fn downsample(&mut self, x: usize) -> Result<usize, ArchError> {
        let s = self.shape(x);
        let (k, stride) = (2u32, 2u32);
        let dim = |d: u32| -> Option<u32> {
            match self.options.pool_rounding {
                PoolRounding::Floor => (d >= k).then(|| (d - k) / stride + 1),
                PoolRounding::Ceil => Some(if d >= k { (d - k).div_ceil(stride) + 1 } else { 1 }),
            }
        };
        let underflow = || ArchError::SpatialUnderflow {
            block: self.label.clone(),
            position: self.position.unwrap_or(0),
            shape: s,
        };
        let (h, w) = (dim(s.height).ok_or_else(underflow)?, dim(s.width).ok_or_else(underflow)?);
        let hyper = Hyper { kernel: Some((k, k)), stride: Some(stride), pad: Some((0, 0)), filters: None };
        self.push(LayerKind::AvgPool, hyper, vec![x], TensorShape { height: h, width: w, ..s })
    }

    fn dense(&mut self, spec: &BlockSpec, mut x: usize, opens_network: bool) -> Result<usize, ArchError> {
        let missing = |what: &str| ArchError::BadInput(format!("{} lacks {what}", spec.code));
        let k = spec.growth_rate.ok_or_else(|| missing("growth_rate"))?;
        let layers = spec.dense_layers_per_block.ok_or_else(|| missing("dense_layers"))?;
        if opens_network {
            let stem = spec.stem_filters.ok_or_else(|| missing("stem_filters"))?;
            x = self.conv(x, (3, 3), stem)?;
        }
        for _ in 0..spec.unit_count {
            for _ in 0..layers {
                let new = self.bn_relu_conv(x, (3, 3), k)?;
                x = self.concat(vec![x, new])?;
            }
            let c = self.shape(x).channels;
            let t = self.bn_relu_conv(x, (1, 1), c)?;
            x = self.downsample(t)?;
        }
        Ok(x)
    }

    fn residual(&mut self, spec: &BlockSpec, input: usize) -> Result<usize, ArchError> {
        let mut x = input;
        for &filters in &spec.channel_profile {
            let a = self.conv_bn_relu(x, (3, 3), filters)?;
            let c = self.conv(a, (3, 3), filters)?;
            let body = self.bn(c)?;
            let skip = if self.shape(x).channels == filters { x } else { self.conv(x, (1, 1), filters)? };
            let s = self.shape(body);
            let sum = self.push(LayerKind::Add, Hyper::default(), vec![body, skip], s)?;
            let unit_out = self.relu(sum)?;
            x = match spec.concat_mode {
                ConcatMode::EveryUnit => self.concat(vec![input, unit_out])?,
                _ => unit_out,
            };
        }
        match spec.concat_mode {
            ConcatMode::FinalOnly => self.concat(vec![input, x]),
            _ => Ok(x),
        }
    }

    fn inception(&mut self, spec: &BlockSpec, input: usize) -> Result<usize, ArchError> {
        let mut x = input;
        for &width in &spec.channel_profile {
            let mut outs = Vec::with_capacity(spec.branches.len());
            for branch in &spec.branches {
                let mut y = x;
                for op in &branch.0 {
                    y = match *op {
                        BranchOp::Conv { kernel, filters } => self.conv_bn_relu(y, kernel, filters)?,
                        BranchOp::AvgPool { kernel } => {
                            let s = self.shape(y);
                            let hyper = Hyper {
                                kernel: Some((kernel, kernel)),
                                stride: Some(1),
                                pad: Some((kernel / 2, kernel / 2)),
                                filters: None,
                            };
                            self.push(LayerKind::AvgPool, hyper, vec![y], s)?
                        }
                    };
                }
                outs.push(y);
            }
            let actual: u32 = outs.iter().map(|&o| self.shape(o).channels).sum();
            if actual != width {
                return Err(ArchError::ChannelMismatch { block: self.label.clone(), expected: width, actual });
            }
            x = if outs.len() == 1 { outs[0] } else { self.concat(outs)? };
        }
        match spec.concat_mode {
            ConcatMode::None => Ok(x),
            _ => self.concat(vec![input, x]),
        }
    }
}
