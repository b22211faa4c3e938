//! Parameter oracles shared by the integration and acceptance targets.
#![allow(dead_code)]

use multiblock_core::arch::{ArchitectureGraph, LayerKind};
use multiblock_core::catalog::BlockCode;

/// Independent transcription of the block table, used only by the oracle
/// below.
enum Oracle {
    Dense { units: u64, layers: u64, growth: u64, stem: u64 },
    Residual { widths: [u64; 3], concat: Concat },
    Inception { branches: &'static [&'static [Op]], concat: bool },
}

#[derive(Clone, Copy, PartialEq)]
enum Concat {
    No,
    Final,
    Every,
}

#[derive(Clone, Copy)]
enum Op {
    Conv(u64, u64, u64),
    Pool,
}

use Op::{Conv, Pool};

const B5: &[&[Op]] = &[&[Conv(1, 1, 16)], &[Conv(1, 1, 16), Conv(3, 3, 24)], &[Conv(1, 1, 8), Conv(5, 5, 16)], &[Pool, Conv(1, 1, 8)]];
const B6: &[&[Op]] = &[&[Conv(1, 1, 32)], &[Conv(1, 1, 32), Conv(3, 3, 48)], &[Conv(1, 1, 16), Conv(5, 5, 32)], &[Pool, Conv(1, 1, 16)]];
const B7: &[&[Op]] = &[&[Conv(1, 1, 64)], &[Conv(1, 1, 64), Conv(3, 3, 96)], &[Conv(1, 1, 32), Conv(5, 5, 64)], &[Pool, Conv(1, 1, 32)]];
const B9: &[&[Op]] = &[
    &[Conv(1, 1, 32)],
    &[Conv(1, 1, 32), Conv(3, 3, 32)],
    &[Conv(1, 1, 32), Conv(3, 3, 32), Conv(3, 3, 32)],
    &[Pool, Conv(1, 1, 32)],
];
const B10: &[&[Op]] = &[&[Conv(1, 1, 48)], &[Conv(1, 1, 32), Conv(1, 3, 40), Conv(3, 1, 40)], &[Pool, Conv(1, 1, 40)]];
const B11: &[&[Op]] = &[&[Conv(1, 1, 64)], &[Conv(1, 1, 32), Conv(3, 3, 64)]];

fn table(i: u8) -> Oracle {
    match i {
        0 => Oracle::Dense { units: 2, layers: 12, growth: 12, stem: 16 },
        1 => Oracle::Residual { widths: [16, 32, 64], concat: Concat::No },
        2 => Oracle::Residual { widths: [16, 32, 64], concat: Concat::Final },
        3 => Oracle::Residual { widths: [32, 64, 128], concat: Concat::Final },
        4 => Oracle::Residual { widths: [16, 32, 64], concat: Concat::Every },
        5 => Oracle::Inception { branches: B5, concat: false },
        6 => Oracle::Inception { branches: B6, concat: false },
        7 => Oracle::Inception { branches: B7, concat: false },
        8 => Oracle::Inception { branches: B6, concat: true },
        9 => Oracle::Inception { branches: B9, concat: true },
        10 => Oracle::Inception { branches: B10, concat: true },
        11 => Oracle::Inception { branches: B11, concat: true },
        _ => unreachable!(),
    }
}

fn conv(kh: u64, kw: u64, cin: u64, cout: u64) -> u64 {
    kh * kw * cin * cout + cout
}

fn bn(c: u64) -> u64 {
    2 * c
}

fn pooled(d: u64) -> u64 {
    if d >= 2 {
        (d - 2).div_ceil(2) + 1
    } else {
        1
    }
}

/// Walks the blocks in order, tracking (channels, height, width), and
/// returns (total params, params before the classifier).
pub fn closed_form(codes: &[BlockCode], input: (u64, u64, u64), classes: u64) -> (u64, u64) {
    let (mut c, mut h, mut w) = input;
    let mut total = 0u64;
    let mut features = 0u64;
    for (pos, code) in codes.iter().enumerate() {
        match code {
            BlockCode::Block(id) => {
                let before = total;
                match table(id.index()) {
                    Oracle::Dense { units, layers, growth, stem } => {
                        if pos == 0 {
                            total += conv(3, 3, c, stem);
                            c = stem;
                        }
                        for _ in 0..units {
                            for _ in 0..layers {
                                total += bn(c) + conv(3, 3, c, growth);
                                c += growth;
                            }
                            total += bn(c) + conv(1, 1, c, c);
                            h = pooled(h);
                            w = pooled(w);
                        }
                    }
                    Oracle::Residual { widths, concat } => {
                        let c0 = c;
                        for f in widths {
                            total += conv(3, 3, c, f) + bn(f) + conv(3, 3, f, f) + bn(f);
                            if c != f {
                                total += conv(1, 1, c, f);
                            }
                            c = if concat == Concat::Every { c0 + f } else { f };
                        }
                        if concat == Concat::Final {
                            c += c0;
                        }
                    }
                    Oracle::Inception { branches, concat } => {
                        let c0 = c;
                        let mut width = 0;
                        for branch in branches {
                            let mut bc = c0;
                            for op in *branch {
                                if let Conv(kh, kw, f) = *op {
                                    total += conv(kh, kw, bc, f) + bn(f);
                                    bc = f;
                                }
                            }
                            width += bc;
                        }
                        c = if concat { c0 + width } else { width };
                    }
                }
                features += total - before;
            }
            BlockCode::Gap => {
                h = 1;
                w = 1;
            }
            BlockCode::Sm => total += c * h * w * classes + classes,
        }
    }
    (total, features)
}

/// Recomputes every node's weights from its kind, hyperparameters and the
/// shapes of its inputs, then sums them.
pub fn node_walk(g: &ArchitectureGraph) -> u64 {
    let mut total = 0;
    for node in &g.nodes {
        let input = node.inputs.first().map(|&i| g.nodes[i].out_shape);
        total += match node.kind {
            LayerKind::Conv => {
                let (kh, kw) = node.hyper.kernel.unwrap();
                let cin = input.unwrap().channels as u64;
                let f = node.hyper.filters.unwrap() as u64;
                kh as u64 * kw as u64 * cin * f + f
            }
            LayerKind::BatchNorm => 2 * node.out_shape.channels as u64,
            LayerKind::FullyConnected => {
                let s = input.unwrap();
                let f = node.hyper.filters.unwrap() as u64;
                s.channels as u64 * s.height as u64 * s.width as u64 * f + f
            }
            _ => 0,
        };
    }
    total
}
