//! Static level accounting and operand synchronization.

use serde::{Deserialize, Serialize};

use crate::circuit::{Builder, Circuit, NodeId, Op, Stage};
use crate::error::{HeError, Result};

/// Binary operation whose operands sit at different levels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub node: NodeId,
    pub op: String,
    pub left: i64,
    pub right: i64,
}

fn recompute_depths(c: &Circuit) -> Vec<(usize, u8)> {
    let mut d: Vec<(usize, u8)> = Vec::with_capacity(c.nodes.len());
    for n in &c.nodes {
        let at = |id: NodeId| d[id];
        let v = match n.op {
            Op::Input { .. } => (0, 1),
            Op::Add { a, b } => (at(a).0.max(at(b).0), at(a).1.max(at(b).1)),
            Op::AddPlain { a, .. } | Op::Rot { a, .. } => at(a),
            Op::PMult { a, .. } => (at(a).0, at(a).1 + 1),
            Op::CMult { a, b } => (at(a).0.max(at(b).0), at(a).1 + at(b).1),
            Op::Rescale { a } => (at(a).0 + 1, at(a).1.saturating_sub(1)),
        };
        d.push(v);
    }
    d
}

/// Every addition or ciphertext product whose operands disagree in level.
pub fn check_sync(c: &Circuit) -> Vec<Violation> {
    let d = recompute_depths(c);
    let lvl = |id: NodeId| c.input_level as i64 - d[id].0 as i64;
    c.nodes
        .iter()
        .enumerate()
        .filter_map(|(i, n)| match n.op {
            Op::Add { a, b } | Op::CMult { a, b } if d[a].0 != d[b].0 => Some(Violation {
                node: i,
                op: n.op.name().to_string(),
                left: lvl(a),
                right: lvl(b),
            }),
            _ => None,
        })
        .collect()
}

/// Scale discipline plus level availability for every node.
pub fn validate(c: &Circuit) -> Result<()> {
    let d = recompute_depths(c);
    let level = |id: NodeId| c.input_level as i64 - d[id].0 as i64;
    for (i, n) in c.nodes.iter().enumerate() {
        let scale_err = |msg: String| Err(HeError::Scale { node: i, msg });
        match n.op {
            Op::Add { a, b } if d[a].1 != d[b].1 => {
                return scale_err(format!("adding scales {} and {}", d[a].1, d[b].1))
            }
            Op::PMult { a, .. } | Op::CMult { a, .. } if d[a].1 != 1 => {
                return scale_err(format!("multiplying an operand at scale {}", d[a].1))
            }
            Op::CMult { b, .. } if d[b].1 != 1 => {
                return scale_err(format!("multiplying an operand at scale {}", d[b].1))
            }
            Op::Rescale { a } if d[a].1 != 2 => return scale_err(format!("rescaling scale {}", d[a].1)),
            _ => {}
        }
        if let Op::Rescale { a } = n.op {
            if level(a) < 1 {
                return Err(HeError::Level {
                    node: i,
                    msg: format!("rescale needs level >= 1, operand has {}", level(a)),
                });
            }
        }
    }
    Ok(())
}

/// Levels the circuit consumes; fails on any unsynchronized operation.
pub fn level_account(c: &Circuit) -> Result<usize> {
    if let Some(v) = check_sync(c).into_iter().next() {
        return Err(HeError::Sync {
            node: v.node,
            left: v.left,
            right: v.right,
        });
    }
    validate(c)?;
    Ok(c.output_depth())
}

/// Levels of a compiled model with structural masks: two per layer for the
/// linear maps, one per surviving activation layer, one for pooling, one
/// for the classifier, and any repack levels.
pub fn closed_form_levels(layers: usize, effective: usize, repack: usize) -> usize {
    2 * layers + effective + 2 + repack
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompileProfile {
    /// Bits of the base modulus.
    pub base_bits: u32,
    /// Levels spent on repacking.
    pub repack: usize,
}

impl CompileProfile {
    /// Deep stacks repack once after the middle layer and use a smaller base prime.
    pub fn for_layers(layers: usize) -> Self {
        if layers >= 6 {
            CompileProfile {
                base_bits: 41,
                repack: 1,
            }
        } else {
            CompileProfile {
                base_bits: 47,
                repack: 0,
            }
        }
    }

    pub fn repack_after(&self, layers: usize) -> Option<usize> {
        (self.repack > 0).then(|| (layers / 2).saturating_sub(1))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignReport {
    /// Levels burned on the shallower operands.
    pub inserted: usize,
    pub aligned_ops: usize,
}

/// Lowers shallower operands of every unsynchronized binary operation by
/// multiplying with ones until the levels match.
pub fn auto_align(c: &Circuit) -> (Circuit, AlignReport) {
    let mut b = Builder::new(c.block, c.slots);
    let ones = vec![1.0; c.block];
    let mut map = vec![usize::MAX; c.nodes.len()];
    let mut report = AlignReport::default();
    for (i, n) in c.nodes.iter().enumerate() {
        let op = match n.op {
            Op::Add { a, b: d } | Op::CMult { a, b: d } => {
                let (mut x, mut y) = (map[a], map[d]);
                let (dx, dy) = (b.c.nodes[x].depth, b.c.nodes[y].depth);
                if dx != dy {
                    report.aligned_ops += 1;
                    report.inserted += dx.abs_diff(dy);
                    if dx < dy {
                        x = lower_by(&mut b, x, dy - dx, &ones);
                    } else {
                        y = lower_by(&mut b, y, dx - dy, &ones);
                    }
                }
                match n.op {
                    Op::Add { .. } => Op::Add { a: x, b: y },
                    _ => Op::CMult { a: x, b: y },
                }
            }
            Op::Input { index } => Op::Input { index },
            Op::AddPlain { a, pt } => Op::AddPlain {
                a: map[a],
                pt: b.plaintext(c.plaintexts[pt].clone()),
            },
            Op::PMult { a, pt } => Op::PMult {
                a: map[a],
                pt: b.plaintext(c.plaintexts[pt].clone()),
            },
            Op::Rot { a, k } => Op::Rot { a: map[a], k },
            Op::Rescale { a } => Op::Rescale { a: map[a] },
        };
        map[i] = b.push(op, n.stage);
    }
    let mut out = b.c;
    out.inputs = c.inputs.iter().map(|(s, id)| (s.clone(), map[*id])).collect();
    out.outputs = c.outputs.iter().map(|(s, id)| (s.clone(), map[*id])).collect();
    out.input_level = out.output_depth();
    (out, report)
}

/// Pushes `x` down `levels` levels while keeping its scale.
fn lower_by(b: &mut Builder, mut x: NodeId, levels: usize, ones: &[f64]) -> NodeId {
    let start_scale = b.c.nodes[x].scale;
    let mut remaining = levels;
    if start_scale == 2 {
        x = b.rescale(x, Stage::Align);
        remaining -= 1;
    }
    for _ in 0..remaining {
        let p = b.pmult(x, ones.to_vec(), Stage::Align);
        x = b.rescale(p, Stage::Align);
    }
    if start_scale == 2 {
        x = b.pmult(x, ones.to_vec(), Stage::Align);
    }
    x
}
