//! Folds plaintext scaling chains into the linear map that precedes them.
//!
//! Every value that is an affine function of earlier ciphertexts through
//! plaintext products, rotations and additions gets a linear form
//! `sum mask * rot(base, k) + const`. A rescaled plaintext product of such a
//! value is again a linear form with scaled masks, so batch norm and the
//! coefficient products collapse into the kernel and cost no extra level.
//! Ciphertext products are barriers.

use std::collections::BTreeMap;

use crate::circuit::{Builder, Circuit, NodeId, Op, Stage};

#[derive(Clone, Debug)]
struct LinearForm {
    /// `(base, rotation) -> mask`
    terms: BTreeMap<(NodeId, usize), Vec<f64>>,
    constant: Option<Vec<f64>>,
    stage: Stage,
}

impl LinearForm {
    fn scaled(&self, s: &[f64]) -> LinearForm {
        let mul = |m: &Vec<f64>| m.iter().zip(s).map(|(a, b)| a * b).collect::<Vec<f64>>();
        LinearForm {
            terms: self.terms.iter().map(|(k, m)| (*k, mul(m))).collect(),
            constant: self.constant.as_ref().map(mul),
            stage: self.stage,
        }
    }
}

/// Product terms of an addition tree of plaintext products.
fn collect_terms(c: &Circuit, id: NodeId, out: &mut BTreeMap<(NodeId, usize), Vec<f64>>) -> bool {
    match c.nodes[id].op {
        Op::PMult { a, pt } => {
            let key = match c.nodes[a].op {
                Op::Rot { a: base, k } => (base, k),
                _ => (a, 0),
            };
            let mask = &c.plaintexts[pt];
            match out.get_mut(&key) {
                Some(m) => m.iter_mut().zip(mask).for_each(|(x, y)| *x += y),
                None => {
                    out.insert(key, mask.clone());
                }
            }
            true
        }
        Op::Add { a, b } => collect_terms(c, a, out) && collect_terms(c, b, out),
        _ => false,
    }
}

fn linear_forms(c: &Circuit) -> Vec<Option<LinearForm>> {
    let mut lf: Vec<Option<LinearForm>> = vec![None; c.nodes.len()];
    for i in 0..c.nodes.len() {
        lf[i] = match c.nodes[i].op {
            Op::Rescale { a } => {
                let folded = match c.nodes[a].op {
                    Op::PMult { a: x, pt } if c.nodes[a].stage == Stage::Scale => {
                        lf[x].as_ref().map(|f| f.scaled(&c.plaintexts[pt]))
                    }
                    _ => None,
                };
                folded.or_else(|| {
                    let mut terms = BTreeMap::new();
                    collect_terms(c, a, &mut terms).then(|| LinearForm {
                        terms,
                        constant: None,
                        stage: c.nodes[a].stage,
                    })
                })
            }
            Op::AddPlain { a, pt } => lf[a].as_ref().map(|f| {
                let mut f = f.clone();
                let p = &c.plaintexts[pt];
                f.constant = Some(match f.constant {
                    Some(k) => k.iter().zip(p).map(|(x, y)| x + y).collect(),
                    None => p.clone(),
                });
                f
            }),
            _ => None,
        };
    }
    lf
}

/// Rewrites `c` so every linear form is emitted as a single kernel
/// straight from its bases, then drops what no output reads.
pub fn fuse(c: &Circuit) -> Circuit {
    let lf = linear_forms(c);
    let n = c.nodes.len();
    let mut needed = vec![false; n];
    for &(_, id) in c.outputs.iter().chain(&c.inputs) {
        needed[id] = true;
    }
    for i in (0..n).rev() {
        if !needed[i] {
            continue;
        }
        match &lf[i] {
            Some(f) => f.terms.keys().for_each(|&(base, _)| needed[base] = true),
            None => c.nodes[i].op.operands().into_iter().for_each(|a| needed[a] = true),
        }
    }
    let mut b = Builder::new(c.block, c.slots);
    let mut map = vec![usize::MAX; n];
    let mut rots: BTreeMap<(NodeId, usize), NodeId> = BTreeMap::new();
    for i in 0..n {
        if !needed[i] {
            continue;
        }
        let node = c.nodes[i];
        map[i] = match &lf[i] {
            Some(f) => {
                let mut acc: Option<NodeId> = None;
                let mut terms: Vec<(&(NodeId, usize), &Vec<f64>)> =
                    f.terms.iter().filter(|(_, m)| m.iter().any(|&x| x != 0.0)).collect();
                if terms.is_empty() {
                    terms.push(f.terms.iter().next().expect("linear form has a term"));
                }
                for (&(base, k), mask) in terms {
                    let src = map[base];
                    let r = *rots
                        .entry((src, k))
                        .or_insert_with(|| b.rot(src, k as isize, f.stage));
                    let p = b.pmult(r, mask.clone(), f.stage);
                    acc = Some(match acc {
                        Some(a) => b.add(a, p, f.stage),
                        None => p,
                    });
                }
                let y = b.rescale(acc.expect("at least one term"), f.stage);
                match &f.constant {
                    Some(k) => b.add_plain(y, k.clone(), node.stage),
                    None => y,
                }
            }
            None => {
                let op = match node.op {
                    Op::Input { index } => Op::Input { index },
                    Op::Add { a, b: d } => Op::Add { a: map[a], b: map[d] },
                    Op::AddPlain { a, pt } => Op::AddPlain {
                        a: map[a],
                        pt: b.plaintext(c.plaintexts[pt].clone()),
                    },
                    Op::PMult { a, pt } => Op::PMult {
                        a: map[a],
                        pt: b.plaintext(c.plaintexts[pt].clone()),
                    },
                    Op::CMult { a, b: d } => Op::CMult { a: map[a], b: map[d] },
                    Op::Rot { a, k } => match rots.get(&(map[a], k)) {
                        Some(&r) => {
                            map[i] = r;
                            continue;
                        }
                        None => Op::Rot { a: map[a], k },
                    },
                    Op::Rescale { a } => Op::Rescale { a: map[a] },
                };
                let id = b.push(op, node.stage);
                if let Op::Rot { a, k } = op {
                    rots.insert((a, k), id);
                }
                id
            }
        };
    }
    let mut out = b.c;
    out.inputs = c.inputs.iter().map(|(s, id)| (s.clone(), map[*id])).collect();
    out.outputs = c.outputs.iter().map(|(s, id)| (s.clone(), map[*id])).collect();
    out.input_level = out.output_depth();
    out.prune()
}
