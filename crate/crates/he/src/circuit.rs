//! Leveled circuit IR.
//!
//! Nodes are stored in topological order. Plaintexts are one slot block
//! long and repeat across every sample block of a ciphertext.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub type NodeId = usize;
pub type PtId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Input,
    /// Rotation/plaintext-multiply linear maps (graph and temporal convolution).
    Kernel,
    /// Plaintext rescaling chains that fusion folds into the preceding kernel.
    Scale,
    /// Ciphertext products of the polynomial activations.
    Nonlinear,
    /// Pooling, repacking and the classifier.
    Readout,
    /// Level-matching multiplications inserted by auto-alignment.
    Align,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case")]
pub enum Op {
    Input { index: usize },
    Add { a: NodeId, b: NodeId },
    AddPlain { a: NodeId, pt: PtId },
    PMult { a: NodeId, pt: PtId },
    CMult { a: NodeId, b: NodeId },
    Rot { a: NodeId, k: usize },
    Rescale { a: NodeId },
}

impl Op {
    pub fn operands(&self) -> Vec<NodeId> {
        match *self {
            Op::Input { .. } => vec![],
            Op::Add { a, b } | Op::CMult { a, b } => vec![a, b],
            Op::AddPlain { a, .. } | Op::PMult { a, .. } | Op::Rot { a, .. } | Op::Rescale { a } => vec![a],
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Add { .. } => "add",
            Op::AddPlain { .. } => "add-plain",
            Op::PMult { .. } => "pmult",
            Op::CMult { .. } => "cmult",
            Op::Rot { .. } => "rot",
            Op::Rescale { .. } => "rescale",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub op: Op,
    pub stage: Stage,
    /// Rescales along the path from the inputs.
    pub depth: usize,
    /// Scale exponent as a multiple of the scale bits (1 or 2).
    pub scale: u8,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounts {
    pub rot: usize,
    pub pmult: usize,
    pub add: usize,
    pub cmult: usize,
    pub rescale: usize,
}

impl OpCounts {
    pub fn scaled(&self, k: usize) -> OpCounts {
        OpCounts {
            rot: self.rot * k,
            pmult: self.pmult * k,
            add: self.add * k,
            cmult: self.cmult * k,
            rescale: self.rescale * k,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Circuit {
    pub nodes: Vec<Node>,
    #[serde(skip)]
    pub plaintexts: Vec<Vec<f64>>,
    pub block: usize,
    pub slots: usize,
    pub inputs: Vec<(String, NodeId)>,
    pub outputs: Vec<(String, NodeId)>,
    /// Level of every input ciphertext.
    pub input_level: usize,
}

impl Circuit {
    pub fn empty(block: usize, slots: usize) -> Self {
        Circuit {
            nodes: Vec::new(),
            plaintexts: Vec::new(),
            block,
            slots,
            inputs: Vec::new(),
            outputs: Vec::new(),
            input_level: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Static level of a node's result; negative when the circuit is
    /// deeper than its input level.
    pub fn level(&self, id: NodeId) -> i64 {
        self.input_level as i64 - self.nodes[id].depth as i64
    }

    /// Deepest output, i.e. the level the inputs must start at.
    pub fn output_depth(&self) -> usize {
        self.outputs.iter().map(|&(_, id)| self.nodes[id].depth).max().unwrap_or(0)
    }

    pub fn counts(&self) -> OpCounts {
        let mut c = OpCounts::default();
        for n in &self.nodes {
            match n.op {
                Op::Rot { .. } => c.rot += 1,
                Op::PMult { .. } => c.pmult += 1,
                Op::Add { .. } | Op::AddPlain { .. } => c.add += 1,
                Op::CMult { .. } => c.cmult += 1,
                Op::Rescale { .. } => c.rescale += 1,
                Op::Input { .. } => {}
            }
        }
        c
    }

    pub fn counts_by_stage(&self) -> BTreeMap<Stage, OpCounts> {
        let mut m: BTreeMap<Stage, OpCounts> = BTreeMap::new();
        for n in &self.nodes {
            let c = m.entry(n.stage).or_default();
            match n.op {
                Op::Rot { .. } => c.rot += 1,
                Op::PMult { .. } => c.pmult += 1,
                Op::Add { .. } | Op::AddPlain { .. } => c.add += 1,
                Op::CMult { .. } => c.cmult += 1,
                Op::Rescale { .. } => c.rescale += 1,
                Op::Input { .. } => {}
            }
        }
        m
    }

    /// Index of the last node reading each node (outputs live to the end).
    pub fn last_uses(&self) -> Vec<usize> {
        let mut last: Vec<usize> = (0..self.nodes.len()).collect();
        for (i, n) in self.nodes.iter().enumerate() {
            for a in n.op.operands() {
                last[a] = i;
            }
        }
        for &(_, id) in &self.outputs {
            last[id] = usize::MAX;
        }
        last
    }

    /// Reference evaluation in `f64` with no quantization or level rules.
    /// Returns outputs in circuit order.
    pub fn eval_plain(&self, inputs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let s = self.slots;
        let tile = |pt: PtId, i: usize| self.plaintexts[pt][i % self.block];
        let mut vals: Vec<Vec<f64>> = Vec::with_capacity(self.nodes.len());
        for n in &self.nodes {
            let v = match n.op {
                Op::Input { index } => {
                    let mut x = inputs[index].clone();
                    x.resize(s, 0.0);
                    x
                }
                Op::Add { a, b } => vals[a].iter().zip(&vals[b]).map(|(x, y)| x + y).collect(),
                Op::AddPlain { a, pt } => vals[a].iter().enumerate().map(|(i, x)| x + tile(pt, i)).collect(),
                Op::PMult { a, pt } => vals[a].iter().enumerate().map(|(i, x)| x * tile(pt, i)).collect(),
                Op::CMult { a, b } => vals[a].iter().zip(&vals[b]).map(|(x, y)| x * y).collect(),
                Op::Rot { a, k } => {
                    let mut x = vals[a].clone();
                    x.rotate_left(k);
                    x
                }
                Op::Rescale { a } => vals[a].clone(),
            };
            vals.push(v);
        }
        self.outputs.iter().map(|&(_, id)| vals[id].clone()).collect()
    }

    /// Drops nodes that no output depends on, plus unreferenced plaintexts.
    pub fn prune(&self) -> Circuit {
        let mut live = vec![false; self.nodes.len()];
        for &(_, id) in &self.outputs {
            live[id] = true;
        }
        for &(_, id) in &self.inputs {
            live[id] = true;
        }
        for i in (0..self.nodes.len()).rev() {
            if live[i] {
                for a in self.nodes[i].op.operands() {
                    live[a] = true;
                }
            }
        }
        let mut b = Builder::new(self.block, self.slots);
        let mut map = vec![usize::MAX; self.nodes.len()];
        let mut pts: BTreeMap<PtId, PtId> = BTreeMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if !live[i] {
                continue;
            }
            let mut pt = |p: PtId, b: &mut Builder| *pts.entry(p).or_insert_with(|| b.plaintext(self.plaintexts[p].clone()));
            let op = match n.op {
                Op::Input { index } => Op::Input { index },
                Op::Add { a, b: c } => Op::Add { a: map[a], b: map[c] },
                Op::AddPlain { a, pt: p } => Op::AddPlain { a: map[a], pt: pt(p, &mut b) },
                Op::PMult { a, pt: p } => Op::PMult { a: map[a], pt: pt(p, &mut b) },
                Op::CMult { a, b: c } => Op::CMult { a: map[a], b: map[c] },
                Op::Rot { a, k } => Op::Rot { a: map[a], k },
                Op::Rescale { a } => Op::Rescale { a: map[a] },
            };
            map[i] = b.push(op, n.stage);
        }
        let mut c = b.c;
        c.inputs = self.inputs.iter().map(|(s, id)| (s.clone(), map[*id])).collect();
        c.outputs = self.outputs.iter().map(|(s, id)| (s.clone(), map[*id])).collect();
        c.input_level = self.input_level;
        c
    }
}

/// Appends nodes while tracking depth and scale. Operand mismatches are
/// recorded as-is (depth = max) and surface in `check_sync`.
pub struct Builder {
    pub c: Circuit,
}

impl Builder {
    pub fn new(block: usize, slots: usize) -> Self {
        Builder {
            c: Circuit::empty(block, slots),
        }
    }

    pub fn plaintext(&mut self, values: Vec<f64>) -> PtId {
        debug_assert_eq!(values.len(), self.c.block);
        self.c.plaintexts.push(values);
        self.c.plaintexts.len() - 1
    }

    pub fn push(&mut self, op: Op, stage: Stage) -> NodeId {
        let node = |id: NodeId| self.c.nodes[id];
        let (depth, scale) = match op {
            Op::Input { .. } => (0, 1),
            Op::Add { a, b } => (node(a).depth.max(node(b).depth), node(a).scale.max(node(b).scale)),
            Op::AddPlain { a, .. } | Op::Rot { a, .. } => (node(a).depth, node(a).scale),
            Op::PMult { a, .. } => (node(a).depth, node(a).scale + 1),
            Op::CMult { a, b } => (node(a).depth.max(node(b).depth), node(a).scale + node(b).scale),
            Op::Rescale { a } => (node(a).depth + 1, node(a).scale.saturating_sub(1)),
        };
        self.c.nodes.push(Node { op, stage, depth, scale });
        self.c.nodes.len() - 1
    }

    pub fn input(&mut self, name: impl Into<String>) -> NodeId {
        let index = self.c.inputs.len();
        let id = self.push(Op::Input { index }, Stage::Input);
        self.c.inputs.push((name.into(), id));
        id
    }

    pub fn add(&mut self, a: NodeId, b: NodeId, stage: Stage) -> NodeId {
        self.push(Op::Add { a, b }, stage)
    }

    pub fn add_plain(&mut self, a: NodeId, values: Vec<f64>, stage: Stage) -> NodeId {
        let pt = self.plaintext(values);
        self.push(Op::AddPlain { a, pt }, stage)
    }

    pub fn pmult(&mut self, a: NodeId, values: Vec<f64>, stage: Stage) -> NodeId {
        let pt = self.plaintext(values);
        self.push(Op::PMult { a, pt }, stage)
    }

    pub fn cmult(&mut self, a: NodeId, b: NodeId, stage: Stage) -> NodeId {
        self.push(Op::CMult { a, b }, stage)
    }

    /// Left rotation; amounts are taken modulo the slot count and a zero
    /// rotation returns the operand itself.
    pub fn rot(&mut self, a: NodeId, k: isize, stage: Stage) -> NodeId {
        let k = k.rem_euclid(self.c.slots as isize) as usize;
        if k == 0 {
            return a;
        }
        self.push(Op::Rot { a, k }, stage)
    }

    pub fn rescale(&mut self, a: NodeId, stage: Stage) -> NodeId {
        self.push(Op::Rescale { a }, stage)
    }

    /// Balanced addition tree.
    pub fn sum(&mut self, mut terms: Vec<NodeId>, stage: Stage) -> NodeId {
        assert!(!terms.is_empty(), "sum of no terms");
        while terms.len() > 1 {
            let mut next = Vec::with_capacity(terms.len().div_ceil(2));
            for pair in terms.chunks(2) {
                next.push(match *pair {
                    [a, b] => self.add(a, b, stage),
                    [a] => a,
                    _ => unreachable!(),
                });
            }
            terms = next;
        }
        terms[0]
    }

    pub fn output(&mut self, name: impl Into<String>, id: NodeId) {
        self.c.outputs.push((name.into(), id));
    }

    /// Sets the input level to the deepest output so the circuit ends at level 0.
    pub fn finish(mut self) -> Circuit {
        self.c.input_level = self.c.output_depth();
        self.c
    }
}
