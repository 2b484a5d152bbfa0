//! Reverse-mode tape.
//!
//! Every forward op appends one node holding its output value and enough
//! saved context to run the vector-Jacobian product later. Node inputs always
//! refer to earlier nodes, so the recording order is a topological order and
//! the backward sweep is a single reverse pass.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Result, TensorError};
use crate::ops::{self, Op};
use crate::tensor::Tensor;

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) value: Tensor,
    pub(crate) requires_grad: bool,
    pub(crate) is_param: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum TapeState {
    Recording,
    Consumed,
}

/// Context handed to a [`CustomOp`] backward.
pub struct CustomCtx<'a> {
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    pub upstream: &'a Tensor,
}

/// An op whose forward value is computed by user code and whose backward is
/// a user-supplied surrogate instead of the true derivative.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;

    /// One entry per input; `None` means no gradient flows to that input.
    fn backward(&self, ctx: &CustomCtx<'_>) -> Result<Vec<Option<Tensor>>>;
}

type ForwardFn = Box<dyn Fn(&[&Tensor]) -> Result<Tensor>>;
type BackwardFn = Box<dyn Fn(&CustomCtx<'_>) -> Result<Vec<Option<Tensor>>>>;

struct FnOp {
    name: &'static str,
    forward: ForwardFn,
    backward: BackwardFn,
}

impl CustomOp for FnOp {
    fn name(&self) -> &'static str {
        self.name
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        (self.forward)(inputs)
    }

    fn backward(&self, ctx: &CustomCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        (self.backward)(ctx)
    }
}

pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    state: TapeState,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("id", &self.id)
            .field("nodes", &self.nodes.len())
            .field("state", &self.state)
            .finish()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            state: TapeState::Recording,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf; its gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Non-trainable leaf (data, labels, frozen weights).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, is_param: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: is_param,
            is_param,
        });
        Var {
            tape: self.id,
            index,
        }
    }

    pub fn try_value(&self, v: Var) -> Result<&Tensor> {
        self.node(v).map(|n| &n.value)
    }

    /// Panics if `v` does not belong to this tape or the tape was consumed.
    pub fn value(&self, v: Var) -> &Tensor {
        match self.try_value(v) {
            Ok(t) => t,
            Err(e) => panic!("{e}"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub(crate) fn node(&self, v: Var) -> Result<&Node> {
        if self.state == TapeState::Consumed {
            return Err(TensorError::Tape(
                "tape already consumed by backward; record a new forward first".into(),
            ));
        }
        if v.tape != self.id {
            return Err(TensorError::Tape(format!(
                "variable from tape {} used on tape {}",
                v.tape, self.id
            )));
        }
        self.nodes
            .get(v.index)
            .ok_or_else(|| TensorError::Tape(format!("unknown node {}", v.index)))
    }

    /// Appends a non-leaf node after checking its value is finite.
    pub(crate) fn push(
        &mut self,
        op: Op,
        value: Tensor,
        op_name: &'static str,
        inputs: &[Var],
    ) -> Result<Var> {
        if self.state == TapeState::Consumed {
            return Err(TensorError::Tape("cannot record on a consumed tape".into()));
        }
        value.check_finite(op_name)?;
        let requires_grad = inputs.iter().any(|&v| self.nodes[v.index].requires_grad);
        let index = self.nodes.len();
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            is_param: false,
        });
        Ok(Var {
            tape: self.id,
            index,
        })
    }

    /// Records a [`CustomOp`]: the forward value is exactly `op.forward`, the
    /// backward sweep calls `op.backward` instead of differentiating.
    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = inputs
            .iter()
            .map(|&v| self.try_value(v))
            .collect::<Result<_>>()?;
        let out = op.forward(&values)?;
        let name = op.name();
        self.push(
            Op::Custom {
                op,
                inputs: inputs.to_vec(),
            },
            out,
            name,
            inputs,
        )
    }

    /// Closure form of [`Tape::custom`].
    pub fn custom_grad<F, B>(
        &mut self,
        name: &'static str,
        inputs: &[Var],
        forward: F,
        backward: B,
    ) -> Result<Var>
    where
        F: Fn(&[&Tensor]) -> Result<Tensor> + 'static,
        B: Fn(&CustomCtx<'_>) -> Result<Vec<Option<Tensor>>> + 'static,
    {
        self.custom(
            Box::new(FnOp {
                name,
                forward: Box::new(forward),
                backward: Box::new(backward),
            }),
            inputs,
        )
    }

    /// Runs the reverse sweep from a scalar `loss` and releases the recorded
    /// nodes. Calling it again without recording a new forward is an error.
    pub fn backward(&mut self, loss: Var) -> Result<Grads> {
        if self.state == TapeState::Consumed {
            return Err(TensorError::Tape(
                "backward called twice without a new forward".into(),
            ));
        }
        if self.nodes.is_empty() {
            return Err(TensorError::Tape("backward called before any forward".into()));
        }
        let loss_node = self.node(loss)?;
        if loss_node.value.len() != 1 {
            return Err(TensorError::Tape(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }

        let nodes = std::mem::take(&mut self.nodes);
        self.state = TapeState::Consumed;

        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.index + 1);
        grads.resize_with(loss.index + 1, || None);
        grads[loss.index] = Some(Tensor::full(nodes[loss.index].value.shape().to_vec(), 1.0));

        for i in (0..=loss.index).rev() {
            let Some(upstream) = grads[i].take() else {
                continue;
            };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(upstream);
                continue;
            }
            let mut sink = GradSink {
                nodes: &nodes,
                grads: &mut grads,
            };
            ops::backward(&node.op, &node.value, &upstream, &mut sink)?;
        }

        let mut params = BTreeMap::new();
        for (i, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                if nodes[i].is_param {
                    params.insert(i, g);
                }
            }
        }
        Ok(Grads {
            tape: self.id,
            params,
        })
    }
}

/// Accumulator used by op backward implementations.
pub(crate) struct GradSink<'a> {
    pub(crate) nodes: &'a [Node],
    grads: &'a mut Vec<Option<Tensor>>,
}

impl<'a> GradSink<'a> {
    pub(crate) fn value(&self, v: Var) -> &'a Tensor {
        &self.nodes[v.index].value
    }

    pub(crate) fn wants(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    pub(crate) fn add(&mut self, v: Var, g: Tensor) -> Result<()> {
        if !self.wants(v) {
            return Ok(());
        }
        match &mut self.grads[v.index] {
            Some(acc) => acc.axpy(1.0, &g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }
}

/// Gradients of the trainable leaves reached by a backward sweep.
#[derive(Debug, Clone)]
pub struct Grads {
    tape: u64,
    params: BTreeMap<usize, Tensor>,
}

impl Grads {
    /// `None` when the parameter did not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.params.get(&v.index)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.params.remove(&v.index)
    }
}
