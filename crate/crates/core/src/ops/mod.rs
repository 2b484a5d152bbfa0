//! Differentiable ops. Each submodule adds forward methods to [`Tape`] and
//! the matching vector-Jacobian products used by the reverse sweep.

mod conv;
mod elementwise;
mod linalg;
mod loss;
mod norm;

pub use norm::{bn_affine, BatchStats, BnMode};

use crate::error::{Result, TensorError};
use crate::tape::{CustomCtx, CustomOp, GradSink, Var};
use crate::tensor::Tensor;

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Square(Var),
    Relu(Var),
    Softplus(Var),
    Sum(Var),
    Mean {
        x: Var,
        axes: Vec<usize>,
    },
    Reshape(Var),
    MatMul(Var, Var),
    ChannelMix {
        x: Var,
        w: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    GlobalAvgPool(Var),
    TemporalConv {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
    },
    BatchNorm(Box<norm::BatchNormCtx>),
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    LogSoftmax(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor,
    },
    KlDiv {
        student: Var,
        teacher: Var,
        p_student: Tensor,
        p_teacher: Tensor,
        per_row: Vec<f64>,
    },
    Mse(Var, Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    MaskedRelu {
        x: Var,
        mask: Vec<bool>,
    },
    NodePoly(Box<elementwise::NodePolyCtx>),
    Custom {
        op: Box<dyn CustomOp>,
        inputs: Vec<Var>,
    },
}

pub(crate) fn backward(
    op: &Op,
    out: &Tensor,
    up: &Tensor,
    sink: &mut GradSink<'_>,
) -> Result<()> {
    match op {
        Op::Leaf => Ok(()),
        Op::Add(a, b) => {
            sink.add(*a, up.clone())?;
            sink.add(*b, up.clone())
        }
        Op::Sub(a, b) => {
            sink.add(*a, up.clone())?;
            sink.add(*b, up.map(|g| -g))
        }
        Op::Mul(a, b) => elementwise::mul_backward(*a, *b, up, sink),
        Op::Scale(a, s) => sink.add(*a, up.map(|g| g * s)),
        Op::Square(a) => {
            let g = sink.value(*a).zip_map(up, |x, g| 2.0 * x * g)?;
            sink.add(*a, g)
        }
        Op::Relu(a) => {
            let g = sink
                .value(*a)
                .zip_map(up, |x, g| if x > 0.0 { g } else { 0.0 })?;
            sink.add(*a, g)
        }
        Op::Softplus(a) => {
            let g = sink.value(*a).zip_map(up, |x, g| g * sigmoid(x))?;
            sink.add(*a, g)
        }
        Op::Sum(a) => {
            let shape = sink.value(*a).shape().to_vec();
            sink.add(*a, Tensor::full(shape, up.item()))
        }
        Op::Mean { x, axes } => linalg::mean_backward(*x, axes, up, sink),
        Op::Reshape(a) => {
            let shape = sink.value(*a).shape().to_vec();
            sink.add(*a, up.reshape(shape)?)
        }
        Op::MatMul(a, b) => linalg::matmul_backward(*a, *b, up, sink),
        Op::ChannelMix { x, w } => linalg::channel_mix_backward(*x, *w, up, sink),
        Op::Linear { x, w, b } => linalg::linear_backward(*x, *w, *b, up, sink),
        Op::GlobalAvgPool(x) => linalg::global_avg_pool_backward(*x, up, sink),
        Op::TemporalConv { x, kernel, bias } => {
            conv::temporal_conv_backward(*x, *kernel, *bias, up, sink)
        }
        Op::BatchNorm(ctx) => norm::batchnorm_backward(ctx, up, sink),
        Op::L2Normalize { x, norms } => norm::l2_normalize_backward(*x, norms, out, up, sink),
        Op::LogSoftmax(x) => loss::log_softmax_backward(*x, out, up, sink),
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => loss::cross_entropy_backward(*logits, labels, probs, up, sink),
        Op::KlDiv {
            student,
            teacher,
            p_student,
            p_teacher,
            per_row,
        } => loss::kl_backward(*student, *teacher, p_student, p_teacher, per_row, up, sink),
        Op::Mse(a, b) => loss::mse_backward(*a, *b, up, sink),
        Op::Dropout { x, mask } => {
            let g = Tensor::new(
                up.shape().to_vec(),
                up.data().iter().zip(mask).map(|(g, m)| g * m).collect(),
            )?;
            sink.add(*x, g)
        }
        Op::MaskedRelu { x, mask } => elementwise::masked_relu_backward(*x, mask, up, sink),
        Op::NodePoly(ctx) => elementwise::node_poly_backward(ctx, up, sink),
        Op::Custom { op, inputs } => {
            let ctx = CustomCtx {
                inputs: inputs.iter().map(|&v| sink.value(v)).collect(),
                output: out,
                upstream: up,
            };
            let grads = op.backward(&ctx)?;
            if grads.len() != inputs.len() {
                return Err(TensorError::Tape(format!(
                    "custom op {} returned {} gradients for {} inputs",
                    op.name(),
                    grads.len(),
                    inputs.len()
                )));
            }
            for (&v, g) in inputs.iter().zip(grads) {
                if let Some(g) = g {
                    if g.shape() != sink.value(v).shape() {
                        return Err(TensorError::shape(
                            "custom backward",
                            g.shape(),
                            sink.value(v).shape(),
                        ));
                    }
                    sink.add(v, g)?;
                }
            }
            Ok(())
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow for large `x`.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}
