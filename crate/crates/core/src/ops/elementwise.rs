use rand::Rng;

use super::{softplus, Op};
use crate::error::{Result, TensorError};
use crate::tape::{GradSink, Tape, Var};
use crate::tensor::Tensor;

pub(crate) struct NodePolyCtx {
    x: Var,
    w2: Var,
    w1: Var,
    b: Var,
    c: f64,
    mask: Vec<bool>,
}

impl Tape {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.try_value(a)?.shape(), self.try_value(b)?.shape());
        if sa != sb {
            return Err(TensorError::shape(op, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push(Op::Add(a, b), v, "add", &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push(Op::Sub(a, b), v, "sub", &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(Op::Mul(a, b), v, "mul", &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.try_value(a)?.map(|x| x * s);
        self.push(Op::Scale(a, s), v, "scale", &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let v = self.try_value(a)?.map(|x| x * x);
        self.push(Op::Square(a), v, "square", &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.try_value(a)?.map(|x| x.max(0.0));
        self.push(Op::Relu(a), v, "relu", &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let v = self.try_value(a)?.map(softplus);
        self.push(Op::Softplus(a), v, "softplus", &[a])
    }

    /// Inverted dropout: kept entries are scaled by `1/(1-rate)` so the
    /// expectation is unchanged; with `train == false` this is the identity.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::config("dropout", format!("rate {rate} outside [0, 1)")));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let xv = self.try_value(x)?;
        let mask: Vec<f64> = (0..xv.len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let v = Tensor::new(
            xv.shape().to_vec(),
            xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect(),
        )?;
        self.push(Op::Dropout { x, mask }, v, "dropout", &[x])
    }

    /// Per-node ReLU switch along the last axis: node `k` gets `relu(x)` when
    /// `mask[k]` holds and passes through unchanged otherwise.
    pub fn masked_relu(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let xv = self.try_value(x)?;
        let v_dim = *xv.shape().last().unwrap_or(&1);
        if mask.len() != v_dim {
            return Err(TensorError::shape("masked_relu", xv.shape(), &[mask.len()]));
        }
        let out = Tensor::new(
            xv.shape().to_vec(),
            xv.data()
                .iter()
                .enumerate()
                .map(|(i, &z)| if mask[i % v_dim] { z.max(0.0) } else { z })
                .collect(),
        )?;
        self.push(
            Op::MaskedRelu {
                x,
                mask: mask.to_vec(),
            },
            out,
            "masked_relu",
            &[x],
        )
    }

    /// Node-wise quadratic `c*w2[k]*x^2 + w1[k]*x + b[k]` along the last axis
    /// for nodes with `mask[k]`; other nodes pass through unchanged.
    pub fn node_poly(
        &mut self,
        x: Var,
        w2: Var,
        w1: Var,
        b: Var,
        c: f64,
        mask: &[bool],
    ) -> Result<Var> {
        let xv = self.try_value(x)?;
        let v_dim = *xv.shape().last().unwrap_or(&1);
        for (name, p) in [("w2", w2), ("w1", w1), ("b", b)] {
            let shape = self.try_value(p)?.shape();
            if shape != [v_dim] {
                return Err(TensorError::config(
                    "node_poly",
                    format!("coefficient {name} has shape {shape:?} for input {:?}", xv.shape()),
                ));
            }
        }
        if mask.len() != v_dim {
            return Err(TensorError::shape("node_poly", xv.shape(), &[mask.len()]));
        }
        let (w2v, w1v, bv) = (
            self.value(w2).data(),
            self.value(w1).data(),
            self.value(b).data(),
        );
        let out: Vec<f64> = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &z)| {
                let k = i % v_dim;
                if mask[k] {
                    c * w2v[k] * z * z + w1v[k] * z + bv[k]
                } else {
                    z
                }
            })
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(
            Op::NodePoly(Box::new(NodePolyCtx {
                x,
                w2,
                w1,
                b,
                c,
                mask: mask.to_vec(),
            })),
            out,
            "node_poly",
            &[x, w2, w1, b],
        )
    }
}

pub(super) fn mul_backward(a: Var, b: Var, up: &Tensor, sink: &mut GradSink<'_>) -> Result<()> {
    let ga = sink.value(b).zip_map(up, |y, g| y * g)?;
    let gb = sink.value(a).zip_map(up, |x, g| x * g)?;
    sink.add(a, ga)?;
    sink.add(b, gb)
}

pub(super) fn masked_relu_backward(
    x: Var,
    mask: &[bool],
    up: &Tensor,
    sink: &mut GradSink<'_>,
) -> Result<()> {
    let v_dim = mask.len();
    let xv = sink.value(x);
    let g: Vec<f64> = xv
        .data()
        .iter()
        .zip(up.data())
        .enumerate()
        .map(|(i, (&z, &g))| {
            if !mask[i % v_dim] || z > 0.0 {
                g
            } else {
                0.0
            }
        })
        .collect();
    let g = Tensor::new(xv.shape().to_vec(), g)?;
    sink.add(x, g)
}

pub(super) fn node_poly_backward(
    ctx: &NodePolyCtx,
    up: &Tensor,
    sink: &mut GradSink<'_>,
) -> Result<()> {
    let v_dim = ctx.mask.len();
    let xv = sink.value(ctx.x);
    let w2 = sink.value(ctx.w2).data();
    let w1 = sink.value(ctx.w1).data();
    let mut gx = vec![0.0; xv.len()];
    let mut gw2 = vec![0.0; v_dim];
    let mut gw1 = vec![0.0; v_dim];
    let mut gb = vec![0.0; v_dim];
    for (i, (&z, &g)) in xv.data().iter().zip(up.data()).enumerate() {
        let k = i % v_dim;
        if ctx.mask[k] {
            gx[i] = g * (2.0 * ctx.c * w2[k] * z + w1[k]);
            gw2[k] += g * ctx.c * z * z;
            gw1[k] += g * z;
            gb[k] += g;
        } else {
            gx[i] = g;
        }
    }
    let gx = Tensor::new(xv.shape().to_vec(), gx)?;
    sink.add(ctx.x, gx)?;
    sink.add(ctx.w2, Tensor::new([v_dim], gw2)?)?;
    sink.add(ctx.w1, Tensor::new([v_dim], gw1)?)?;
    sink.add(ctx.b, Tensor::new([v_dim], gb)?)
}
