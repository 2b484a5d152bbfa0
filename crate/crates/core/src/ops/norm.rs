use super::Op;
use crate::error::{Result, TensorError};
use crate::tape::{GradSink, Tape, Var};
use crate::tensor::Tensor;

/// How batch normalization obtains its per-channel statistics.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a> {
    /// Normalize with the statistics of the current batch.
    Train { eps: f64 },
    /// Normalize with frozen running statistics.
    Eval {
        mean: &'a [f64],
        var: &'a [f64],
        eps: f64,
    },
}

/// Per-channel batch statistics observed in train mode. `var` is the biased
/// estimate; `count` is the number of values per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

pub(crate) struct BatchNormCtx {
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    channels: usize,
    inner: usize,
    train: bool,
}

fn inv_std(op: &'static str, var: f64, eps: f64) -> Result<f64> {
    let d = var + eps;
    if d <= 0.0 || !d.is_finite() {
        return Err(TensorError::Numeric {
            op,
            msg: format!("variance {var} with eps {eps} is not positive"),
        });
    }
    Ok(1.0 / d.sqrt())
}

/// Eval-mode batch norm as a per-channel affine map `scale * x + shift`.
pub fn bn_affine(
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let c = gamma.len();
    if beta.len() != c || mean.len() != c || var.len() != c {
        return Err(TensorError::shape("bn_affine", &[c], &[beta.len(), mean.len(), var.len()]));
    }
    let mut scale = Vec::with_capacity(c);
    let mut shift = Vec::with_capacity(c);
    for i in 0..c {
        let a = gamma[i] * inv_std("bn_affine", var[i], eps)?;
        scale.push(a);
        shift.push(beta[i] - a * mean[i]);
    }
    Ok((scale, shift))
}

impl Tape {
    /// Batch normalization over axis 1 of a `[B, C, ...]` tensor.
    /// Returns the observed batch statistics in train mode.
    #[allow(clippy::needless_range_loop)]
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let xv = self.try_value(x)?;
        if xv.ndim() < 2 {
            return Err(TensorError::config(
                "batchnorm",
                format!("expected [B, C, ...], got {:?}", xv.shape()),
            ));
        }
        let (b, c) = (xv.shape()[0], xv.shape()[1]);
        let inner: usize = xv.shape()[2..].iter().product();
        for p in [gamma, beta] {
            let s = self.try_value(p)?.shape();
            if s != [c] {
                return Err(TensorError::shape("batchnorm", xv.shape(), s));
            }
        }
        let count = b * inner;
        let (mean, var, eps, train) = match mode {
            BnMode::Train { eps } => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for bi in 0..b {
                    for ci in 0..c {
                        let s = &xv.data()[(bi * c + ci) * inner..(bi * c + ci + 1) * inner];
                        mean[ci] += s.iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count as f64);
                for bi in 0..b {
                    for ci in 0..c {
                        let s = &xv.data()[(bi * c + ci) * inner..(bi * c + ci + 1) * inner];
                        var[ci] += s.iter().map(|v| (v - mean[ci]).powi(2)).sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count as f64);
                (mean, var, eps, true)
            }
            BnMode::Eval { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(TensorError::shape("batchnorm", &[c], &[mean.len(), var.len()]));
                }
                (mean.to_vec(), var.to_vec(), eps, false)
            }
        };
        let inv: Vec<f64> = var
            .iter()
            .map(|&v| inv_std("batchnorm", v, eps))
            .collect::<Result<_>>()?;
        let (g, be) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for (i, &val) in xv.data().iter().enumerate() {
            let ci = (i / inner) % c;
            let h = (val - mean[ci]) * inv[ci];
            xhat[i] = h;
            out[i] = g[ci] * h + be[ci];
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let stats = train.then(|| BatchStats {
            mean: mean.clone(),
            var: var.clone(),
            count,
        });
        let ctx = BatchNormCtx {
            x,
            gamma,
            beta,
            xhat,
            inv_std: inv,
            channels: c,
            inner,
            train,
        };
        let v = self.push(Op::BatchNorm(Box::new(ctx)), out, "batchnorm", &[x, gamma, beta])?;
        Ok((v, stats))
    }

    /// Divides each sample (leading axis) by the L2 norm of its flattened
    /// values. A zero-norm sample is a numeric error.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let xv = self.try_value(x)?;
        if xv.ndim() == 0 || xv.shape()[0] == 0 {
            return Err(TensorError::config("l2_normalize", "needs a leading sample axis"));
        }
        let per = xv.len() / xv.shape()[0];
        let mut norms = Vec::with_capacity(xv.shape()[0]);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(per.max(1)) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(TensorError::Numeric {
                    op: "l2_normalize",
                    msg: "sample with zero norm".into(),
                });
            }
            norms.push(n);
            out.extend(row.iter().map(|v| v / n));
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(Op::L2Normalize { x, norms }, out, "l2_normalize", &[x])
    }
}

pub(super) fn batchnorm_backward(
    ctx: &BatchNormCtx,
    up: &Tensor,
    sink: &mut GradSink<'_>,
) -> Result<()> {
    let (c, inner) = (ctx.channels, ctx.inner);
    let g = sink.value(ctx.gamma).data().to_vec();
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for (i, &u) in up.data().iter().enumerate() {
        let ci = (i / inner) % c;
        dgamma[ci] += u * ctx.xhat[i];
        dbeta[ci] += u;
    }
    if sink.wants(ctx.x) {
        let n = (up.len() / c) as f64;
        let dx: Vec<f64> = up
            .data()
            .iter()
            .enumerate()
            .map(|(i, &u)| {
                let ci = (i / inner) % c;
                if ctx.train {
                    // dxhat sums: sum(u*g) = g*dbeta, sum(u*g*xhat) = g*dgamma
                    g[ci] * ctx.inv_std[ci] / n
                        * (n * u - dbeta[ci] - ctx.xhat[i] * dgamma[ci])
                } else {
                    u * g[ci] * ctx.inv_std[ci]
                }
            })
            .collect();
        let dx = Tensor::new(up.shape().to_vec(), dx)?;
        sink.add(ctx.x, dx)?;
    }
    sink.add(ctx.gamma, Tensor::new([c], dgamma)?)?;
    sink.add(ctx.beta, Tensor::new([c], dbeta)?)
}

pub(super) fn l2_normalize_backward(
    x: Var,
    norms: &[f64],
    out: &Tensor,
    up: &Tensor,
    sink: &mut GradSink<'_>,
) -> Result<()> {
    let per = out.len() / norms.len();
    let mut g = Vec::with_capacity(out.len());
    for ((o, u), &n) in out.data().chunks(per).zip(up.data().chunks(per)).zip(norms) {
        let dot: f64 = o.iter().zip(u).map(|(a, b)| a * b).sum();
        g.extend(o.iter().zip(u).map(|(&oi, &ui)| (ui - oi * dot) / n));
    }
    let g = Tensor::new(out.shape().to_vec(), g)?;
    sink.add(x, g)
}
