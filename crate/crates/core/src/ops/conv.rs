use super::Op;
use crate::error::{Result, TensorError};
use crate::tape::{GradSink, Tape, Var};
use crate::tensor::Tensor;

/// Range of output frames `t` for which `t + d` lies inside `[0, frames)`.
fn valid_range(frames: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (frames as isize - d.max(0)).max(0) as usize;
    (lo, hi)
}

impl Tape {
    /// Convolution along T for every node independently, zero "same" padding.
    /// `kernel` is `[C_out, C_in, K]` with `K` odd; `bias` is `[C_out]`.
    pub fn temporal_conv(&mut self, x: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let (xv, kv) = (self.try_value(x)?, self.try_value(kernel)?);
        let (b, c, t, v) = match *xv.shape() {
            [b, c, t, v] => (b, c, t, v),
            _ => {
                return Err(TensorError::config(
                    "temporal_conv",
                    format!("expected [B,C,T,V] input, got {:?}", xv.shape()),
                ))
            }
        };
        let (o, k) = match *kv.shape() {
            [o, c2, k] if c2 == c => (o, k),
            _ => return Err(TensorError::shape("temporal_conv", xv.shape(), kv.shape())),
        };
        if k % 2 == 0 {
            return Err(TensorError::config(
                "temporal_conv",
                format!("kernel size {k} must be odd for same padding"),
            ));
        }
        let bias_v = match bias {
            Some(bb) => {
                let bv = self.try_value(bb)?;
                if bv.shape() != [o] {
                    return Err(TensorError::shape("temporal_conv bias", bv.shape(), &[o]));
                }
                Some(bv.data())
            }
            None => None,
        };
        let half = (k / 2) as isize;
        let tv = t * v;
        let mut out = vec![0.0; b * o * tv];
        for bi in 0..b {
            for oi in 0..o {
                let dst = &mut out[(bi * o + oi) * tv..(bi * o + oi + 1) * tv];
                if let Some(bv) = bias_v {
                    dst.fill(bv[oi]);
                }
                for ci in 0..c {
                    let src = &xv.data()[(bi * c + ci) * tv..(bi * c + ci + 1) * tv];
                    for ki in 0..k {
                        let w = kv.data()[(oi * c + ci) * k + ki];
                        if w == 0.0 {
                            continue;
                        }
                        let d = ki as isize - half;
                        let (lo, hi) = valid_range(t, d);
                        if hi <= lo {
                            continue;
                        }
                        let s0 = (lo as isize + d) as usize * v;
                        for (o_, &s) in dst[lo * v..hi * v].iter_mut().zip(&src[s0..]) {
                            *o_ += w * s;
                        }
                    }
                }
            }
        }
        let out = Tensor::new([b, o, t, v], out)?;
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        self.push(
            Op::TemporalConv { x, kernel, bias },
            out,
            "temporal_conv",
            &inputs,
        )
    }
}

pub(super) fn temporal_conv_backward(
    x: Var,
    kernel: Var,
    bias: Option<Var>,
    up: &Tensor,
    sink: &mut GradSink<'_>,
) -> Result<()> {
    let (xv, kv) = (sink.value(x), sink.value(kernel));
    let (b, c, t, v) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
    let (o, k) = (kv.shape()[0], kv.shape()[2]);
    let half = (k / 2) as isize;
    let tv = t * v;
    let want_x = sink.wants(x);
    let want_k = sink.wants(kernel);
    let mut gx = vec![0.0; if want_x { xv.len() } else { 0 }];
    let mut gk = vec![0.0; if want_k { kv.len() } else { 0 }];
    for bi in 0..b {
        for oi in 0..o {
            let g = &up.data()[(bi * o + oi) * tv..(bi * o + oi + 1) * tv];
            for ci in 0..c {
                let base = (bi * c + ci) * tv;
                for ki in 0..k {
                    let d = ki as isize - half;
                    let (lo, hi) = valid_range(t, d);
                    if hi <= lo {
                        continue;
                    }
                    let s0 = (lo as isize + d) as usize * v;
                    let n = (hi - lo) * v;
                    let gslice = &g[lo * v..lo * v + n];
                    let widx = (oi * c + ci) * k + ki;
                    if want_k {
                        let src = &xv.data()[base + s0..base + s0 + n];
                        gk[widx] += gslice.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                    }
                    if want_x {
                        let w = kv.data()[widx];
                        for (dx, &gv) in gx[base + s0..base + s0 + n].iter_mut().zip(gslice) {
                            *dx += w * gv;
                        }
                    }
                }
            }
        }
    }
    if want_x {
        let gx = Tensor::new(xv.shape().to_vec(), gx)?;
        sink.add(x, gx)?;
    }
    if want_k {
        let gk = Tensor::new(kv.shape().to_vec(), gk)?;
        sink.add(kernel, gk)?;
    }
    if let Some(bb) = bias {
        let gb: Vec<f64> = (0..o)
            .map(|oi| {
                (0..b)
                    .map(|bi| up.data()[(bi * o + oi) * tv..(bi * o + oi + 1) * tv].iter().sum::<f64>())
                    .sum()
            })
            .collect();
        sink.add(bb, Tensor::new([o], gb)?)?;
    }
    Ok(())
}
