use super::Op;
use crate::error::{Result, TensorError};
use crate::tape::{GradSink, Tape, Var};
use crate::tensor::Tensor;

/// `out[m,n] += a[m,k] * b[k,n]` on raw row-major slices.
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Row-major transpose of an `m x n` matrix.
pub(crate) fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = a[i * n + j];
        }
    }
    t
}

fn dims4(op: &'static str, t: &Tensor) -> Result<[usize; 4]> {
    match *t.shape() {
        [b, c, tt, v] => Ok([b, c, tt, v]),
        _ => Err(TensorError::config(op, format!("expected [B,C,T,V], got {:?}", t.shape()))),
    }
}

/// Maps a flat input index to its flat index in the reduced output.
struct Reducer {
    in_strides: Vec<usize>,
    out_strides: Vec<usize>,
    shape: Vec<usize>,
    reduced: Vec<bool>,
}

impl Reducer {
    fn new(shape: &[usize], axes: &[usize]) -> Self {
        let nd = shape.len();
        let mut reduced = vec![false; nd];
        for &a in axes {
            reduced[a] = true;
        }
        let mut in_strides = vec![1; nd];
        for d in (0..nd.saturating_sub(1)).rev() {
            in_strides[d] = in_strides[d + 1] * shape[d + 1];
        }
        let mut out_strides = vec![0; nd];
        let mut acc = 1;
        for d in (0..nd).rev() {
            if !reduced[d] {
                out_strides[d] = acc;
                acc *= shape[d];
            }
        }
        Reducer {
            in_strides,
            out_strides,
            shape: shape.to_vec(),
            reduced,
        }
    }

    fn out_shape(&self) -> Vec<usize> {
        self.shape
            .iter()
            .zip(&self.reduced)
            .filter(|(_, &r)| !r)
            .map(|(&s, _)| s)
            .collect()
    }

    fn count(&self) -> usize {
        self.shape
            .iter()
            .zip(&self.reduced)
            .filter(|(_, &r)| r)
            .map(|(&s, _)| s)
            .product()
    }

    fn map(&self, mut flat: usize) -> usize {
        let mut out = 0;
        for d in 0..self.shape.len() {
            let i = flat / self.in_strides[d];
            flat %= self.in_strides[d];
            out += i * self.out_strides[d];
        }
        out
    }
}

impl Tape {
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.try_value(a)?.sum());
        self.push(Op::Sum(a), v, "sum", &[a])
    }

    /// Mean over the listed axes; reduced axes are dropped from the shape.
    pub fn mean(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let xv = self.try_value(x)?;
        let nd = xv.ndim();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if axes.iter().any(|&a| a >= nd) {
            return Err(TensorError::config(
                "mean",
                format!("axes {axes:?} out of range for shape {:?}", xv.shape()),
            ));
        }
        let r = Reducer::new(xv.shape(), &axes);
        let mut out = Tensor::zeros(r.out_shape());
        let n = r.count().max(1) as f64;
        let od = out.data_mut();
        for (i, &v) in xv.data().iter().enumerate() {
            od[r.map(i)] += v / n;
        }
        self.push(Op::Mean { x, axes }, out, "mean", &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.try_value(x)?.reshape(shape.to_vec())?;
        self.push(Op::Reshape(x), v, "reshape", &[x])
    }

    /// 2-D matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.try_value(a)?, self.try_value(b)?);
        let (m, k, n) = match (av.shape(), bv.shape()) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            (sa, sb) => return Err(TensorError::shape("matmul", sa, sb)),
        };
        let mut out = vec![0.0; m * n];
        gemm_acc(av.data(), bv.data(), &mut out, m, k, n);
        let out = Tensor::new([m, n], out)?;
        self.push(Op::MatMul(a, b), out, "matmul", &[a, b])
    }

    /// 1x1 convolution: `out[b,o,t,v] = sum_c w[o,c] * x[b,c,t,v]`.
    pub fn channel_mix(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.try_value(x)?, self.try_value(w)?);
        let [b, c, t, v] = dims4("channel_mix", xv)?;
        let o = match *wv.shape() {
            [o, c2] if c2 == c => o,
            _ => return Err(TensorError::shape("channel_mix", xv.shape(), wv.shape())),
        };
        let tv = t * v;
        let mut out = vec![0.0; b * o * tv];
        for bi in 0..b {
            gemm_acc(
                wv.data(),
                &xv.data()[bi * c * tv..(bi + 1) * c * tv],
                &mut out[bi * o * tv..(bi + 1) * o * tv],
                o,
                c,
                tv,
            );
        }
        let out = Tensor::new([b, o, t, v], out)?;
        self.push(Op::ChannelMix { x, w }, out, "channel_mix", &[x, w])
    }

    /// Fully connected layer `x[B,In] @ w[In,Out] + b[Out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.try_value(x)?, self.try_value(w)?);
        let (rows, fin, fout) = match (xv.shape(), wv.shape()) {
            (&[r, i], &[i2, o]) if i == i2 => (r, i, o),
            (sa, sb) => return Err(TensorError::shape("linear", sa, sb)),
        };
        let mut out = vec![0.0; rows * fout];
        if let Some(b) = b {
            let bv = self.try_value(b)?;
            if bv.shape() != [fout] {
                return Err(TensorError::shape("linear bias", bv.shape(), &[fout]));
            }
            for r in 0..rows {
                out[r * fout..(r + 1) * fout].copy_from_slice(bv.data());
            }
        }
        gemm_acc(xv.data(), wv.data(), &mut out, rows, fin, fout);
        let out = Tensor::new([rows, fout], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(Op::Linear { x, w, b }, out, "linear", &inputs)
    }

    /// Mean over the (T, V) axes of a `[B,C,T,V]` tensor.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xv = self.try_value(x)?;
        let [b, c, t, v] = dims4("global_avg_pool", xv)?;
        let n = (t * v) as f64;
        let out: Vec<f64> = xv
            .data()
            .chunks(t * v)
            .map(|ch| ch.iter().sum::<f64>() / n)
            .collect();
        let out = Tensor::new([b, c], out)?;
        self.push(Op::GlobalAvgPool(x), out, "global_avg_pool", &[x])
    }
}

pub(super) fn mean_backward(
    x: Var,
    axes: &[usize],
    up: &Tensor,
    sink: &mut GradSink<'_>,
) -> Result<()> {
    let xv = sink.value(x);
    let r = Reducer::new(xv.shape(), axes);
    let n = r.count().max(1) as f64;
    let g = Tensor::from_fn(xv.shape().to_vec(), |i| up.data()[r.map(i)] / n);
    sink.add(x, g)
}

pub(super) fn matmul_backward(a: Var, b: Var, up: &Tensor, sink: &mut GradSink<'_>) -> Result<()> {
    let (av, bv) = (sink.value(a), sink.value(b));
    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
    if sink.wants(a) {
        let bt = transpose(bv.data(), k, n);
        let mut ga = vec![0.0; m * k];
        gemm_acc(up.data(), &bt, &mut ga, m, n, k);
        sink.add(a, Tensor::new([m, k], ga)?)?;
    }
    if sink.wants(b) {
        let at = transpose(av.data(), m, k);
        let mut gb = vec![0.0; k * n];
        gemm_acc(&at, up.data(), &mut gb, k, m, n);
        sink.add(b, Tensor::new([k, n], gb)?)?;
    }
    Ok(())
}

pub(super) fn channel_mix_backward(
    x: Var,
    w: Var,
    up: &Tensor,
    sink: &mut GradSink<'_>,
) -> Result<()> {
    let (xv, wv) = (sink.value(x), sink.value(w));
    let [b, c, t, v] = dims4("channel_mix", xv)?;
    let o = wv.shape()[0];
    let tv = t * v;
    if sink.wants(x) {
        let wt = transpose(wv.data(), o, c);
        let mut gx = vec![0.0; xv.len()];
        for bi in 0..b {
            gemm_acc(
                &wt,
                &up.data()[bi * o * tv..(bi + 1) * o * tv],
                &mut gx[bi * c * tv..(bi + 1) * c * tv],
                c,
                o,
                tv,
            );
        }
        let gx = Tensor::new(xv.shape().to_vec(), gx)?;
        sink.add(x, gx)?;
    }
    if sink.wants(w) {
        let mut gw = vec![0.0; o * c];
        for bi in 0..b {
            let xb = transpose(&xv.data()[bi * c * tv..(bi + 1) * c * tv], c, tv);
            gemm_acc(&up.data()[bi * o * tv..(bi + 1) * o * tv], &xb, &mut gw, o, tv, c);
        }
        sink.add(w, Tensor::new([o, c], gw)?)?;
    }
    Ok(())
}

pub(super) fn linear_backward(
    x: Var,
    w: Var,
    b: Option<Var>,
    up: &Tensor,
    sink: &mut GradSink<'_>,
) -> Result<()> {
    let (xv, wv) = (sink.value(x), sink.value(w));
    let (rows, fin, fout) = (xv.shape()[0], xv.shape()[1], wv.shape()[1]);
    if sink.wants(x) {
        let wt = transpose(wv.data(), fin, fout);
        let mut gx = vec![0.0; rows * fin];
        gemm_acc(up.data(), &wt, &mut gx, rows, fout, fin);
        sink.add(x, Tensor::new([rows, fin], gx)?)?;
    }
    if sink.wants(w) {
        let xt = transpose(xv.data(), rows, fin);
        let mut gw = vec![0.0; fin * fout];
        gemm_acc(&xt, up.data(), &mut gw, fin, rows, fout);
        sink.add(w, Tensor::new([fin, fout], gw)?)?;
    }
    if let Some(b) = b {
        let mut gb = vec![0.0; fout];
        for r in up.data().chunks(fout) {
            for (g, &u) in gb.iter_mut().zip(r) {
                *g += u;
            }
        }
        sink.add(b, Tensor::new([fout], gb)?)?;
    }
    Ok(())
}

pub(super) fn global_avg_pool_backward(x: Var, up: &Tensor, sink: &mut GradSink<'_>) -> Result<()> {
    let xv = sink.value(x);
    let [_, _, t, v] = dims4("global_avg_pool", xv)?;
    let n = (t * v) as f64;
    let g = Tensor::from_fn(xv.shape().to_vec(), |i| up.data()[i / (t * v)] / n);
    sink.add(x, g)
}
