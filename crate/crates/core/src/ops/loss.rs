use super::Op;
use crate::error::{Result, TensorError};
use crate::tape::{GradSink, Tape, Var};
use crate::tensor::Tensor;

fn rows(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [b, k] if k > 0 => Ok((b, k)),
        _ => Err(TensorError::config(op, format!("expected [B, K] logits, got {:?}", t.shape()))),
    }
}

/// Row-wise log-softmax of a `[B, K]` matrix.
pub(crate) fn log_softmax_rows(x: &[f64], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(k) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| v - lse));
    }
    out
}

impl Tape {
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.try_value(x)?;
        let (_, k) = rows("log_softmax", xv)?;
        let out = Tensor::new(xv.shape().to_vec(), log_softmax_rows(xv.data(), k))?;
        self.push(Op::LogSoftmax(x), out, "log_softmax", &[x])
    }

    /// Mean cross-entropy of `[B, K]` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.try_value(logits)?;
        let (b, k) = rows("cross_entropy", lv)?;
        if labels.len() != b {
            return Err(TensorError::shape("cross_entropy", lv.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::config(
                "cross_entropy",
                format!("label {bad} out of range for {k} classes"),
            ));
        }
        let logp = log_softmax_rows(lv.data(), k);
        let loss = -labels
            .iter()
            .enumerate()
            .map(|(i, &l)| logp[i * k + l])
            .sum::<f64>()
            / b as f64;
        let probs = Tensor::new([b, k], logp.iter().map(|v| v.exp()).collect())?;
        self.push(
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
            "cross_entropy",
            &[logits],
        )
    }

    /// Batch mean of `KL(softmax(teacher) || softmax(student))`, temperature 1.
    /// Both sides receive gradients; pass the teacher as a constant to freeze it.
    pub fn kl_div(&mut self, student: Var, teacher: Var) -> Result<Var> {
        let (sv, tv) = (self.try_value(student)?, self.try_value(teacher)?);
        if sv.shape() != tv.shape() {
            return Err(TensorError::shape("kl_div", sv.shape(), tv.shape()));
        }
        let (b, k) = rows("kl_div", sv)?;
        let ls = log_softmax_rows(sv.data(), k);
        let lt = log_softmax_rows(tv.data(), k);
        let per_row: Vec<f64> = (0..b)
            .map(|i| {
                (0..k)
                    .map(|j| {
                        let idx = i * k + j;
                        lt[idx].exp() * (lt[idx] - ls[idx])
                    })
                    .sum()
            })
            .collect();
        let loss = per_row.iter().sum::<f64>() / b as f64;
        let p_student = Tensor::new([b, k], ls.iter().map(|v| v.exp()).collect())?;
        let p_teacher = Tensor::new([b, k], lt.iter().map(|v| v.exp()).collect())?;
        self.push(
            Op::KlDiv {
                student,
                teacher,
                p_student,
                p_teacher,
                per_row,
            },
            Tensor::scalar(loss),
            "kl_div",
            &[student, teacher],
        )
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.try_value(a)?, self.try_value(b)?);
        if av.shape() != bv.shape() {
            return Err(TensorError::shape("mse", av.shape(), bv.shape()));
        }
        let n = av.len().max(1) as f64;
        let loss = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            / n;
        self.push(Op::Mse(a, b), Tensor::scalar(loss), "mse", &[a, b])
    }
}

pub(super) fn log_softmax_backward(
    x: Var,
    out: &Tensor,
    up: &Tensor,
    sink: &mut GradSink<'_>,
) -> Result<()> {
    let k = out.shape()[1];
    let mut g = Vec::with_capacity(out.len());
    for (o, u) in out.data().chunks(k).zip(up.data().chunks(k)) {
        let s: f64 = u.iter().sum();
        g.extend(o.iter().zip(u).map(|(&lo, &ui)| ui - lo.exp() * s));
    }
    sink.add(x, Tensor::new(out.shape().to_vec(), g)?)
}

pub(super) fn cross_entropy_backward(
    logits: Var,
    labels: &[usize],
    probs: &Tensor,
    up: &Tensor,
    sink: &mut GradSink<'_>,
) -> Result<()> {
    let k = probs.shape()[1];
    let scale = up.item() / labels.len() as f64;
    let mut g = probs.clone();
    for (i, &l) in labels.iter().enumerate() {
        g.data_mut()[i * k + l] -= 1.0;
    }
    g.data_mut().iter_mut().for_each(|v| *v *= scale);
    sink.add(logits, g)
}

pub(super) fn kl_backward(
    student: Var,
    teacher: Var,
    p_s: &Tensor,
    p_t: &Tensor,
    per_row: &[f64],
    up: &Tensor,
    sink: &mut GradSink<'_>,
) -> Result<()> {
    let (b, k) = (p_s.shape()[0], p_s.shape()[1]);
    let scale = up.item() / b as f64;
    if sink.wants(student) {
        let g = p_s.zip_map(p_t, |s, t| (s - t) * scale)?;
        sink.add(student, g)?;
    }
    if sink.wants(teacher) {
        let g = Tensor::from_fn([b, k], |idx| {
            let pt = p_t.data()[idx];
            if pt == 0.0 {
                return 0.0;
            }
            let gap = pt.ln() - p_s.data()[idx].ln();
            pt * (gap - per_row[idx / k]) * scale
        });
        sink.add(teacher, g)?;
    }
    Ok(())
}

pub(super) fn mse_backward(a: Var, b: Var, up: &Tensor, sink: &mut GradSink<'_>) -> Result<()> {
    let n = sink.value(a).len().max(1) as f64;
    let s = 2.0 * up.item() / n;
    let ga = sink.value(a).zip_map(sink.value(b), |x, y| s * (x - y))?;
    let gb = ga.map(|v| -v);
    sink.add(a, ga)?;
    sink.add(b, gb)
}
