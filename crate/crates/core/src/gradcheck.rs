//! Central finite-difference gradient checks.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Largest relative error between analytic and numeric gradients, per input.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub rel_err: Vec<f64>,
}

impl GradCheck {
    pub fn max(&self) -> f64 {
        self.rel_err.iter().copied().fold(0.0, f64::max)
    }
}

/// `max|a - n| / max(max|a|, max|n|, 1e-10)` for one input.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(1e-10, f64::max);
    diff / scale
}

/// Compares the tape gradient of the scalar built by `f` against central
/// differences with step `h`, for every tensor in `inputs`.
///
/// `f` is called once per perturbed evaluation on a fresh tape, with every
/// input registered as a parameter, so it must be deterministic.
pub fn gradcheck<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut rel_err = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; input.len()]);
        let mut numeric = vec![0.0; input.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            *slot = (plus - minus) / (2.0 * h);
        }
        rel_err.push(rel_error(&analytic, &numeric));
    }
    Ok(GradCheck { rel_err })
}
