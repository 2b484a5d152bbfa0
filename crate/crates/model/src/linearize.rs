//! Learned node-wise removal of activation sites.
//!
//! A real-valued importance `h_w` per (site, node) is binarized by a
//! per-layer polarization that keeps every node of a layer at the same
//! activation count. Gradients reach `h_w` through a softplus
//! straight-through surrogate.

use depthcut_core::seed::rng_from_seed;
use depthcut_core::{softplus, CustomCtx, CustomOp, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::act::{ActivationPlan, SiteActivation};
use crate::data::{epoch_batches, Dataset};
use crate::error::{ModelError, Result};
use crate::mask::Mask;
use crate::net::{update_running_stats, Mode, Stgcn};
use crate::params::{ModelParams, Sgd, SgdConfig};
use crate::train::{check_loss, diverged, evaluate};

/// Binarizes `h_w` (row-major `sites x v`) layer by layer.
///
/// For each node the larger of its two site importances joins the "high"
/// group and the other the "low" group (equal values put the second site in
/// the high group). Every high position is kept iff the high sum is
/// positive, every low position iff the low sum is positive.
pub fn polarize(h_w: &[f64], sites: usize, v: usize) -> Mask {
    assert_eq!(h_w.len(), sites * v, "h_w must be sites x V");
    assert!(sites % 2 == 0, "sites come in pairs");
    let mut h = Mask::filled(sites, v, false);
    let mut high = Vec::with_capacity(v);
    let mut low = Vec::with_capacity(v);
    for layer in 0..sites / 2 {
        let (a, b) = (2 * layer, 2 * layer + 1);
        let (mut s_h, mut s_l) = (0.0, 0.0);
        high.clear();
        low.clear();
        for j in 0..v {
            let (wa, wb) = (h_w[a * v + j], h_w[b * v + j]);
            if wa > wb {
                s_h += wa;
                high.push((a, j));
                s_l += wb;
                low.push((b, j));
            } else {
                s_h += wb;
                high.push((b, j));
                s_l += wa;
                low.push((a, j));
            }
        }
        for &(s, j) in &high {
            h.set(s, j, s_h > 0.0);
        }
        for &(s, j) in &low {
            h.set(s, j, s_l > 0.0);
        }
    }
    h
}

#[derive(Clone, Debug, PartialEq)]
pub struct IndicatorState {
    /// Importance matrix, `[sites, V]`.
    pub h_w: Tensor,
    pub mask: Mask,
    pub frozen: bool,
    pub mu: f64,
}

impl IndicatorState {
    /// `h_w ~ uniform(0.9, 1.1)`, so every site starts kept.
    pub fn init(sites: usize, v: usize, mu: f64, rng: &mut impl Rng) -> Result<Self> {
        let h_w = Tensor::from_fn([sites, v], |_| rng.random_range(0.9..1.1));
        Self::from_h_w(h_w, mu)
    }

    pub fn from_h_w(h_w: Tensor, mu: f64) -> Result<Self> {
        let [sites, v] = <[usize; 2]>::try_from(h_w.shape())
            .map_err(|_| ModelError::Config(format!("h_w must be 2-D, got {:?}", h_w.shape())))?;
        let mask = checked_polarize(h_w.data(), sites, v)?;
        Ok(IndicatorState {
            h_w,
            mask,
            frozen: false,
            mu,
        })
    }

    pub fn set_h_w(&mut self, h_w: Tensor) -> Result<()> {
        if self.frozen {
            return Err(ModelError::State("indicator is frozen".into()));
        }
        let sites = self.mask.sites();
        let v = self.mask.v();
        self.mask = checked_polarize(h_w.data(), sites, v)?;
        self.h_w = h_w;
        Ok(())
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }
}

fn checked_polarize(h_w: &[f64], sites: usize, v: usize) -> Result<Mask> {
    let m = polarize(h_w, sites, v);
    if !m.is_structural() {
        return Err(ModelError::Internal(
            "polarization produced a mask with unequal per-node counts".into(),
        ));
    }
    Ok(m)
}

/// Masked ReLU whose backward also produces a surrogate gradient for one
/// row of the importance matrix: for node `k`,
/// `softplus(h_w[site, k]) * sum_{B,C,T} upstream * (relu(z) - z)`.
pub struct SteSite {
    pub site: usize,
    pub keep: Vec<bool>,
}

impl CustomOp for SteSite {
    fn name(&self) -> &'static str {
        "ste_masked_relu"
    }

    fn forward(&self, inputs: &[&Tensor]) -> depthcut_core::Result<Tensor> {
        let z = inputs[0];
        let v = self.keep.len();
        Ok(Tensor::from_fn(z.shape().to_vec(), |i| {
            let x = z.data()[i];
            if self.keep[i % v] {
                x.max(0.0)
            } else {
                x
            }
        }))
    }

    fn backward(&self, ctx: &CustomCtx<'_>) -> depthcut_core::Result<Vec<Option<Tensor>>> {
        let (z, hw, up) = (ctx.inputs[0], ctx.inputs[1], ctx.upstream);
        let v = self.keep.len();
        let gz = Tensor::from_fn(z.shape().to_vec(), |i| {
            let x = z.data()[i];
            if !self.keep[i % v] || x > 0.0 {
                up.data()[i]
            } else {
                0.0
            }
        });
        let mut inner = vec![0.0; v];
        for (i, (&x, &g)) in z.data().iter().zip(up.data()).enumerate() {
            inner[i % v] += g * (x.max(0.0) - x);
        }
        let mut ghw = Tensor::zeros(hw.shape().to_vec());
        let row = self.site * v;
        for (k, g) in inner.iter().enumerate() {
            ghw.data_mut()[row + k] = g * softplus(hw.data()[row + k]);
        }
        Ok(vec![Some(gz), Some(ghw)])
    }
}

/// `mu * count(h)` with surrogate gradient `mu * softplus(h_w)`.
pub struct L0Penalty {
    pub mu: f64,
    pub count: usize,
}

impl CustomOp for L0Penalty {
    fn name(&self) -> &'static str {
        "l0_penalty"
    }

    fn forward(&self, _inputs: &[&Tensor]) -> depthcut_core::Result<Tensor> {
        Ok(Tensor::scalar(self.mu * self.count as f64))
    }

    fn backward(&self, ctx: &CustomCtx<'_>) -> depthcut_core::Result<Vec<Option<Tensor>>> {
        let g = ctx.upstream.item() * self.mu;
        Ok(vec![Some(ctx.inputs[0].map(|w| g * softplus(w)))])
    }
}

pub fn l0_penalty(tape: &mut Tape, h_w: Var, mask: &Mask, mu: f64) -> Result<Var> {
    Ok(tape.custom(
        Box::new(L0Penalty {
            mu,
            count: mask.count(),
        }),
        &[h_w],
    )?)
}

/// Activation slot used while learning the mask.
pub struct SteActivation<'a> {
    pub h_w: Var,
    pub mask: &'a Mask,
}

impl SiteActivation for SteActivation<'_> {
    fn apply(&mut self, tape: &mut Tape, site: usize, z: Var) -> Result<Var> {
        Ok(tape.custom(
            Box::new(SteSite {
                site,
                keep: self.mask.row(site).to_vec(),
            }),
            &[z, self.h_w],
        )?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearizeConfig {
    pub mu: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    /// Plain SGD step size for the importance matrix.
    pub hw_lr: f64,
    /// Stop and freeze as soon as the effective count drops to this value.
    pub target_effective: Option<f64>,
    pub bn_momentum: f64,
}

impl Default for LinearizeConfig {
    fn default() -> Self {
        LinearizeConfig {
            mu: 1.0,
            epochs: 10,
            batch_size: 32,
            sgd: SgdConfig {
                lr: 0.01,
                momentum: 0.9,
                weight_decay: 1e-4,
                milestones: vec![],
                gamma: 0.1,
            },
            hw_lr: 0.01,
            target_effective: None,
            bn_momentum: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearizeLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub effective: f64,
    pub eval_acc: f64,
}

#[derive(Clone, Debug)]
pub struct LinearizeOutcome {
    pub params: ModelParams,
    pub indicator: IndicatorState,
    pub log: Vec<LinearizeLog>,
    pub steps: usize,
}

/// Co-trains the weights and the importance matrix starting from the
/// teacher, then freezes the mask.
pub fn linearize_train(
    model: &Stgcn,
    teacher: &ModelParams,
    train: &Dataset,
    eval: &Dataset,
    cfg: &LinearizeConfig,
    seed: u64,
) -> Result<LinearizeOutcome> {
    if cfg.mu < 0.0 {
        return Err(ModelError::Config(format!("mu {} must be non-negative", cfg.mu)));
    }
    let mut rng = rng_from_seed(seed);
    let (sites, v) = (model.cfg.sites(), model.cfg.v);
    let mut ind = IndicatorState::init(sites, v, cfg.mu, &mut rng)?;
    let mut params = teacher.clone();
    let mut opt = Sgd::new(cfg.sgd.momentum, cfg.sgd.weight_decay);
    let mut log = Vec::new();
    let mut steps = 0;
    let reached = |ind: &IndicatorState| cfg.target_effective.is_some_and(|t| ind.mask.effective() <= t);
    'outer: for epoch in 0..cfg.epochs {
        if reached(&ind) {
            break;
        }
        let lr = cfg.sgd.lr_at(epoch);
        let mut total = 0.0;
        let mut seen = 0;
        for (step, idx) in epoch_batches(train.len(), cfg.batch_size, &mut rng).iter().enumerate() {
            let (xb, yb) = train.batch(idx);
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, true);
            let hw = tape.param(ind.h_w.clone());
            let x = tape.constant(xb);
            let mut acts = SteActivation {
                h_w: hw,
                mask: &ind.mask,
            };
            let out = model
                .forward(&mut tape, &params, &bound, x, &mut acts, Mode::Train { dropout: None })
                .map_err(diverged("linearize", epoch, step))?;
            let ce = tape.cross_entropy(out.logits, &yb)?;
            let pen = l0_penalty(&mut tape, hw, &ind.mask, cfg.mu)?;
            let loss = tape.add(ce, pen)?;
            let lv = tape.value(loss).item();
            check_loss("linearize", epoch, step, lv)?;
            total += lv * idx.len() as f64;
            seen += idx.len();
            let mut grads = tape.backward(loss)?;
            let ghw = grads
                .take(hw)
                .ok_or_else(|| ModelError::Internal("importance matrix received no gradient".into()))?;
            let named = bound.named_grads(&mut grads);
            opt.step(&mut params.tensors, &named, lr)?;
            update_running_stats(&mut params, &out.stats, cfg.bn_momentum)?;
            ind.set_h_w(importance_step(&ind, &ghw, cfg)?)?;
            steps += 1;
            if reached(&ind) {
                log.push(epoch_log(model, &params, &ind, eval, epoch, total, seen)?);
                break 'outer;
            }
        }
        log.push(epoch_log(model, &params, &ind, eval, epoch, total, seen)?);
    }
    ind.freeze();
    Ok(LinearizeOutcome {
        params,
        indicator: ind,
        log,
        steps,
    })
}

/// One SGD step on the importance matrix. With a target count, a step that
/// would jump past the target is shortened by bisection so the mask lands
/// on the target when some step length reaches it.
fn importance_step(ind: &IndicatorState, grad: &Tensor, cfg: &LinearizeConfig) -> Result<Tensor> {
    let (sites, v) = (ind.mask.sites(), ind.mask.v());
    let at = |alpha: f64| -> Result<Tensor> {
        let mut next = ind.h_w.clone();
        next.axpy(-cfg.hw_lr * alpha, grad)?;
        Ok(next)
    };
    let full = at(1.0)?;
    let Some(target) = cfg.target_effective else {
        return Ok(full);
    };
    let eff = |t: &Tensor| polarize(t.data(), sites, v).effective();
    let tol = 1e-9;
    if ind.mask.effective() <= target + tol || eff(&full) >= target - tol {
        return Ok(full);
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let cand = at(mid)?;
        let e = eff(&cand);
        if (e - target).abs() <= tol {
            return Ok(cand);
        }
        if e > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(full)
}

fn epoch_log(
    model: &Stgcn,
    params: &ModelParams,
    ind: &IndicatorState,
    eval: &Dataset,
    epoch: usize,
    total: f64,
    seen: usize,
) -> Result<LinearizeLog> {
    let plan = ActivationPlan::MaskedRelu {
        mask: ind.mask.clone(),
    };
    Ok(LinearizeLog {
        epoch,
        train_loss: total / seen.max(1) as f64,
        effective: ind.mask.effective(),
        eval_acc: evaluate(model, params, &plan, eval)?,
    })
}
