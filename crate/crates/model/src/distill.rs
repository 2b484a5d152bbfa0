//! Polynomial replacement of surviving activations and fine-tuning under
//! logit and feature-map distillation from a ReLU teacher.

use depthcut_core::seed::rng_from_seed;
use depthcut_core::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::act::{ActivationPlan, Poly};
use crate::data::{epoch_batches, Dataset};
use crate::error::{config_err, ModelError, Result};
use crate::linearize::IndicatorState;
use crate::mask::Mask;
use crate::net::{update_running_stats, Mode, Stgcn};
use crate::params::{poly_name, ModelParams, Sgd, SgdConfig};
use crate::train::{check_loss, diverged, evaluate, EpochLog};

pub const DEFAULT_C: f64 = 0.01;

/// Which network supplies the distillation targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TeacherKind {
    /// The original network with ReLU at every site.
    AllRelu,
    /// The linearized network with ReLU only at kept sites.
    Masked,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub eta: f64,
    pub phi: f64,
    pub c: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub bn_momentum: f64,
    pub teacher: TeacherKind,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            eta: 0.2,
            phi: 200.0,
            c: DEFAULT_C,
            epochs: 20,
            batch_size: 32,
            sgd: SgdConfig {
                lr: 0.01,
                momentum: 0.9,
                weight_decay: 1e-4,
                milestones: vec![10, 15],
                gamma: 0.1,
            },
            bn_momentum: 0.1,
            teacher: TeacherKind::AllRelu,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(config_err(format!("eta {} outside [0, 1]", self.eta)));
        }
        if self.phi < 0.0 {
            return Err(config_err(format!("phi {} must be non-negative", self.phi)));
        }
        Ok(())
    }
}

/// Adds identity-initialized coefficients `(w2, w1, b) = (0, 1, 0)` for every
/// site with a kept node. Coefficient tensors span all V nodes of the site;
/// entries of removed nodes are never used.
pub fn replace_relu(
    params: &ModelParams,
    indicator: &IndicatorState,
    c: f64,
) -> Result<(ModelParams, ActivationPlan)> {
    if !indicator.frozen {
        return Err(ModelError::State(
            "mask must be frozen before activations are replaced".into(),
        ));
    }
    Ok(replace_with_mask(params, &indicator.mask, c))
}

pub fn replace_with_mask(params: &ModelParams, mask: &Mask, c: f64) -> (ModelParams, ActivationPlan) {
    let mut out = params.clone();
    out.tensors.retain(|n, _| !n.contains(".poly."));
    let v = mask.v();
    for s in 0..mask.sites() {
        if mask.row(s).iter().any(|&b| b) {
            out.insert(poly_name(s, "w2"), Tensor::zeros([v]));
            out.insert(poly_name(s, "w1"), Tensor::full([v], 1.0));
            out.insert(poly_name(s, "b"), Tensor::zeros([v]));
        }
    }
    let plan = ActivationPlan::Poly {
        mask: mask.clone(),
        c,
    };
    (out, plan)
}

/// Trainable polynomial scalars: three per kept (site, node).
pub fn poly_param_count(plan: &ActivationPlan) -> usize {
    match plan {
        ActivationPlan::Poly { mask, .. } => 3 * mask.count(),
        _ => 0,
    }
}

/// `(1 - eta) * CE + eta * KL(teacher || student)
///  + phi / 2 * sum_l MSE(norm(student_l), norm(teacher_l))`
///
/// with per-sample L2 normalization of each flattened feature map.
#[allow(clippy::too_many_arguments)]
pub fn distill_loss(
    tape: &mut Tape,
    student_logits: Var,
    teacher_logits: Var,
    labels: &[usize],
    student_feats: &[Var],
    teacher_feats: &[Var],
    eta: f64,
    phi: f64,
) -> Result<Var> {
    if student_feats.len() != teacher_feats.len() {
        return Err(depthcut_core::TensorError::Shape {
            op: "distill_loss",
            lhs: vec![student_feats.len()],
            rhs: vec![teacher_feats.len()],
        }
        .into());
    }
    let ce = tape.cross_entropy(student_logits, labels)?;
    let mut loss = tape.scale(ce, 1.0 - eta)?;
    if eta != 0.0 {
        let kl = tape.kl_div(student_logits, teacher_logits)?;
        let kl = tape.scale(kl, eta)?;
        loss = tape.add(loss, kl)?;
    }
    if phi != 0.0 {
        for (&s, &t) in student_feats.iter().zip(teacher_feats) {
            let (ss, ts) = (tape.shape(s).to_vec(), tape.shape(t).to_vec());
            if ss != ts {
                return Err(depthcut_core::TensorError::Shape {
                    op: "distill_loss features",
                    lhs: ss,
                    rhs: ts,
                }
                .into());
            }
            let sn = tape.l2_normalize(s)?;
            let tn = tape.l2_normalize(t)?;
            let m = tape.mse(sn, tn)?;
            let m = tape.scale(m, phi / 2.0)?;
            loss = tape.add(loss, m)?;
        }
    }
    Ok(loss)
}

#[derive(Clone, Debug)]
pub struct DistillOutcome {
    pub params: ModelParams,
    pub plan: ActivationPlan,
    pub best_epoch: usize,
    pub best_acc: f64,
    pub log: Vec<EpochLog>,
}

/// Fine-tunes `student` (parameters plus polynomial plan) against a frozen
/// eval-mode teacher. Returns the best-eval student; with zero epochs the
/// student comes back unchanged.
#[allow(clippy::too_many_arguments)]
pub fn distill_train(
    model: &Stgcn,
    student: &ModelParams,
    plan: &ActivationPlan,
    teacher: &ModelParams,
    teacher_mask: Option<&Mask>,
    train: &Dataset,
    eval: &Dataset,
    cfg: &DistillConfig,
    seed: u64,
) -> Result<DistillOutcome> {
    cfg.validate()?;
    let ActivationPlan::Poly { mask, c } = plan else {
        return Err(config_err("distillation needs a polynomial activation plan"));
    };
    plan.check(model.cfg.sites(), model.cfg.v, student)?;
    let teacher_plan = match cfg.teacher {
        TeacherKind::AllRelu => ActivationPlan::AllRelu,
        TeacherKind::Masked => ActivationPlan::MaskedRelu {
            mask: teacher_mask.unwrap_or(mask).clone(),
        },
    };
    let mut rng = rng_from_seed(seed);
    let mut params = student.clone();
    let mut opt = Sgd::new(cfg.sgd.momentum, cfg.sgd.weight_decay);
    let mut best_acc = evaluate(model, &params, plan, eval)?;
    let mut best_epoch = 0;
    let mut best = params.clone();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.sgd.lr_at(epoch);
        let mut total = 0.0;
        for (step, idx) in epoch_batches(train.len(), cfg.batch_size, &mut rng).iter().enumerate() {
            let (xb, yb) = train.batch(idx);
            let mut tape = Tape::new();
            let tb = teacher.bind(&mut tape, false);
            let x = tape.constant(xb);
            let mut tacts = teacher_plan.activation(&tb)?;
            let tout = model.forward(&mut tape, teacher, &tb, x, tacts.as_mut(), Mode::Eval)?;
            let sb = params.bind(&mut tape, true);
            let mut sacts = Poly::bind(mask, *c, &sb)?;
            let sout = model
                .forward(&mut tape, &params, &sb, x, &mut sacts, Mode::Train { dropout: None })
                .map_err(diverged("distill", epoch, step))?;
            let loss = distill_loss(
                &mut tape,
                sout.logits,
                tout.logits,
                &yb,
                &sout.features,
                &tout.features,
                cfg.eta,
                cfg.phi,
            )
            .map_err(diverged("distill", epoch, step))?;
            let lv = tape.value(loss).item();
            check_loss("distill", epoch, step, lv)?;
            total += lv * idx.len() as f64;
            let mut grads = tape.backward(loss)?;
            let named = sb.named_grads(&mut grads);
            opt.step(&mut params.tensors, &named, lr)?;
            update_running_stats(&mut params, &sout.stats, cfg.bn_momentum)?;
        }
        let acc = evaluate(model, &params, plan, eval)?;
        log.push(EpochLog {
            epoch,
            train_loss: total / train.len().max(1) as f64,
            eval_acc: acc,
        });
        if acc > best_acc {
            best_acc = acc;
            best_epoch = epoch + 1;
            best = params.clone();
        }
    }
    Ok(DistillOutcome {
        params: best,
        plan: plan.clone(),
        best_epoch,
        best_acc,
        log,
    })
}
