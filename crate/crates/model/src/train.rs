//! Supervised teacher training.

use depthcut_core::seed::rng_from_seed;
use depthcut_core::{Tape, TensorError};
use serde::{Deserialize, Serialize};

use crate::act::{ActivationPlan, Relu};
use crate::data::{epoch_batches, Dataset};
use crate::error::{ModelError, Result};
use crate::net::{accuracy, update_running_stats, Mode, Stgcn};
use crate::params::{ModelParams, Sgd, SgdConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub bn_momentum: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            epochs: 40,
            batch_size: 32,
            sgd: SgdConfig {
                lr: 0.1,
                momentum: 0.9,
                weight_decay: 1e-4,
                milestones: vec![20, 30],
                gamma: 0.1,
            },
            bn_momentum: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_acc: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best eval accuracy (earliest on ties).
    pub params: ModelParams,
    pub best_epoch: usize,
    pub best_acc: f64,
    pub log: Vec<EpochLog>,
}

pub const EVAL_BATCH: usize = 100;

pub fn evaluate(model: &Stgcn, params: &ModelParams, plan: &ActivationPlan, data: &Dataset) -> Result<f64> {
    let logits = model.infer(params, plan, &data.x, EVAL_BATCH)?;
    Ok(accuracy(&logits, &data.labels))
}

/// Maps a non-finite forward value to a divergence diagnostic.
pub(crate) fn diverged(phase: &'static str, epoch: usize, step: usize) -> impl Fn(ModelError) -> ModelError {
    move |e| match e {
        ModelError::Tensor(TensorError::NonFinite { op, index }) => ModelError::Diverged {
            phase,
            epoch,
            step,
            reason: format!("non-finite value in {op} at index {index}"),
        },
        e => e,
    }
}

pub(crate) fn check_loss(phase: &'static str, epoch: usize, step: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(ModelError::Diverged {
            phase,
            epoch,
            step,
            reason: format!("loss is {loss}"),
        })
    }
}

pub fn train_teacher(
    model: &Stgcn,
    train: &Dataset,
    eval: &Dataset,
    cfg: &TeacherConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    let mut rng = rng_from_seed(seed);
    let init = model.init_params(&mut rng)?;
    train_from(model, init, train, eval, cfg, &mut rng)
}

/// Trains from given initial parameters, all ReLU activations.
pub fn train_from(
    model: &Stgcn,
    mut params: ModelParams,
    train: &Dataset,
    eval: &Dataset,
    cfg: &TeacherConfig,
    rng: &mut impl rand::Rng,
) -> Result<TrainOutcome> {
    let mut opt = Sgd::new(cfg.sgd.momentum, cfg.sgd.weight_decay);
    let plan = ActivationPlan::AllRelu;
    let mut best: Option<(usize, f64, ModelParams)> = None;
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.sgd.lr_at(epoch);
        let mut total = 0.0;
        let batches = epoch_batches(train.len(), cfg.batch_size, rng);
        for (step, idx) in batches.iter().enumerate() {
            let (xb, yb) = train.batch(idx);
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, true);
            let x = tape.constant(xb);
            let out = model
                .forward(
                    &mut tape,
                    &params,
                    &bound,
                    x,
                    &mut Relu,
                    Mode::Train {
                        dropout: Some(&mut *rng),
                    },
                )
                .map_err(diverged("teacher", epoch, step))?;
            let loss = tape.cross_entropy(out.logits, &yb)?;
            let lv = tape.value(loss).item();
            check_loss("teacher", epoch, step, lv)?;
            total += lv * idx.len() as f64;
            let mut grads = tape.backward(loss)?;
            let named = bound.named_grads(&mut grads);
            opt.step(&mut params.tensors, &named, lr)?;
            update_running_stats(&mut params, &out.stats, cfg.bn_momentum)?;
        }
        let acc = evaluate(model, &params, &plan, eval)?;
        log.push(EpochLog {
            epoch,
            train_loss: total / train.len().max(1) as f64,
            eval_acc: acc,
        });
        if best.as_ref().map_or(true, |b| acc > b.1) {
            best = Some((epoch, acc, params.clone()));
        }
    }
    let (best_epoch, best_acc, params) = match best {
        Some(b) => b,
        None => {
            let acc = evaluate(model, &params, &plan, eval)?;
            (0, acc, params)
        }
    };
    Ok(TrainOutcome {
        params,
        best_epoch,
        best_acc,
        log,
    })
}
