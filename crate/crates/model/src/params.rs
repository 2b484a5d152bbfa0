//! Named parameter store and the SGD optimizer shared by all training phases.

use std::collections::BTreeMap;

use depthcut_core::{Grads, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::config::StgcnConfig;
use crate::error::{ModelError, Result};

/// Flat name -> tensor map. Running batch-norm statistics live here too but
/// are buffers, never trained.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams {
    pub tensors: BTreeMap<String, Tensor>,
}

pub fn gcn_weight(layer: usize, part: usize) -> String {
    format!("layer{layer}.gcn.w{part}")
}

pub fn bn_name(layer: usize, which: usize, field: &str) -> String {
    format!("layer{layer}.bn{which}.{field}")
}

pub fn tcn_kernel(layer: usize) -> String {
    format!("layer{layer}.tcn.kernel")
}

pub fn tcn_bias(layer: usize) -> String {
    format!("layer{layer}.tcn.bias")
}

pub fn poly_name(site: usize, coeff: &str) -> String {
    format!("site{site}.poly.{coeff}")
}

pub const FC_W: &str = "fc.w";
pub const FC_B: &str = "fc.b";

/// Running statistics are buffers, everything else is trainable.
pub fn is_buffer(name: &str) -> bool {
    name.ends_with(".mean") || name.ends_with(".var")
}

fn decays(name: &str) -> bool {
    name.ends_with(".kernel") || name.contains(".gcn.w") || name == FC_W
}

fn normal(len: usize, std: f64, rng: &mut impl Rng) -> Vec<f64> {
    let d = Normal::new(0.0, std).expect("positive std");
    (0..len).map(|_| d.sample(rng)).collect()
}

impl ModelParams {
    /// Kaiming-normal weights, unit batch-norm scale, zero biases.
    pub fn init(cfg: &StgcnConfig, partitions: usize, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut t = BTreeMap::new();
        for l in 0..cfg.layers() {
            let (ci, co) = (cfg.layer_channels[l], cfg.layer_channels[l + 1]);
            for p in 0..partitions {
                let std = (2.0 / (ci * partitions) as f64).sqrt();
                t.insert(gcn_weight(l, p), Tensor::new([co, ci], normal(co * ci, std, rng))?);
            }
            let std = (2.0 / (co * cfg.k) as f64).sqrt();
            t.insert(tcn_kernel(l), Tensor::new([co, co, cfg.k], normal(co * co * cfg.k, std, rng))?);
            t.insert(tcn_bias(l), Tensor::zeros([co]));
            for which in [1, 2] {
                t.insert(bn_name(l, which, "gamma"), Tensor::full([co], 1.0));
                t.insert(bn_name(l, which, "beta"), Tensor::zeros([co]));
                t.insert(bn_name(l, which, "mean"), Tensor::zeros([co]));
                t.insert(bn_name(l, which, "var"), Tensor::full([co], 1.0));
            }
        }
        let (cf, k) = (cfg.final_channels(), cfg.num_classes);
        let std = (1.0 / cf as f64).sqrt();
        t.insert(FC_W.into(), Tensor::new([cf, k], normal(cf * k, std, rng))?);
        t.insert(FC_B.into(), Tensor::zeros([k]));
        Ok(ModelParams { tensors: t })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| ModelError::State(format!("missing parameter {name}")))
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    /// Number of scalar entries across trainable tensors.
    pub fn trainable_len(&self) -> usize {
        self.tensors
            .iter()
            .filter(|(n, _)| !is_buffer(n))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Records every trainable tensor on `tape`, as parameters when
    /// `trainable` and as constants otherwise.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .filter(|(n, _)| !is_buffer(n))
            .map(|(n, t)| {
                let v = if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (n.clone(), v)
            })
            .collect();
        Bound { vars }
    }
}

/// Tape handles for one bound parameter set.
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::State(format!("parameter {name} not bound")))
    }

    /// Gradients by parameter name; parameters that did not reach the loss
    /// are omitted.
    pub fn named_grads(&self, grads: &mut Grads) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter_map(|(n, &v)| grads.take(v).map(|g| (n.clone(), g)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs after which the learning rate is multiplied by `gamma`.
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

impl SgdConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.lr * self.gamma.powi(drops as i32)
    }
}

/// Heavy-ball SGD; L2 weight decay applies to weights, not biases or norms.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| ModelError::State(format!("gradient for unknown parameter {name}")))?;
            let mut d = g.clone();
            if self.weight_decay != 0.0 && decays(name) {
                d.axpy(self.weight_decay, p)?;
            }
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
            for (vi, di) in v.data_mut().iter_mut().zip(d.data()) {
                *vi = self.momentum * *vi + di;
            }
            p.axpy(-lr, v)?;
        }
        Ok(())
    }
}
