//! STGCN forward pass on a tape.

use depthcut_core::{BatchStats, BnMode, Tape, Tensor, Var};
use rand::RngCore;

use crate::act::{ActivationPlan, SiteActivation};
use crate::config::StgcnConfig;
use crate::error::{config_err, Result};
use crate::graph::SkeletonGraph;
use crate::params::{bn_name, gcn_weight, tcn_bias, tcn_kernel, Bound, ModelParams, FC_B, FC_W};

pub enum Mode<'a> {
    /// Batch norm from running statistics, no dropout.
    Eval,
    /// Batch statistics; dropout before the classifier when the rng is set.
    Train { dropout: Option<&'a mut dyn RngCore> },
}

impl Mode<'_> {
    fn is_train(&self) -> bool {
        matches!(self, Mode::Train { .. })
    }
}

/// Batch statistics observed for one normalization during a train forward.
#[derive(Clone, Debug)]
pub struct ObservedStats {
    pub layer: usize,
    pub which: usize,
    pub stats: BatchStats,
}

pub struct ForwardOut {
    pub logits: Var,
    /// Output of every layer after its second activation.
    pub features: Vec<Var>,
    pub stats: Vec<ObservedStats>,
}

#[derive(Clone, Debug)]
pub struct Stgcn {
    pub cfg: StgcnConfig,
    pub graph: SkeletonGraph,
    /// Transposed partition matrices, ready for `[.., V] @ A^T`.
    adj_t: Vec<Tensor>,
}

impl Stgcn {
    pub fn new(cfg: StgcnConfig) -> Result<Self> {
        let graph = SkeletonGraph::for_config(&cfg)?;
        Self::with_graph(cfg, graph)
    }

    pub fn with_graph(cfg: StgcnConfig, graph: SkeletonGraph) -> Result<Self> {
        cfg.validate()?;
        if graph.v() != cfg.v {
            return Err(config_err(format!("graph has {} nodes, config V={}", graph.v(), cfg.v)));
        }
        let v = cfg.v;
        let adj_t = graph
            .partitions()
            .iter()
            .map(|p| Tensor::from_fn([v, v], |i| p[(i % v) * v + i / v]))
            .collect();
        Ok(Stgcn { cfg, graph, adj_t })
    }

    pub fn partitions(&self) -> usize {
        self.adj_t.len()
    }

    pub fn init_params(&self, rng: &mut impl rand::Rng) -> Result<ModelParams> {
        ModelParams::init(&self.cfg, self.partitions(), rng)
    }

    /// `sum_p A_p-aggregation(x) mixed by W_p`, no bias.
    pub fn gcn(&self, tape: &mut Tape, x: Var, weights: &[Var]) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let [b, c, t, v] = <[usize; 4]>::try_from(shape.as_slice())
            .map_err(|_| config_err(format!("gcn input must be [B,C,T,V], got {shape:?}")))?;
        if v != self.cfg.v {
            return Err(depthcut_core::TensorError::Shape {
                op: "gcn",
                lhs: shape.clone(),
                rhs: vec![self.cfg.v, self.cfg.v],
            }
            .into());
        }
        if weights.len() != self.adj_t.len() {
            return Err(config_err(format!(
                "{} gcn weights for {} partitions",
                weights.len(),
                self.adj_t.len()
            )));
        }
        let flat = tape.reshape(x, &[b * c * t, v])?;
        let mut acc: Option<Var> = None;
        for (a, &w) in self.adj_t.iter().zip(weights) {
            let a = tape.constant(a.clone());
            let agg = tape.matmul(flat, a)?;
            let agg = tape.reshape(agg, &[b, c, t, v])?;
            let mixed = tape.channel_mix(agg, w)?;
            acc = Some(match acc {
                Some(s) => tape.add(s, mixed)?,
                None => mixed,
            });
        }
        Ok(acc.expect("at least one partition"))
    }

    #[allow(clippy::too_many_arguments)]
    fn bn(
        &self,
        tape: &mut Tape,
        x: Var,
        params: &ModelParams,
        bound: &Bound,
        layer: usize,
        which: usize,
        train: bool,
        stats: &mut Vec<ObservedStats>,
    ) -> Result<Var> {
        let gamma = bound.var(&bn_name(layer, which, "gamma"))?;
        let beta = bound.var(&bn_name(layer, which, "beta"))?;
        let eps = self.cfg.bn_eps;
        if train {
            let (y, s) = tape.batchnorm(x, gamma, beta, BnMode::Train { eps })?;
            stats.push(ObservedStats {
                layer,
                which,
                stats: s.expect("train mode reports statistics"),
            });
            Ok(y)
        } else {
            let mean = params.get(&bn_name(layer, which, "mean"))?.data();
            let var = params.get(&bn_name(layer, which, "var"))?.data();
            Ok(tape.batchnorm(x, gamma, beta, BnMode::Eval { mean, var, eps })?.0)
        }
    }

    /// GCN, BN, act, temporal conv, BN, act.
    #[allow(clippy::too_many_arguments)]
    pub fn layer_forward(
        &self,
        tape: &mut Tape,
        layer: usize,
        x: Var,
        params: &ModelParams,
        bound: &Bound,
        acts: &mut dyn SiteActivation,
        train: bool,
        stats: &mut Vec<ObservedStats>,
    ) -> Result<Var> {
        let weights: Vec<Var> = (0..self.partitions())
            .map(|p| bound.var(&gcn_weight(layer, p)))
            .collect::<Result<_>>()?;
        let y = self.gcn(tape, x, &weights)?;
        let y = self.bn(tape, y, params, bound, layer, 1, train, stats)?;
        let y = acts.apply(tape, 2 * layer, y)?;
        let kernel = bound.var(&tcn_kernel(layer))?;
        let bias = bound.var(&tcn_bias(layer))?;
        let y = tape.temporal_conv(y, kernel, Some(bias))?;
        let y = self.bn(tape, y, params, bound, layer, 2, train, stats)?;
        acts.apply(tape, 2 * layer + 1, y)
    }

    /// Full model on a `[B * persons, C, T, V]` input; persons are averaged
    /// after pooling so logits are `[B, num_classes]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &ModelParams,
        bound: &Bound,
        x: Var,
        acts: &mut dyn SiteActivation,
        mode: Mode<'_>,
    ) -> Result<ForwardOut> {
        let shape = tape.shape(x).to_vec();
        let cfg = &self.cfg;
        if shape.len() != 4
            || shape[1] != cfg.in_channels()
            || shape[2] != cfg.t
            || shape[3] != cfg.v
            || shape[0] % cfg.persons != 0
        {
            return Err(config_err(format!(
                "input {shape:?} does not match [B*{}, {}, {}, {}]",
                cfg.persons,
                cfg.in_channels(),
                cfg.t,
                cfg.v
            )));
        }
        let train = mode.is_train();
        let mut stats = Vec::new();
        let mut features = Vec::with_capacity(cfg.layers());
        let mut h = x;
        for layer in 0..cfg.layers() {
            h = self.layer_forward(tape, layer, h, params, bound, acts, train, &mut stats)?;
            features.push(h);
        }
        let mut pooled = tape.global_avg_pool(h)?;
        if cfg.persons > 1 {
            let b = shape[0] / cfg.persons;
            let r = tape.reshape(pooled, &[b, cfg.persons, cfg.final_channels()])?;
            pooled = tape.mean(r, &[1])?;
        }
        if let Mode::Train { dropout: Some(rng) } = mode {
            pooled = tape.dropout(pooled, cfg.dropout, true, rng)?;
        }
        let logits = tape.linear(pooled, bound.var(FC_W)?, Some(bound.var(FC_B)?))?;
        Ok(ForwardOut {
            logits,
            features,
            stats,
        })
    }

    /// Eval-mode logits for a whole input tensor, processed in batches.
    pub fn infer(
        &self,
        params: &ModelParams,
        plan: &ActivationPlan,
        x: &Tensor,
        batch: usize,
    ) -> Result<Tensor> {
        plan.check(self.cfg.sites(), self.cfg.v, params)?;
        let per = self.cfg.persons;
        let n = x.shape()[0] / per;
        let k = self.cfg.num_classes;
        let mut out = Vec::with_capacity(n * k);
        let batch = batch.max(1);
        for start in (0..n).step_by(batch) {
            let end = (start + batch).min(n);
            let rows: Vec<usize> = (start * per..end * per).collect();
            let xb = x.select_rows(&rows);
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, false);
            let mut acts = plan.activation(&bound)?;
            let xv = tape.constant(xb);
            let f = self.forward(&mut tape, params, &bound, xv, acts.as_mut(), Mode::Eval)?;
            out.extend_from_slice(tape.value(f.logits).data());
        }
        Ok(Tensor::new([n, k], out)?)
    }
}

/// Folds observed batch statistics into the running buffers,
/// `running = (1 - m) * running + m * batch` with the unbiased variance.
pub fn update_running_stats(
    params: &mut ModelParams,
    observed: &[ObservedStats],
    momentum: f64,
) -> Result<()> {
    for o in observed {
        let n = o.stats.count as f64;
        let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        let mean = params
            .tensors
            .get_mut(&bn_name(o.layer, o.which, "mean"))
            .ok_or_else(|| config_err("missing running mean"))?;
        for (r, &b) in mean.data_mut().iter_mut().zip(&o.stats.mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        let var = params
            .tensors
            .get_mut(&bn_name(o.layer, o.which, "var"))
            .ok_or_else(|| config_err("missing running var"))?;
        for (r, &b) in var.data_mut().iter_mut().zip(&o.stats.var) {
            *r = (1.0 - momentum) * *r + momentum * b * unbias;
        }
    }
    Ok(())
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let pred = argmax_rows(logits);
    let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
    hits as f64 / labels.len().max(1) as f64
}
