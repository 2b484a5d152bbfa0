#![allow(dead_code)]

use depthcut_core::Tensor;
use depthcut_model::distill::replace_with_mask;
use depthcut_model::params::{bn_name, poly_name};
use depthcut_model::{ActivationPlan, Checkpoint, Mask, Stgcn, StgcnConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn small_cfg(channels: &str, v: usize, t: usize) -> StgcnConfig {
    let mut cfg = StgcnConfig::with_channels(channels).unwrap();
    cfg.v = v;
    cfg.t = t;
    cfg
}

pub fn rand_input(cfg: &StgcnConfig, rows: usize, seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_fn([rows, cfg.in_channels(), cfg.t, cfg.v], |_| r.random_range(-1.0..1.0))
}

/// Random weights, non-trivial batch norm, and random polynomial
/// coefficients on the kept nodes of `mask` (identity plan when `None`).
pub fn poly_checkpoint(cfg: &StgcnConfig, mask: Option<&Mask>, seed: u64) -> Checkpoint {
    let model = Stgcn::new(cfg.clone()).unwrap();
    let mut r = rng(seed);
    let mut params = model.init_params(&mut r).unwrap();
    for l in 0..cfg.layers() {
        for which in [1, 2] {
            for (field, lo, hi) in [("gamma", 0.5, 1.5), ("beta", -0.3, 0.3), ("mean", -0.3, 0.3), ("var", 0.5, 2.0)] {
                let t = params.tensors.get_mut(&bn_name(l, which, field)).unwrap();
                t.data_mut().iter_mut().for_each(|x| *x = r.random_range(lo..hi));
            }
        }
    }
    let Some(mask) = mask else {
        return Checkpoint::new(cfg.clone(), params, ActivationPlan::Identity);
    };
    let (mut params, plan) = replace_with_mask(&params, mask, 0.01);
    for s in 0..mask.sites() {
        for (coeff, lo, hi) in [("w2", -5.0, 5.0), ("w1", 0.5, 1.2), ("b", -0.1, 0.1)] {
            if let Some(t) = params.tensors.get_mut(&poly_name(s, coeff)) {
                t.data_mut().iter_mut().for_each(|x| *x = r.random_range(lo..hi));
            }
        }
    }
    Checkpoint::new(cfg.clone(), params, plan)
}

pub fn plain_logits(ck: &Checkpoint, x: &Tensor) -> Tensor {
    let model = Stgcn::new(ck.config.clone()).unwrap();
    model.infer(&ck.params, &ck.plan, x, 64).unwrap()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let den: f64 = b.iter().map(|y| y.abs()).fold(0.0, f64::max).max(1e-12);
    num / den
}

/// Small random architecture with a random structural mask.
pub fn random_model(seed: u64) -> Checkpoint {
    let mut r = rng(seed);
    let layers = r.random_range(1..4);
    let channels: Vec<String> = std::iter::once(r.random_range(1..4))
        .chain((0..layers).map(|_| r.random_range(1..5)))
        .map(|c: usize| c.to_string())
        .collect();
    let mut cfg = small_cfg(&channels.join("-"), r.random_range(2..5), r.random_range(3..7));
    cfg.k = if r.random_bool(0.5) { 1 } else { 3 };
    cfg.num_classes = r.random_range(2..4).min(cfg.layer_channels.iter().copied().max().unwrap().max(2));
    let counts: Vec<usize> = (0..layers).map(|_| r.random_range(0..3)).collect();
    let mask = Mask::from_layer_counts(&counts, cfg.v).unwrap();
    poly_checkpoint(&cfg, Some(&mask), seed.wrapping_add(1000))
}
