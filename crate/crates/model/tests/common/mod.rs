#![allow(dead_code)]

use depthcut_core::Tensor;
use depthcut_model::params::{bn_name, gcn_weight, tcn_bias, tcn_kernel, FC_B, FC_W};
use depthcut_model::{ModelParams, SkeletonGraph, StgcnConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_fn(shape.to_vec(), |_| r.random_range(-2.0..2.0))
}

pub fn small_cfg(channels: &str, v: usize, t: usize) -> StgcnConfig {
    let mut cfg = StgcnConfig::with_channels(channels).unwrap();
    cfg.v = v;
    cfg.t = t;
    cfg
}

/// Randomizes running statistics and affine terms so eval-mode batch norm
/// is not the identity.
pub fn jitter_bn(cfg: &StgcnConfig, p: &mut ModelParams, seed: u64) {
    let mut r = rng(seed);
    for l in 0..cfg.layers() {
        for which in [1, 2] {
            for (field, lo, hi) in [("gamma", 0.5, 1.5), ("beta", -0.3, 0.3), ("mean", -0.5, 0.5), ("var", 0.5, 2.0)] {
                let t = p.tensors.get_mut(&bn_name(l, which, field)).unwrap();
                t.data_mut().iter_mut().for_each(|x| *x = r.random_range(lo..hi));
            }
        }
    }
}

/// Straight-line eval-mode forward with explicit loops; `act(site, node, x)`
/// is applied element by element.
pub fn naive_forward(
    cfg: &StgcnConfig,
    graph: &SkeletonGraph,
    p: &ModelParams,
    act: &dyn Fn(usize, usize, f64) -> f64,
    x: &Tensor,
) -> Vec<f64> {
    let (t, v, kk) = (cfg.t, cfg.v, cfg.k);
    let n = x.shape()[0];
    let g = |name: &str| p.get(name).unwrap().data().to_vec();
    let mut logits = Vec::new();
    for b in 0..n {
        let c0 = cfg.in_channels();
        let mut h: Vec<f64> = x.row(b).to_vec();
        let mut cin = c0;
        for l in 0..cfg.layers() {
            let co = cfg.out_channels(l);
            let mut y = vec![0.0; co * t * v];
            for (pi, part) in graph.partitions().iter().enumerate() {
                let w = g(&gcn_weight(l, pi));
                for o in 0..co {
                    for ti in 0..t {
                        for k in 0..v {
                            let mut acc = 0.0;
                            for c in 0..cin {
                                for j in 0..v {
                                    acc += w[o * cin + c] * part[k * v + j] * h[(c * t + ti) * v + j];
                                }
                            }
                            y[(o * t + ti) * v + k] += acc;
                        }
                    }
                }
            }
            let bn = |y: &mut Vec<f64>, which: usize| {
                let (ga, be, me, va) = (
                    g(&bn_name(l, which, "gamma")),
                    g(&bn_name(l, which, "beta")),
                    g(&bn_name(l, which, "mean")),
                    g(&bn_name(l, which, "var")),
                );
                for o in 0..co {
                    for i in 0..t * v {
                        let z = &mut y[o * t * v + i];
                        *z = (*z - me[o]) / (va[o] + cfg.bn_eps).sqrt() * ga[o] + be[o];
                    }
                }
            };
            bn(&mut y, 1);
            for (i, z) in y.iter_mut().enumerate() {
                *z = act(2 * l, i % v, *z);
            }
            let ker = g(&tcn_kernel(l));
            let bias = g(&tcn_bias(l));
            let mut z = vec![0.0; co * t * v];
            for o in 0..co {
                for ti in 0..t {
                    for k in 0..v {
                        let mut acc = bias[o];
                        for c in 0..co {
                            for q in 0..kk {
                                let src = ti as isize + q as isize - (kk / 2) as isize;
                                if src >= 0 && (src as usize) < t {
                                    acc += ker[(o * co + c) * kk + q] * y[(c * t + src as usize) * v + k];
                                }
                            }
                        }
                        z[(o * t + ti) * v + k] = acc;
                    }
                }
            }
            bn(&mut z, 2);
            for (i, e) in z.iter_mut().enumerate() {
                *e = act(2 * l + 1, i % v, *e);
            }
            h = z;
            cin = co;
        }
        let cf = cfg.final_channels();
        let pooled: Vec<f64> = (0..cf)
            .map(|c| h[c * t * v..(c + 1) * t * v].iter().sum::<f64>() / (t * v) as f64)
            .collect();
        let (fw, fb) = (g(FC_W), g(FC_B));
        for k in 0..cfg.num_classes {
            logits.push(fb[k] + (0..cf).map(|c| pooled[c] * fw[c * cfg.num_classes + k]).sum::<f64>());
        }
    }
    logits
}
