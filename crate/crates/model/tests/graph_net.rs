mod common;

use common::{jitter_bn, naive_forward, rand_tensor, rng, small_cfg};
use depthcut_core::gradcheck::gradcheck;
use depthcut_core::{Tape, Tensor};
use depthcut_model::act::{Identity, Relu, SiteActivation};
use depthcut_model::graph::normalize_adjacency;
use depthcut_model::net::ObservedStats;
use depthcut_model::params::gcn_weight;
use depthcut_model::{
    ActivationPlan, Mask, ModelError, Mode, Partitioning, SkeletonGraph, Stgcn, StgcnConfig,
};
use rand::Rng;

fn dense_normalize(a: &[f64], v: usize) -> Vec<f64> {
    let mut ai = a.to_vec();
    for i in 0..v {
        ai[i * v + i] += 1.0;
    }
    let d: Vec<f64> = (0..v).map(|i| (0..v).map(|j| ai[i * v + j]).sum::<f64>()).collect();
    let mut out = vec![0.0; v * v];
    for i in 0..v {
        for j in 0..v {
            out[i * v + j] = ai[i * v + j] / d[i].sqrt() / d[j].sqrt();
        }
    }
    out
}

#[test]
fn single_node_normalizes_to_one() {
    assert_eq!(normalize_adjacency(&[0.0], 1).unwrap(), vec![1.0]);
}

#[test]
fn two_node_path_is_half_everywhere() {
    let n = normalize_adjacency(&[0.0, 1.0, 1.0, 0.0], 2).unwrap();
    for x in n {
        assert!((x - 0.5).abs() < 1e-15);
    }
}

#[test]
fn normalization_matches_dense_formula() {
    let a = [0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
    let got = normalize_adjacency(&a, 3).unwrap();
    let want = dense_normalize(&a, 3);
    for (g, w) in got.iter().zip(&want) {
        assert!((g - w).abs() < 1e-12);
    }
    let g = SkeletonGraph::ntu25(Partitioning::Single);
    let want = dense_normalize(g.adjacency(), 25);
    for (g, w) in g.normalized().iter().zip(&want) {
        assert!((g - w).abs() < 1e-12);
    }
}

#[test]
fn bad_adjacency_is_rejected() {
    assert!(normalize_adjacency(&[0.0, 1.0, 0.0, 0.0], 2).is_err());
    assert!(normalize_adjacency(&[1.0], 1).is_err());
    assert!(normalize_adjacency(&[0.0, 0.5, 0.5, 0.0], 2).is_err());
}

#[test]
fn spatial_partitions_sum_exactly() {
    let g = SkeletonGraph::ntu25(Partitioning::Spatial);
    assert_eq!(g.partitions().len(), 3);
    for i in 0..25 * 25 {
        let s: f64 = g.partitions().iter().map(|p| p[i]).sum();
        assert_eq!(s, g.normalized()[i]);
    }
}

fn gcn_value(model: &Stgcn, x: &Tensor, weights: &[Tensor]) -> Tensor {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let ws: Vec<_> = weights.iter().map(|w| tape.constant(w.clone())).collect();
    let y = model.gcn(&mut tape, xv, &ws).unwrap();
    tape.value(y).clone()
}

#[test]
fn gcn_single_node_is_channel_mix() {
    let cfg = small_cfg("2-3", 1, 2);
    let model = Stgcn::new(cfg).unwrap();
    let x = Tensor::new([1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let w = Tensor::new([3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
    let y = gcn_value(&model, &x, &[w]);
    assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0, 4.0, 6.0]);
}

#[test]
fn gcn_two_node_path_averages() {
    let cfg = small_cfg("1-1", 2, 1);
    let model = Stgcn::new(cfg).unwrap();
    let x = Tensor::new([1, 1, 1, 2], vec![1.0, 3.0]).unwrap();
    let y = gcn_value(&model, &x, &[Tensor::full([1, 1], 1.0)]);
    for v in y.data() {
        assert!((v - 2.0).abs() < 1e-12);
    }
}

#[test]
fn random_partition_split_matches_single() {
    let v = 6;
    let base = SkeletonGraph::path(v, Partitioning::Single).unwrap();
    let norm = base.normalized().to_vec();
    let mut r = rng(7);
    let mut parts = vec![vec![0.0; v * v]; 3];
    for (i, &w) in norm.iter().enumerate() {
        parts[r.random_range(0..3)][i] = w;
    }
    let split = SkeletonGraph::with_partitions(base.adjacency().to_vec(), v, parts).unwrap();
    let cfg = small_cfg("2-3", v, 4);
    let single = Stgcn::with_graph(cfg.clone(), base).unwrap();
    let multi = Stgcn::with_graph(cfg, split).unwrap();
    let x = rand_tensor(&[2, 2, 4, v], 1);
    let w = rand_tensor(&[3, 2], 2);
    let a = gcn_value(&single, &x, std::slice::from_ref(&w));
    let b = gcn_value(&multi, &x, &[w.clone(), w.clone(), w]);
    assert!(a.max_abs_diff(&b) < 1e-12);
}

#[test]
fn partitions_must_sum() {
    let base = SkeletonGraph::path(3, Partitioning::Single).unwrap();
    let mut p = base.normalized().to_vec();
    p[0] += 1e-3;
    assert!(SkeletonGraph::with_partitions(base.adjacency().to_vec(), 3, vec![p]).is_err());
}

fn layer_value(model: &Stgcn, params: &depthcut_model::ModelParams, x: &Tensor, acts: &mut dyn SiteActivation) -> Tensor {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let mut stats: Vec<ObservedStats> = Vec::new();
    let y = model
        .layer_forward(&mut tape, 0, xv, params, &bound, acts, false, &mut stats)
        .unwrap();
    tape.value(y).clone()
}

#[test]
fn identity_forward_matches_oracle() {
    let cfg = small_cfg("3-4", 5, 6);
    let model = Stgcn::new(cfg.clone()).unwrap();
    let mut p = model.init_params(&mut rng(3)).unwrap();
    jitter_bn(&cfg, &mut p, 4);
    let x = rand_tensor(&[2, 3, 6, 5], 5);
    let want = naive_forward(&cfg, &model.graph, &p, &|_, _, z| z, &x);
    let got = model.infer(&p, &ActivationPlan::Identity, &x, 10).unwrap();
    for (g, w) in got.data().iter().zip(&want) {
        assert!((g - w).abs() < 1e-10, "{g} vs {w}");
    }
}

#[test]
fn relu_layer_on_negative_preactivation_is_zero() {
    let cfg = small_cfg("2-3", 4, 3);
    let model = Stgcn::new(cfg.clone()).unwrap();
    let mut p = model.init_params(&mut rng(9)).unwrap();
    // beta far below zero forces every normalized value negative
    for which in [1, 2] {
        p.insert(depthcut_model::params::bn_name(0, which, "beta"), Tensor::full([3], -100.0));
    }
    let x = rand_tensor(&[1, 2, 3, 4], 1);
    let y = layer_value(&model, &p, &x, &mut Relu);
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn layer_gradient_matches_finite_differences() {
    let cfg = small_cfg("2-3", 4, 5);
    let model = Stgcn::new(cfg.clone()).unwrap();
    let mut p = model.init_params(&mut rng(11)).unwrap();
    jitter_bn(&cfg, &mut p, 12);
    let x = rand_tensor(&[2, 2, 5, 4], 13);
    let w = p.get(&gcn_weight(0, 0)).unwrap().clone();
    let probe = rand_tensor(&[2, 3, 5, 4], 14);
    let check = gradcheck(&[x, w], 1e-5, |tape, vars| {
        let y = model.gcn(tape, vars[0], &[vars[1]]).map_err(to_tensor_err)?;
        let pr = tape.constant(probe.clone());
        let s = tape.mul(y, pr)?;
        tape.sum(s)
    })
    .unwrap();
    assert!(check.max() < 1e-6, "rel err {}", check.max());

    // full layer in train mode through a smooth activation
    let x = rand_tensor(&[2, 2, 5, 4], 15);
    let check = gradcheck(&[x], 1e-5, |tape, vars| {
        let bound = p.bind(tape, false);
        let mut stats = Vec::new();
        let y = model.layer_forward(tape, 0, vars[0], &p, &bound, &mut Square, true, &mut stats)
            .map_err(to_tensor_err)?;
        let pr = tape.constant(probe.clone());
        let s = tape.mul(y, pr)?;
        tape.sum(s)
    })
    .unwrap();
    assert!(check.max() < 1e-6, "rel err {}", check.max());
}

fn to_tensor_err(e: ModelError) -> depthcut_core::TensorError {
    match e {
        ModelError::Tensor(t) => t,
        e => depthcut_core::TensorError::Tape(e.to_string()),
    }
}

struct Square;

impl SiteActivation for Square {
    fn apply(&mut self, tape: &mut Tape, _site: usize, z: depthcut_core::Var) -> depthcut_model::Result<depthcut_core::Var> {
        Ok(tape.square(z)?)
    }
}

#[test]
fn zero_input_with_zero_bias_gives_zero_logits() {
    let cfg = small_cfg("3-4-4", 5, 4);
    let model = Stgcn::new(cfg.clone()).unwrap();
    let mut p = model.init_params(&mut rng(2)).unwrap();
    // default running stats are mean 0, var 1; beta and conv bias start at zero
    p.insert(depthcut_model::params::FC_B, Tensor::zeros([cfg.num_classes]));
    let x = Tensor::zeros([3, 3, 4, 5]);
    let logits = model.infer(&p, &ActivationPlan::AllRelu, &x, 8).unwrap();
    assert!(logits.data().iter().all(|&v| v == 0.0));
}

#[test]
fn preset_logit_shapes() {
    for (name, layers) in [("stgcn-3-128", 3), ("stgcn-3-256", 3), ("stgcn-6-256", 6)] {
        let mut cfg = StgcnConfig::preset(name).unwrap();
        assert_eq!(cfg.layers(), layers);
        cfg.t = 3;
        cfg.k = 3;
        let model = Stgcn::new(cfg.clone()).unwrap();
        let p = model.init_params(&mut rng(1)).unwrap();
        let x = rand_tensor(&[2 * cfg.persons, 3, 3, 25], 2);
        let logits = model.infer(&p, &ActivationPlan::AllRelu, &x, 2).unwrap();
        assert_eq!(logits.shape(), &[2, 60]);
    }
}

#[test]
fn relu_forward_matches_oracle() {
    let mut cfg = small_cfg("3-4-6", 25, 5);
    cfg.partitioning = Partitioning::Spatial;
    let model = Stgcn::new(cfg.clone()).unwrap();
    let mut p = model.init_params(&mut rng(21)).unwrap();
    jitter_bn(&cfg, &mut p, 22);
    let x = rand_tensor(&[3, 3, 5, 25], 23);
    let want = naive_forward(&cfg, &model.graph, &p, &|_, _, z| z.max(0.0), &x);
    let got = model.infer(&p, &ActivationPlan::AllRelu, &x, 2).unwrap();
    for (g, w) in got.data().iter().zip(&want) {
        assert!((g - w).abs() < 1e-10);
    }
    let mut mask = Mask::filled(cfg.sites(), 25, true);
    for s in 0..cfg.sites() {
        for j in 0..25 {
            mask.set(s, j, (s + j) % 3 != 0);
        }
    }
    let m2 = mask.clone();
    let want = naive_forward(&cfg, &model.graph, &p, &move |s, j, z| if m2.get(s, j) { z.max(0.0) } else { z }, &x);
    let got = model.infer(&p, &ActivationPlan::MaskedRelu { mask }, &x, 3).unwrap();
    for (g, w) in got.data().iter().zip(&want) {
        assert!((g - w).abs() < 1e-10);
    }
}

#[test]
fn persons_are_averaged_after_pooling() {
    let mut cfg = small_cfg("3-4", 5, 4);
    cfg.persons = 2;
    let model = Stgcn::new(cfg.clone()).unwrap();
    let mut p = model.init_params(&mut rng(5)).unwrap();
    jitter_bn(&cfg, &mut p, 6);
    let x = rand_tensor(&[4, 3, 4, 5], 7);
    let got = model.infer(&p, &ActivationPlan::AllRelu, &x, 1).unwrap();
    assert_eq!(got.shape(), &[2, cfg.num_classes]);
    // logits are affine in the pooled features, so the person mean commutes
    let mut single = cfg.clone();
    single.persons = 1;
    let m1 = Stgcn::new(single).unwrap();
    let per = m1.infer(&p, &ActivationPlan::AllRelu, &x, 4).unwrap();
    let k = cfg.num_classes;
    for b in 0..2 {
        for c in 0..k {
            let avg = 0.5 * (per.data()[2 * b * k + c] + per.data()[(2 * b + 1) * k + c]);
            assert!((got.data()[b * k + c] - avg).abs() < 1e-12);
        }
    }
}

#[test]
fn plan_shape_mismatch_is_config_error() {
    let cfg = small_cfg("3-4", 5, 4);
    let model = Stgcn::new(cfg).unwrap();
    let p = model.init_params(&mut rng(1)).unwrap();
    let x = rand_tensor(&[1, 3, 4, 5], 1);
    let plan = ActivationPlan::MaskedRelu {
        mask: Mask::filled(4, 5, true),
    };
    assert!(matches!(model.infer(&p, &plan, &x, 1), Err(ModelError::Config(_))));
    let plan = ActivationPlan::Poly {
        mask: Mask::filled(2, 5, true),
        c: 0.01,
    };
    assert!(model.infer(&p, &plan, &x, 1).is_err());
}

struct Counter(Vec<usize>);

impl SiteActivation for Counter {
    fn apply(&mut self, tape: &mut Tape, site: usize, z: depthcut_core::Var) -> depthcut_model::Result<depthcut_core::Var> {
        self.0.push(site);
        Identity.apply(tape, site, z)
    }
}

#[test]
fn each_site_is_visited_once_in_order() {
    let cfg = small_cfg("3-4-4-4", 5, 4);
    let model = Stgcn::new(cfg.clone()).unwrap();
    let p = model.init_params(&mut rng(1)).unwrap();
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape, false);
    let x = tape.constant(rand_tensor(&[1, 3, 4, 5], 1));
    let mut c = Counter(Vec::new());
    model.forward(&mut tape, &p, &bound, x, &mut c, Mode::Eval).unwrap();
    assert_eq!(c.0, (0..cfg.sites()).collect::<Vec<_>>());
}

#[test]
fn wrong_input_shape_is_rejected() {
    let cfg = small_cfg("3-4", 5, 4);
    let model = Stgcn::new(cfg).unwrap();
    let p = model.init_params(&mut rng(1)).unwrap();
    let x = rand_tensor(&[1, 2, 4, 5], 1);
    assert!(matches!(model.infer(&p, &ActivationPlan::AllRelu, &x, 1), Err(ModelError::Config(_))));
}
