mod common;

use common::*;
use depthcut_he::circuit::{Builder, Stage};
use depthcut_he::compile::packing_channels;
use depthcut_he::{execute, fuse, level_account, lower_model, plan_packing, LowerOptions, RuntimeConfig, Simulator};

#[test]
fn fusion_preserves_simulated_outputs() {
    let rt = RuntimeConfig {
        scale_bits: 50,
        ..Default::default()
    };
    for seed in 0..20 {
        let ck = random_model(seed);
        let cfg = &ck.config;
        let layout = plan_packing(3, packing_channels(cfg), cfg.t, cfg.v, 1 << 13).unwrap();
        let unfused = lower_model(&ck, &layout, &LowerOptions::full(None)).unwrap();
        let fused = fuse(&unfused);
        assert!(level_account(&fused).unwrap() < level_account(&unfused).unwrap());
        let inputs = layout.pack(&rand_input(cfg, 3, seed)).unwrap().remove(0);
        let mut sim = Simulator::new(rt.clone(), layout.slots).unwrap();
        let (a, _) = execute(&unfused, &inputs, &mut sim).unwrap();
        let (b, _) = execute(&fused, &inputs, &mut sim).unwrap();
        let rel = rel_err(&b[0], &a[0]);
        assert!(rel < 1e-12, "seed {seed}: relative difference {rel}");
    }
}

#[test]
fn fusion_is_idempotent() {
    let ck = random_model(3);
    let cfg = &ck.config;
    let layout = plan_packing(1, packing_channels(cfg), cfg.t, cfg.v, 1 << 13).unwrap();
    let once = fuse(&lower_model(&ck, &layout, &LowerOptions::full(None)).unwrap());
    let twice = fuse(&once);
    assert_eq!(once.counts(), twice.counts());
    assert_eq!(once.output_depth(), twice.output_depth());
}

#[test]
fn ciphertext_products_block_fusion() {
    let mut b = Builder::new(4, 4);
    let x = b.input("x");
    let sq = b.cmult(x, x, Stage::Nonlinear);
    let sq = b.rescale(sq, Stage::Nonlinear);
    let s = b.pmult(sq, vec![3.0; 4], Stage::Scale);
    let s = b.rescale(s, Stage::Scale);
    b.output("y", s);
    let c = b.finish();
    let f = fuse(&c);
    assert_eq!(f.output_depth(), c.output_depth());
    assert_eq!(f.counts(), c.counts());
    let input = vec![vec![1.0, -2.0, 0.5, 3.0]];
    assert_eq!(f.eval_plain(&input), c.eval_plain(&input));
}

#[test]
fn scaling_chains_fold_into_the_kernel() {
    let mut b = Builder::new(4, 4);
    let x = b.input("x");
    let r = b.rot(x, 1, Stage::Kernel);
    let p = b.pmult(r, vec![2.0; 4], Stage::Kernel);
    let k = b.rescale(p, Stage::Kernel);
    let k = b.add_plain(k, vec![1.0; 4], Stage::Kernel);
    let s = b.pmult(k, vec![0.5, 1.0, 1.5, 2.0], Stage::Scale);
    let s = b.rescale(s, Stage::Scale);
    let s = b.add_plain(s, vec![0.25; 4], Stage::Scale);
    b.output("y", s);
    let c = b.finish();
    assert_eq!(c.output_depth(), 2);
    let f = fuse(&c);
    assert_eq!(f.output_depth(), 1);
    assert_eq!(f.counts().pmult, 1);
    let input = vec![vec![1.0, 2.0, 3.0, 4.0]];
    let (a, b) = (c.eval_plain(&input), f.eval_plain(&input));
    assert!(rel_err(&b[0], &a[0]) < 1e-15);
}
