//! Checkpoint to unfused circuit.
//!
//! Linear maps use the diagonal method: output slot `o*T + t` of node `k`
//! collects `rot(x_j, d*T + e)` weighted by a mask indexed by output slot.
//! Batch norm and the polynomial coefficient products appear as separate
//! plaintext-multiply/rescale pairs tagged [`Stage::Scale`]; fusion removes them.

use std::collections::BTreeMap;

use depthcut_model::params::{gcn_weight, poly_name, tcn_bias, tcn_kernel, FC_B, FC_W};
use depthcut_model::{ActivationPlan, Checkpoint, Mask, SkeletonGraph};

use crate::circuit::{Builder, Circuit, NodeId, Stage};
use crate::error::{HeError, Result};
use crate::layout::PackingLayout;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LowerOptions {
    /// Emit pooling and the classifier; otherwise every layer's node
    /// outputs are circuit outputs.
    pub readout: bool,
    /// Insert a one-level repack after this layer.
    pub repack_after: Option<usize>,
}

impl LowerOptions {
    pub fn full(repack_after: Option<usize>) -> Self {
        LowerOptions {
            readout: true,
            repack_after,
        }
    }
}

/// Output name of node `k` after layer `l` when readout is off.
pub fn layer_output_name(layer: usize, node: usize) -> String {
    format!("layer{layer}.node{node}")
}

pub const LOGITS: &str = "logits";

/// One term of a linear map: `mask * rot(source, offset)`.
#[derive(Clone, Debug)]
pub(crate) struct Term {
    pub src: usize,
    pub offset: isize,
    pub mask: Vec<f64>,
}

/// Emits several linear maps over shared sources. Each (source, offset)
/// rotation is computed once and feeds every map that needs it; each map
/// is rescaled once after accumulation.
/// Masks accumulated per rotation, tagged with the map they feed.
type RotationGroups = BTreeMap<(usize, isize), Vec<(usize, Vec<f64>)>>;

pub(crate) fn emit_linear(b: &mut Builder, srcs: &[NodeId], maps: Vec<Vec<Term>>, stage: Stage) -> Vec<NodeId> {
    let block = b.c.block;
    let mut by_rot: RotationGroups = BTreeMap::new();
    for (m, terms) in maps.into_iter().enumerate() {
        if terms.is_empty() {
            by_rot.entry((0, 0)).or_default().push((m, vec![0.0; block]));
        }
        for t in terms {
            by_rot.entry((t.src, t.offset)).or_default().push((m, t.mask));
        }
    }
    let n_maps = by_rot.values().flatten().map(|(m, _)| m + 1).max().unwrap_or(0);
    let mut acc: Vec<Option<NodeId>> = vec![None; n_maps];
    for ((src, off), uses) in by_rot {
        let r = b.rot(srcs[src], off, stage);
        for (m, mask) in uses {
            let p = b.pmult(r, mask, stage);
            acc[m] = Some(match acc[m] {
                Some(a) => b.add(a, p, stage),
                None => p,
            });
        }
    }
    acc.into_iter()
        .map(|a| b.rescale(a.expect("every map has a term"), stage))
        .collect()
}

/// Per-node `sum_p sum_j A_p[k][j] * W_p x_j` with `A_p` row-major V x V
/// and `W_p` row-major `[cout, cin]`.
pub(crate) fn emit_graph_conv(
    b: &mut Builder,
    partitions: &[Vec<f64>],
    weights: &[Vec<f64>],
    cin: usize,
    cout: usize,
    t: usize,
    xs: &[NodeId],
) -> Vec<NodeId> {
    let v = xs.len();
    let block = b.c.block;
    let mut maps = Vec::with_capacity(v);
    for k in 0..v {
        let mut terms = Vec::new();
        for j in 0..v {
            let parts: Vec<(f64, &Vec<f64>)> = partitions
                .iter()
                .zip(weights)
                .map(|(a, w)| (a[k * v + j], w))
                .filter(|(a, _)| *a != 0.0)
                .collect();
            if parts.is_empty() {
                continue;
            }
            let mixed = |o: usize, c: usize| parts.iter().map(|(a, w)| a * w[o * cin + c]).sum::<f64>();
            for d in -(cout as isize - 1)..cin as isize {
                let mut mask = vec![0.0; block];
                let mut any = false;
                for o in 0..cout {
                    let c = o as isize + d;
                    if c < 0 || c >= cin as isize {
                        continue;
                    }
                    let m = mixed(o, c as usize);
                    if m != 0.0 {
                        mask[o * t..(o + 1) * t].fill(m);
                        any = true;
                    }
                }
                if any {
                    terms.push(Term {
                        src: j,
                        offset: d * t as isize,
                        mask,
                    });
                }
            }
        }
        maps.push(terms);
    }
    emit_linear(b, xs, maps, Stage::Kernel)
}

/// Standalone graph convolution over `V = xs` input ciphertexts laid out
/// as in `layout`; outputs `node0..`.
pub fn lower_graph_conv(
    partitions: &[Vec<f64>],
    weights: &[Vec<f64>],
    cin: usize,
    cout: usize,
    layout: &PackingLayout,
) -> Result<Circuit> {
    let v = layout.v;
    if partitions.len() != weights.len()
        || partitions.iter().any(|a| a.len() != v * v)
        || weights.iter().any(|w| w.len() != cin * cout)
        || cin.max(cout) > layout.channels
    {
        return Err(dims_err("graph convolution operands do not match the layout".into()));
    }
    let mut b = Builder::new(layout.block, layout.slots);
    let xs: Vec<NodeId> = (0..v).map(|k| b.input(format!("node{k}"))).collect();
    let ys = emit_graph_conv(&mut b, partitions, weights, cin, cout, layout.t, &xs);
    for (k, y) in ys.into_iter().enumerate() {
        b.output(format!("node{k}"), y);
    }
    Ok(b.finish())
}

fn dims_err(msg: String) -> HeError {
    HeError::Compile(msg)
}

struct Lowerer<'a> {
    ck: &'a Checkpoint,
    graph: SkeletonGraph,
    t: usize,
    v: usize,
    block: usize,
    b: Builder,
}

impl Lowerer<'_> {
    fn param(&self, name: &str) -> Result<&[f64]> {
        Ok(self.ck.params.get(name)?.data())
    }

    /// Block vector holding `vals[o]` at every frame of channel `o`.
    fn per_channel(&self, vals: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.block];
        for (o, &x) in vals.iter().enumerate() {
            out[o * self.t..(o + 1) * self.t].fill(x);
        }
        out
    }

    fn constant(&self, x: f64, channels: usize) -> Vec<f64> {
        self.per_channel(&vec![x; channels])
    }

    fn gcn(&mut self, layer: usize, xs: &[NodeId]) -> Result<Vec<NodeId>> {
        let cfg = &self.ck.config;
        let (cin, cout) = (cfg.layer_channels[layer], cfg.out_channels(layer));
        let weights: Vec<Vec<f64>> = (0..self.graph.partitions().len())
            .map(|p| self.param(&gcn_weight(layer, p)).map(<[f64]>::to_vec))
            .collect::<Result<_>>()?;
        Ok(emit_graph_conv(&mut self.b, self.graph.partitions(), &weights, cin, cout, self.t, xs))
    }

    fn tconv(&mut self, layer: usize, xs: &[NodeId]) -> Result<Vec<NodeId>> {
        let co = self.ck.config.out_channels(layer);
        let t = self.t;
        let kernel = self.param(&tcn_kernel(layer))?.to_vec();
        let bias = self.per_channel(self.param(&tcn_bias(layer))?);
        let ksize = kernel.len() / (co * co);
        let half = (ksize / 2) as isize;
        let mut shared = Vec::new();
        for d in -(co as isize - 1)..co as isize {
            for q in 0..ksize {
                let e = q as isize - half;
                let mut mask = vec![0.0; self.block];
                let mut any = false;
                for o in 0..co {
                    let c = o as isize + d;
                    if c < 0 || c >= co as isize {
                        continue;
                    }
                    let w = kernel[(o * co + c as usize) * ksize + q];
                    if w == 0.0 {
                        continue;
                    }
                    for ti in 0..t {
                        let src = ti as isize + e;
                        if src >= 0 && src < t as isize {
                            mask[o * t + ti] = w;
                            any = true;
                        }
                    }
                }
                if any {
                    shared.push((d * t as isize + e, mask));
                }
            }
        }
        let maps = (0..xs.len())
            .map(|k| {
                shared
                    .iter()
                    .map(|(off, mask)| Term {
                        src: k,
                        offset: *off,
                        mask: mask.clone(),
                    })
                    .collect()
            })
            .collect();
        let ys = emit_linear(&mut self.b, xs, maps, Stage::Kernel);
        Ok(ys
            .into_iter()
            .map(|y| self.b.add_plain(y, bias.clone(), Stage::Kernel))
            .collect())
    }

    fn batchnorm(&mut self, layer: usize, which: usize, xs: &[NodeId]) -> Result<Vec<NodeId>> {
        let (scale, shift) = self.ck.bn_affine(layer, which)?;
        let (scale, shift) = (self.per_channel(&scale), self.per_channel(&shift));
        Ok(xs
            .iter()
            .map(|&x| {
                let y = self.b.pmult(x, scale.clone(), Stage::Scale);
                let y = self.b.rescale(y, Stage::Scale);
                self.b.add_plain(y, shift.clone(), Stage::Scale)
            })
            .collect())
    }

    /// `c*w2*y^2 + w1*y + b` as `((c*w2*y + w1) * y) + b`.
    fn activation(&mut self, site: usize, channels: usize, xs: &mut [NodeId], mask: &Mask, c: f64) -> Result<()> {
        if !mask.row(site).iter().any(|&k| k) {
            return Ok(());
        }
        let w2 = self.param(&poly_name(site, "w2"))?.to_vec();
        let w1 = self.param(&poly_name(site, "w1"))?.to_vec();
        let bias = self.param(&poly_name(site, "b"))?.to_vec();
        let ones = self.constant(1.0, channels);
        for (k, x) in xs.iter_mut().enumerate() {
            if !mask.get(site, k) {
                continue;
            }
            let y = *x;
            let inner = self.b.pmult(y, self.constant(c * w2[k], channels), Stage::Scale);
            let inner = self.b.rescale(inner, Stage::Scale);
            let inner = self.b.add_plain(inner, self.constant(w1[k], channels), Stage::Scale);
            let y1 = self.b.pmult(y, ones.clone(), Stage::Scale);
            let y1 = self.b.rescale(y1, Stage::Scale);
            let q = self.b.cmult(y1, inner, Stage::Nonlinear);
            let q = self.b.rescale(q, Stage::Nonlinear);
            *x = self.b.add_plain(q, self.constant(bias[k], channels), Stage::Nonlinear);
        }
        Ok(())
    }

    fn repack(&mut self, channels: usize, xs: &mut [NodeId]) {
        let ones = self.constant(1.0, channels);
        for x in xs.iter_mut() {
            let y = self.b.pmult(*x, ones.clone(), Stage::Readout);
            *x = self.b.rescale(y, Stage::Readout);
        }
    }

    fn readout(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let cfg = &self.ck.config;
        let (t, cf, classes) = (self.t, cfg.final_channels(), cfg.num_classes);
        if classes * t > self.block {
            return Err(dims_err(format!(
                "{classes} classes do not fit a block of {} slots",
                self.block
            )));
        }
        let total = self.b.sum(xs.to_vec(), Stage::Readout);
        let mut acc = total;
        if t.is_power_of_two() {
            let mut step = 1;
            while step < t {
                let r = self.b.rot(acc, step as isize, Stage::Readout);
                acc = self.b.add(acc, r, Stage::Readout);
                step *= 2;
            }
        } else {
            let rots: Vec<NodeId> = (1..t).map(|s| self.b.rot(total, s as isize, Stage::Readout)).collect();
            for r in rots {
                acc = self.b.add(acc, r, Stage::Readout);
            }
        }
        let mut pool = vec![0.0; self.block];
        for c in 0..cf {
            pool[c * t] = 1.0 / (t * self.v) as f64;
        }
        let pooled = self.b.pmult(acc, pool, Stage::Readout);
        let pooled = self.b.rescale(pooled, Stage::Readout);
        let fcw = self.param(FC_W)?.to_vec();
        let fcb = self.param(FC_B)?.to_vec();
        let mut terms = Vec::new();
        for d in -(classes as isize - 1)..cf as isize {
            let mut mask = vec![0.0; self.block];
            let mut any = false;
            for o in 0..classes {
                let c = o as isize + d;
                if c >= 0 && c < cf as isize {
                    mask[o * t] = fcw[c as usize * classes + o];
                    any = true;
                }
            }
            if any {
                terms.push(Term {
                    src: 0,
                    offset: d * t as isize,
                    mask,
                });
            }
        }
        let logits = emit_linear(&mut self.b, &[pooled], vec![terms], Stage::Readout)[0];
        let mut bias = vec![0.0; self.block];
        for (o, &x) in fcb.iter().enumerate() {
            bias[o * t] = x;
        }
        Ok(self.b.add_plain(logits, bias, Stage::Readout))
    }
}

/// Lowers a checkpoint with a polynomial (or identity) plan to one
/// ciphertext group's circuit: inputs `node0..node{V-1}`.
pub fn lower_model(ck: &Checkpoint, layout: &PackingLayout, opts: &LowerOptions) -> Result<Circuit> {
    let cfg = &ck.config;
    cfg.validate()?;
    let (mask, c) = match &ck.plan {
        ActivationPlan::Poly { mask, c } => (mask.clone(), *c),
        ActivationPlan::Identity => (Mask::filled(cfg.sites(), cfg.v, false), 0.0),
        ActivationPlan::AllRelu | ActivationPlan::MaskedRelu { .. } => {
            return Err(HeError::Compile(
                "ReLU has no encrypted evaluation; replace activations with polynomials first".into(),
            ))
        }
    };
    ck.plan.check(cfg.sites(), cfg.v, &ck.params)?;
    let max_ch = cfg.layer_channels.iter().copied().max().unwrap_or(0);
    if layout.t != cfg.t || layout.v != cfg.v || layout.channels < max_ch {
        return Err(dims_err(format!(
            "layout (C={}, T={}, V={}) cannot hold the model (C={max_ch}, T={}, V={})",
            layout.channels, layout.t, layout.v, cfg.t, cfg.v
        )));
    }
    if let Some(r) = opts.repack_after {
        if r >= cfg.layers() {
            return Err(dims_err(format!("repack after layer {r} of {}", cfg.layers())));
        }
    }
    let mut lw = Lowerer {
        ck,
        graph: SkeletonGraph::for_config(cfg)?,
        t: cfg.t,
        v: cfg.v,
        block: layout.block,
        b: Builder::new(layout.block, layout.slots),
    };
    let mut xs: Vec<NodeId> = (0..cfg.v).map(|k| lw.b.input(format!("node{k}"))).collect();
    for layer in 0..cfg.layers() {
        let co = cfg.out_channels(layer);
        xs = lw.gcn(layer, &xs)?;
        xs = lw.batchnorm(layer, 1, &xs)?;
        lw.activation(2 * layer, co, &mut xs, &mask, c)?;
        xs = lw.tconv(layer, &xs)?;
        xs = lw.batchnorm(layer, 2, &xs)?;
        lw.activation(2 * layer + 1, co, &mut xs, &mask, c)?;
        if opts.repack_after == Some(layer) {
            lw.repack(co, &mut xs);
        }
        if !opts.readout {
            for (k, &x) in xs.iter().enumerate() {
                lw.b.output(layer_output_name(layer, k), x);
            }
        }
    }
    if opts.readout {
        let logits = lw.readout(&xs)?;
        lw.b.output(LOGITS, logits);
    }
    Ok(lw.b.finish())
}
