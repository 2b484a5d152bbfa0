use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

/// Binary keep/remove indicator per (activation site, node). Site `2i` is
/// the first activation of layer `i`, site `2i + 1` the second.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    sites: usize,
    v: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn filled(sites: usize, v: usize, value: bool) -> Self {
        Mask {
            sites,
            v,
            bits: vec![value; sites * v],
        }
    }

    pub fn from_rows(rows: &[Vec<bool>]) -> Result<Self> {
        let v = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != v) {
            return Err(config_err("mask rows have different lengths"));
        }
        Ok(Mask {
            sites: rows.len(),
            v,
            bits: rows.concat(),
        })
    }

    /// Mask in which layer `i` keeps `counts[i]` activations on every node:
    /// 2 keeps both sites, 1 keeps the first, 0 keeps none.
    pub fn from_layer_counts(counts: &[usize], v: usize) -> Result<Self> {
        let mut m = Mask::filled(2 * counts.len(), v, false);
        for (layer, &c) in counts.iter().enumerate() {
            if c > 2 {
                return Err(config_err(format!("layer {layer} count {c} exceeds 2")));
            }
            for node in 0..v {
                m.set(2 * layer, node, c >= 1);
                m.set(2 * layer + 1, node, c == 2);
            }
        }
        Ok(m)
    }

    /// Structural mask with `effective` surviving layer-equivalents, removed
    /// from the last layers first (each layer drops its second site first).
    pub fn with_effective(layers: usize, v: usize, effective: usize) -> Result<Self> {
        if effective > 2 * layers {
            return Err(config_err(format!(
                "{effective} effective layers exceed the {} sites",
                2 * layers
            )));
        }
        let mut counts = vec![2usize; layers];
        let mut drop = 2 * layers - effective;
        for c in counts.iter_mut().rev() {
            let d = drop.min(2);
            *c -= d;
            drop -= d;
        }
        Self::from_layer_counts(&counts, v)
    }

    pub fn sites(&self) -> usize {
        self.sites
    }

    pub fn v(&self) -> usize {
        self.v
    }

    pub fn layers(&self) -> usize {
        self.sites / 2
    }

    pub fn get(&self, site: usize, node: usize) -> bool {
        self.bits[site * self.v + node]
    }

    pub fn set(&mut self, site: usize, node: usize, value: bool) {
        self.bits[site * self.v + node] = value;
    }

    pub fn row(&self, site: usize) -> &[bool] {
        &self.bits[site * self.v..(site + 1) * self.v]
    }

    pub fn rows(&self) -> Vec<Vec<bool>> {
        (0..self.sites).map(|s| self.row(s).to_vec()).collect()
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Surviving non-linear sites in layer units, `count / V`.
    pub fn effective(&self) -> f64 {
        if self.v == 0 {
            0.0
        } else {
            self.count() as f64 / self.v as f64
        }
    }

    /// Per-node activation count of `node` in `layer`.
    pub fn node_count(&self, layer: usize, node: usize) -> usize {
        usize::from(self.get(2 * layer, node)) + usize::from(self.get(2 * layer + 1, node))
    }

    /// Shared per-node count of each layer, `None` where nodes disagree.
    pub fn layer_counts(&self) -> Vec<Option<usize>> {
        (0..self.layers())
            .map(|l| {
                let c0 = self.node_count(l, 0);
                (1..self.v).all(|n| self.node_count(l, n) == c0).then_some(c0)
            })
            .collect()
    }

    /// Every node of every layer keeps the same number of activations.
    pub fn is_structural(&self) -> bool {
        self.sites % 2 == 0 && self.layer_counts().iter().all(Option::is_some)
    }

    /// Nodes kept at each site, as 0/1 values for serialization.
    pub fn to_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}
