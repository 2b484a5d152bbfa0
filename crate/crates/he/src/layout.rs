//! Node-wise slot packing.
//!
//! Every graph node owns its own ciphertexts. Inside a ciphertext samples
//! are laid out batch-major in blocks of `block` slots, and a block holds
//! channel `c`, frame `t` at offset `c * T + t`. `block` is `C * T` rounded up
//! to a power of two so whole blocks tile a ciphertext.

use depthcut_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

/// Cap on how many ciphertexts a node may need before we ask for a larger N.
pub const MAX_CTS_PER_NODE: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackingLayout {
    pub n: usize,
    pub slots: usize,
    pub batch: usize,
    pub channels: usize,
    pub t: usize,
    pub v: usize,
    pub block: usize,
    pub samples_per_ct: usize,
    pub cts_per_node: usize,
}

pub fn plan_packing(batch: usize, channels: usize, t: usize, v: usize, n: usize) -> Result<PackingLayout> {
    if n < 2 || !n.is_power_of_two() {
        return Err(config_err(format!("N = {n} is not a power of two")));
    }
    if batch == 0 || channels == 0 || t == 0 || v == 0 {
        return Err(config_err("batch, channels, T and V must be positive"));
    }
    let slots = n / 2;
    let block = (channels * t).next_power_of_two();
    if block > slots || batch * channels * t > slots * MAX_CTS_PER_NODE {
        return Err(config_err(format!(
            "{batch}x{channels}x{t} values per node do not fit N = {n}; use a larger N"
        )));
    }
    let samples_per_ct = slots / block;
    Ok(PackingLayout {
        n,
        slots,
        batch,
        channels,
        t,
        v,
        block,
        samples_per_ct,
        cts_per_node: batch.div_ceil(samples_per_ct),
    })
}

impl PackingLayout {
    pub fn total_ciphertexts(&self) -> usize {
        self.v * self.cts_per_node
    }

    /// Slot of sample `b` (within its ciphertext), channel `c`, frame `t`.
    pub fn slot(&self, b: usize, c: usize, t: usize) -> usize {
        b * self.block + c * self.t + t
    }

    /// Splits `[B, C, T, V]` into `[group][node]` slot vectors.
    pub fn pack(&self, x: &Tensor) -> Result<Vec<Vec<Vec<f64>>>> {
        let [b, c, t, v] = <[usize; 4]>::try_from(x.shape())
            .map_err(|_| config_err(format!("pack expects [B,C,T,V], got {:?}", x.shape())))?;
        if b > self.batch || c > self.channels || t != self.t || v != self.v {
            return Err(config_err(format!("tensor {:?} does not match the layout", x.shape())));
        }
        let groups = b.div_ceil(self.samples_per_ct).max(1);
        let mut out = vec![vec![vec![0.0; self.slots]; v]; groups];
        for (i, &val) in x.data().iter().enumerate() {
            let j = i % v;
            let ti = (i / v) % t;
            let ci = (i / (v * t)) % c;
            let bi = i / (v * t * c);
            let (g, local) = (bi / self.samples_per_ct, bi % self.samples_per_ct);
            out[g][j][self.slot(local, ci, ti)] = val;
        }
        Ok(out)
    }

    /// Inverse of [`pack`](Self::pack) for `batch` samples of `channels` channels.
    pub fn unpack(&self, cts: &[Vec<Vec<f64>>], batch: usize, channels: usize) -> Tensor {
        let (t, v) = (self.t, self.v);
        Tensor::from_fn([batch, channels, t, v], |i| {
            let j = i % v;
            let ti = (i / v) % t;
            let ci = (i / (v * t)) % channels;
            let bi = i / (v * t * channels);
            cts[bi / self.samples_per_ct][j][self.slot(bi % self.samples_per_ct, ci, ti)]
        })
    }
}
