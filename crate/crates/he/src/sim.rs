//! Exact-integer simulator with CKKS level and scale semantics.
//!
//! Slots hold `round(x * 2^(e*p))` as `i128`, with `e` the scale exponent
//! (1 after rescale, 2 after a product). Products need scale `p` operands
//! and a level to spend; rescale divides by `2^p` with round-half-even and
//! drops one level. No cryptography is performed.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::circuit::{Circuit, Op, OpCounts};
use crate::error::{HeError, Result};
use crate::params::DEFAULT_SCALE_BITS;

/// Largest encoded magnitude; products are range-checked separately.
const ENCODE_LIMIT: f64 = (1u128 << 120) as f64;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LeveledVector {
    pub slots: Vec<i128>,
    pub level: usize,
    /// Scale as a multiple of the scale bits.
    pub scale: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Noise {
    Off,
    /// Uniform error of the given magnitude added at encryption and after
    /// every product.
    Uniform { magnitude: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuntimeConfig {
    pub scale_bits: u32,
    pub noise: Noise,
    pub seed: u64,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        RuntimeConfig {
            scale_bits: DEFAULT_SCALE_BITS,
            noise: Noise::Off,
            seed: 0,
        }
    }
}

fn level_err(msg: String) -> HeError {
    HeError::Level { node: 0, msg }
}

fn scale_err(msg: String) -> HeError {
    HeError::Scale { node: 0, msg }
}

fn overflow() -> HeError {
    HeError::Range("slot value overflows the integer representation".into())
}

/// Rounds `v / 2^p` to the nearest integer, ties to even.
fn shift_round(v: i128, p: u32) -> i128 {
    let q = v >> p;
    let r = v - (q << p);
    let half = 1i128 << (p - 1);
    if r > half || (r == half && q & 1 == 1) {
        q + 1
    } else {
        q
    }
}

pub struct Simulator {
    cfg: RuntimeConfig,
    slots: usize,
    rng: ChaCha8Rng,
}

impl Simulator {
    pub fn new(cfg: RuntimeConfig, slots: usize) -> Result<Self> {
        if !(1..=60).contains(&cfg.scale_bits) {
            return Err(HeError::Argument(format!("scale bits {} outside 1..=60", cfg.scale_bits)));
        }
        if slots == 0 || !slots.is_power_of_two() {
            return Err(HeError::Argument(format!("slot count {slots} is not a power of two")));
        }
        if let Noise::Uniform { magnitude } = cfg.noise {
            if !(magnitude.is_finite() && magnitude >= 0.0) {
                return Err(HeError::Argument(format!("noise magnitude {magnitude} must be non-negative")));
            }
        }
        let rng = depthcut_core::seed::rng_from_seed(cfg.seed);
        Ok(Simulator { cfg, slots, rng })
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn scale_bits(&self) -> u32 {
        self.cfg.scale_bits
    }

    fn to_fixed(&self, x: f64, scale: u32) -> Result<i128> {
        let y = (x * 2f64.powi((scale * self.cfg.scale_bits) as i32)).round_ties_even();
        if !y.is_finite() || y.abs() >= ENCODE_LIMIT {
            return Err(HeError::Range(format!("value {x} does not fit at scale 2^{}", scale * self.cfg.scale_bits)));
        }
        Ok(y as i128)
    }

    /// Encodes a plaintext of any length dividing the slot count, tiled.
    pub fn encode(&self, values: &[f64]) -> Result<Vec<i128>> {
        if values.is_empty() || self.slots % values.len() != 0 {
            return Err(HeError::Argument(format!(
                "plaintext of {} values does not tile {} slots",
                values.len(),
                self.slots
            )));
        }
        values.iter().map(|&x| self.to_fixed(x, 1)).collect()
    }

    fn add_noise(&mut self, v: &mut LeveledVector) -> Result<()> {
        if let Noise::Uniform { magnitude } = self.cfg.noise {
            if magnitude > 0.0 {
                let unit = 2f64.powi((v.scale * self.cfg.scale_bits) as i32);
                for s in v.slots.iter_mut() {
                    let e = (self.rng.random_range(-magnitude..=magnitude) * unit).round_ties_even() as i128;
                    *s = s.checked_add(e).ok_or_else(overflow)?;
                }
            }
        }
        Ok(())
    }

    /// Values shorter than the slot count are zero-padded.
    pub fn encrypt(&mut self, values: &[f64], level: usize) -> Result<LeveledVector> {
        if values.len() > self.slots {
            return Err(HeError::Argument(format!(
                "{} values exceed {} slots",
                values.len(),
                self.slots
            )));
        }
        let mut slots = vec![0i128; self.slots];
        for (s, &x) in slots.iter_mut().zip(values) {
            *s = self.to_fixed(x, 1)?;
        }
        let mut v = LeveledVector { slots, level, scale: 1 };
        self.add_noise(&mut v)?;
        Ok(v)
    }

    pub fn decrypt(&self, v: &LeveledVector) -> Vec<f64> {
        let unit = 2f64.powi((v.scale * self.cfg.scale_bits) as i32);
        v.slots.iter().map(|&s| s as f64 / unit).collect()
    }

    fn check_len(&self, v: &LeveledVector) -> Result<()> {
        if v.slots.len() != self.slots {
            return Err(HeError::Argument(format!(
                "ciphertext has {} slots, runtime expects {}",
                v.slots.len(),
                self.slots
            )));
        }
        Ok(())
    }

    pub fn add(&self, a: &LeveledVector, b: &LeveledVector) -> Result<LeveledVector> {
        self.check_len(a)?;
        self.check_len(b)?;
        if a.level != b.level {
            return Err(HeError::Sync {
                node: 0,
                left: a.level as i64,
                right: b.level as i64,
            });
        }
        if a.scale != b.scale {
            return Err(scale_err(format!("adding scales {} and {}", a.scale, b.scale)));
        }
        let slots = a
            .slots
            .iter()
            .zip(&b.slots)
            .map(|(x, y)| x.checked_add(*y).ok_or_else(overflow))
            .collect::<Result<_>>()?;
        Ok(LeveledVector {
            slots,
            level: a.level,
            scale: a.scale,
        })
    }

    /// Adds a plaintext encoded at the ciphertext's scale.
    pub fn add_plain(&self, a: &LeveledVector, pt: &[f64]) -> Result<LeveledVector> {
        self.check_len(a)?;
        if pt.is_empty() || self.slots % pt.len() != 0 {
            return Err(HeError::Argument(format!("plaintext of {} values does not tile", pt.len())));
        }
        let enc: Vec<i128> = pt.iter().map(|&x| self.to_fixed(x, a.scale)).collect::<Result<_>>()?;
        let m = enc.len() - 1;
        let slots = a
            .slots
            .iter()
            .enumerate()
            .map(|(i, x)| x.checked_add(enc[i & m]).ok_or_else(overflow))
            .collect::<Result<_>>()?;
        Ok(LeveledVector {
            slots,
            level: a.level,
            scale: a.scale,
        })
    }

    fn check_mult(&self, v: &LeveledVector) -> Result<()> {
        self.check_len(v)?;
        if v.scale != 1 {
            return Err(scale_err(format!("multiplying an operand at scale {} (rescale first)", v.scale)));
        }
        if v.level < 1 {
            return Err(level_err("multiplication needs level >= 1".into()));
        }
        Ok(())
    }

    pub fn pmult(&mut self, a: &LeveledVector, pt: &[f64]) -> Result<LeveledVector> {
        self.check_mult(a)?;
        let enc = self.encode(pt)?;
        let m = enc.len() - 1;
        let slots = a
            .slots
            .iter()
            .enumerate()
            .map(|(i, x)| x.checked_mul(enc[i & m]).ok_or_else(overflow))
            .collect::<Result<_>>()?;
        let mut v = LeveledVector {
            slots,
            level: a.level,
            scale: 2,
        };
        self.add_noise(&mut v)?;
        Ok(v)
    }

    pub fn cmult(&mut self, a: &LeveledVector, b: &LeveledVector) -> Result<LeveledVector> {
        self.check_mult(a)?;
        self.check_mult(b)?;
        if a.level != b.level {
            return Err(HeError::Sync {
                node: 0,
                left: a.level as i64,
                right: b.level as i64,
            });
        }
        let slots = a
            .slots
            .iter()
            .zip(&b.slots)
            .map(|(x, y)| x.checked_mul(*y).ok_or_else(overflow))
            .collect::<Result<_>>()?;
        let mut v = LeveledVector {
            slots,
            level: a.level,
            scale: 2,
        };
        self.add_noise(&mut v)?;
        Ok(v)
    }

    /// Left rotation: slot `i` of the result is slot `i + k` of the input.
    pub fn rot(&self, a: &LeveledVector, k: usize) -> Result<LeveledVector> {
        self.check_len(a)?;
        if k >= self.slots {
            return Err(HeError::Argument(format!("rotation {k} outside 0..{}", self.slots)));
        }
        let mut slots = a.slots.clone();
        slots.rotate_left(k);
        Ok(LeveledVector {
            slots,
            level: a.level,
            scale: a.scale,
        })
    }

    pub fn rescale(&self, a: &LeveledVector) -> Result<LeveledVector> {
        self.check_len(a)?;
        if a.scale != 2 {
            return Err(scale_err(format!("rescaling an operand at scale {}", a.scale)));
        }
        if a.level < 1 {
            return Err(level_err("rescale needs level >= 1".into()));
        }
        let p = self.cfg.scale_bits;
        Ok(LeveledVector {
            slots: a.slots.iter().map(|&x| shift_round(x, p)).collect(),
            level: a.level - 1,
            scale: 1,
        })
    }
}

/// What one circuit execution did.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub counts: OpCounts,
    /// Observed level of every node's result.
    pub node_levels: Vec<usize>,
    pub output_levels: BTreeMap<String, usize>,
    pub wall_seconds: f64,
}

impl Trace {
    /// Nodes whose observed level differs from the static annotation.
    pub fn level_mismatches(&self, c: &Circuit) -> Vec<usize> {
        (0..c.nodes.len())
            .filter(|&i| self.node_levels.get(i).map(|&l| l as i64) != Some(c.level(i)))
            .collect()
    }
}

fn at_node(e: HeError, node: usize) -> HeError {
    match e {
        HeError::Sync { left, right, .. } => HeError::Sync { node, left, right },
        HeError::Scale { msg, .. } => HeError::Scale { node, msg },
        HeError::Level { msg, .. } => HeError::Level { node, msg },
        other => other,
    }
}

fn live(vals: &[Option<LeveledVector>], id: usize, node: usize) -> Result<&LeveledVector> {
    vals[id]
        .as_ref()
        .ok_or_else(|| HeError::Compile(format!("node {node} reads freed or missing value {id}")))
}

/// Runs `c` on one ciphertext group. `inputs[i]` feeds circuit input `i`
/// and is encrypted at the circuit's input level. Returns decrypted outputs
/// in circuit output order.
pub fn execute(c: &Circuit, inputs: &[Vec<f64>], sim: &mut Simulator) -> Result<(Vec<Vec<f64>>, Trace)> {
    if inputs.len() != c.inputs.len() {
        return Err(HeError::Argument(format!(
            "circuit takes {} inputs, got {}",
            c.inputs.len(),
            inputs.len()
        )));
    }
    if c.slots != sim.slots() {
        return Err(HeError::Argument(format!(
            "circuit is built for {} slots, runtime has {}",
            c.slots,
            sim.slots()
        )));
    }
    let start = Instant::now();
    let last = c.last_uses();
    let mut vals: Vec<Option<LeveledVector>> = vec![None; c.nodes.len()];
    let mut trace = Trace {
        node_levels: Vec::with_capacity(c.nodes.len()),
        ..Trace::default()
    };
    for (i, n) in c.nodes.iter().enumerate() {
        let v = match n.op {
            Op::Input { index } => sim.encrypt(&inputs[index], c.input_level),
            Op::Add { a, b } => {
                trace.counts.add += 1;
                sim.add(live(&vals, a, i)?, live(&vals, b, i)?)
            }
            Op::AddPlain { a, pt } => {
                trace.counts.add += 1;
                sim.add_plain(live(&vals, a, i)?, &c.plaintexts[pt])
            }
            Op::PMult { a, pt } => {
                trace.counts.pmult += 1;
                sim.pmult(live(&vals, a, i)?, &c.plaintexts[pt])
            }
            Op::CMult { a, b } => {
                trace.counts.cmult += 1;
                sim.cmult(live(&vals, a, i)?, live(&vals, b, i)?)
            }
            Op::Rot { a, k } => {
                trace.counts.rot += 1;
                sim.rot(live(&vals, a, i)?, k)
            }
            Op::Rescale { a } => {
                trace.counts.rescale += 1;
                sim.rescale(live(&vals, a, i)?)
            }
        }
        .map_err(|e| at_node(e, i))?;
        trace.node_levels.push(v.level);
        vals[i] = Some(v);
        for a in n.op.operands() {
            if last[a] == i {
                vals[a] = None;
            }
        }
    }
    let mut outs = Vec::with_capacity(c.outputs.len());
    for (name, id) in &c.outputs {
        let v = vals[*id].as_ref().expect("outputs stay live");
        trace.output_levels.insert(name.clone(), v.level);
        outs.push(sim.decrypt(v));
    }
    trace.wall_seconds = start.elapsed().as_secs_f64();
    Ok((outs, trace))
}
