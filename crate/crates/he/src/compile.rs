//! End-to-end compilation: lower, fuse, check levels, pick parameters.

use depthcut_core::{Container, Tensor};
use depthcut_model::{Checkpoint, StgcnConfig};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::circuit::Circuit;
use crate::error::{config_err, HeError, Result};
use crate::fuse::fuse;
use crate::layout::{plan_packing, PackingLayout};
use crate::levels::{auto_align, check_sync, closed_form_levels, level_account, AlignReport, CompileProfile};
use crate::lower::{lower_model, LowerOptions, LOGITS};
use crate::params::{select_parameters, EncryptionProfile, DEFAULT_SCALE_BITS, MAX_Q_BITS_128};
use crate::sim::{execute, RuntimeConfig, Simulator, Trace};

pub const CIRCUIT_KIND: &str = "circuit";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompileOptions {
    /// Input rows (samples times persons) one run must hold.
    pub batch: usize,
    pub fuse: bool,
    /// Repair level mismatches from unstructured masks instead of failing.
    pub auto_align: bool,
    pub profile: Option<CompileProfile>,
    pub scale_bits: u32,
}

impl Default for CompileOptions {
    fn default() -> Self {
        CompileOptions {
            batch: 1,
            fuse: true,
            auto_align: false,
            profile: None,
            scale_bits: DEFAULT_SCALE_BITS,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Compiled {
    pub circuit: Circuit,
    pub layout: PackingLayout,
    pub profile: EncryptionProfile,
    pub compile_profile: CompileProfile,
    pub config: StgcnConfig,
    pub align: AlignReport,
    /// Level predicted from the mask when the mask is structural.
    pub closed_form: Option<usize>,
}

fn build(ck: &Checkpoint, layout: &PackingLayout, opts: &CompileOptions, lower: &LowerOptions) -> Result<(Circuit, AlignReport)> {
    let mut c = lower_model(ck, layout, lower)?;
    if opts.fuse {
        c = fuse(&c);
    }
    let violations = check_sync(&c);
    if violations.is_empty() {
        return Ok((c, AlignReport::default()));
    }
    if opts.auto_align {
        return Ok(auto_align(&c));
    }
    let v = &violations[0];
    Err(HeError::Sync {
        node: v.node,
        left: v.left,
        right: v.right,
    })
}

/// Channel rows a sample block must hold: every layer width and the logits.
pub fn packing_channels(cfg: &StgcnConfig) -> usize {
    cfg.layer_channels.iter().copied().max().unwrap_or(0).max(cfg.num_classes)
}

/// Layout at the smallest ring dimension at least `n` that holds the batch.
fn fit_layout(batch: usize, cfg: &StgcnConfig, mut n: usize) -> Result<PackingLayout> {
    let largest = MAX_Q_BITS_128.last().expect("bounds table").0;
    loop {
        match plan_packing(batch, packing_channels(cfg), cfg.t, cfg.v, n) {
            Ok(l) => return Ok(l),
            Err(e) if n >= largest => return Err(e),
            Err(_) => n *= 2,
        }
    }
}

pub fn compile(ck: &Checkpoint, opts: &CompileOptions) -> Result<Compiled> {
    let cfg = &ck.config;
    let cp = opts.profile.unwrap_or_else(|| CompileProfile::for_layers(cfg.layers()));
    let lower = LowerOptions::full(cp.repack_after(cfg.layers()));
    let largest = MAX_Q_BITS_128.last().expect("bounds table").0;
    let provisional = fit_layout(opts.batch, cfg, largest)?;
    let (c, _) = build(ck, &provisional, opts, &lower)?;
    let levels = level_account(&c)?;
    let mut profile = select_parameters(levels, cp.base_bits, opts.scale_bits)?;
    let layout = fit_layout(opts.batch, cfg, profile.n)?;
    profile.n = layout.n;
    let (circuit, align) = build(ck, &layout, opts, &lower)?;
    let final_levels = level_account(&circuit)?;
    if final_levels != levels {
        return Err(HeError::Compile(format!(
            "level changed from {levels} to {final_levels} between layouts"
        )));
    }
    let closed_form = match &ck.plan {
        _ if !opts.fuse => None,
        depthcut_model::ActivationPlan::Identity => Some(closed_form_levels(cfg.layers(), 0, cp.repack)),
        plan => plan
            .mask()
            .filter(|m| m.is_structural())
            .map(|m| closed_form_levels(cfg.layers(), m.effective().round() as usize, cp.repack)),
    };
    Ok(Compiled {
        circuit,
        layout,
        profile,
        compile_profile: cp,
        config: cfg.clone(),
        align,
        closed_form,
    })
}

impl Compiled {
    pub fn levels(&self) -> usize {
        self.circuit.input_level
    }

    pub fn groups(&self) -> usize {
        self.layout.cts_per_node
    }

    /// Encrypted inference on `[B * persons, C, T, V]`; returns
    /// `[B, num_classes]` logits and one trace per ciphertext group.
    pub fn infer(&self, x: &Tensor, rt: &RuntimeConfig) -> Result<(Tensor, Vec<Trace>)> {
        let cfg = &self.config;
        let rows = x.shape().first().copied().unwrap_or(0);
        if rows > self.layout.batch || rows % cfg.persons != 0 || rows == 0 {
            return Err(HeError::Argument(format!(
                "{rows} input rows for a circuit holding {} with {} persons per sample",
                self.layout.batch, cfg.persons
            )));
        }
        if rt.scale_bits != self.profile.scale_bits {
            return Err(HeError::Argument(format!(
                "runtime scale bits {} differ from the compiled {}",
                rt.scale_bits, self.profile.scale_bits
            )));
        }
        let groups = self.layout.pack(x)?;
        let out_idx = self
            .circuit
            .outputs
            .iter()
            .position(|(n, _)| n == LOGITS)
            .ok_or_else(|| HeError::Compile("circuit has no logits output".into()))?;
        let mut sim = Simulator::new(rt.clone(), self.layout.slots)?;
        let classes = cfg.num_classes;
        let mut per_row = vec![0.0; rows * classes];
        let mut traces = Vec::with_capacity(groups.len());
        for (g, inputs) in groups.iter().enumerate() {
            let (outs, trace) = execute(&self.circuit, inputs, &mut sim)?;
            let logits = &outs[out_idx];
            for local in 0..self.layout.samples_per_ct {
                let r = g * self.layout.samples_per_ct + local;
                if r >= rows {
                    break;
                }
                for o in 0..classes {
                    per_row[r * classes + o] = logits[self.layout.slot(local, o, 0)];
                }
            }
            traces.push(trace);
        }
        let p = cfg.persons;
        let samples = rows / p;
        let logits = Tensor::from_fn([samples, classes], |i| {
            let (s, o) = (i / classes, i % classes);
            (0..p).map(|q| per_row[(s * p + q) * classes + o]).sum::<f64>() / p as f64
        });
        Ok((logits, traces))
    }

    pub fn to_container(&self) -> Result<Container> {
        let json_err = |e: serde_json::Error| config_err(format!("circuit header: {e}"));
        let meta = json!({
            "circuit": serde_json::to_value(&self.circuit).map_err(json_err)?,
            "layout": serde_json::to_value(&self.layout).map_err(json_err)?,
            "profile": serde_json::to_value(self.profile).map_err(json_err)?,
            "compile_profile": serde_json::to_value(self.compile_profile).map_err(json_err)?,
            "config": serde_json::to_value(&self.config).map_err(json_err)?,
            "align": serde_json::to_value(&self.align).map_err(json_err)?,
            "closed_form": self.closed_form,
        });
        let block = self.circuit.block;
        let flat: Vec<f64> = self.circuit.plaintexts.iter().flatten().copied().collect();
        let pts = Tensor::new([self.circuit.plaintexts.len(), block], flat)
            .map_err(|e| config_err(format!("plaintext blob: {e}")))?;
        let mut c = Container::new(CIRCUIT_KIND).with_meta(meta);
        c.insert("plaintexts", pts);
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        fn field<T: serde::de::DeserializeOwned>(c: &Container, name: &str) -> Result<T> {
            serde_json::from_value(c.meta_field(name)?.clone())
                .map_err(|e| config_err(format!("circuit header field {name}: {e}")))
        }
        let mut circuit: Circuit = field(c, "circuit")?;
        let pts = c.tensor("plaintexts")?;
        if pts.shape().len() != 2 || pts.shape()[1] != circuit.block {
            return Err(config_err(format!("plaintext blob has shape {:?}", pts.shape())));
        }
        circuit.plaintexts = pts.data().chunks(circuit.block.max(1)).map(<[f64]>::to_vec).collect();
        circuit.plaintexts.truncate(pts.shape()[0]);
        Ok(Compiled {
            circuit,
            layout: field(c, "layout")?,
            profile: field(c, "profile")?,
            compile_profile: field(c, "compile_profile")?,
            config: field(c, "config")?,
            align: field(c, "align")?,
            closed_form: field(c, "closed_form")?,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        Ok(self.to_container()?.save(path)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_container(&Container::load(path, Some(CIRCUIT_KIND))?)
    }
}
