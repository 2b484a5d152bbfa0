//! Run configuration: TOML on disk, dotted `key=value` overrides on the
//! command line. Every field has a default, so an empty file is a valid run.

use std::path::{Path, PathBuf};

use depthcut_he::Noise;
use depthcut_model::distill::{DistillConfig, TeacherKind};
use depthcut_model::linearize::LinearizeConfig;
use depthcut_model::params::SgdConfig;
use depthcut_model::train::TeacherConfig;
use depthcut_model::{StgcnConfig, SynthSpec};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_samples: usize,
    pub eval_samples: usize,
    pub noise: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_samples: 400,
            eval_samples: 200,
            noise: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompileConfig {
    pub fuse: bool,
    pub auto_align: bool,
    pub scale_bits: u32,
}

impl Default for CompileConfig {
    fn default() -> Self {
        CompileConfig {
            fuse: true,
            auto_align: false,
            scale_bits: depthcut_he::params::DEFAULT_SCALE_BITS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    /// Eval samples run under encryption; also the batch the circuit is
    /// compiled for.
    pub samples: usize,
    pub noise: Noise,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            samples: 200,
            noise: Noise::Off,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Preset name, see `StgcnConfig::preset`.
    pub model: String,
    /// Root seed; each phase derives its own stream from it.
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Latency table; the built-in illustrative table when unset.
    pub cost_table: Option<PathBuf>,
    /// Also distill a student that keeps every activation, as the cost baseline.
    pub baseline: bool,
    pub data: DataConfig,
    pub teacher: TeacherConfig,
    pub linearize: LinearizeConfig,
    pub distill: DistillConfig,
    pub compile: CompileConfig,
    pub simulate: SimulateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: "stgcn-3-128-desk".into(),
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            cost_table: None,
            baseline: true,
            data: DataConfig::default(),
            teacher: TeacherConfig {
                epochs: 6,
                batch_size: 16,
                sgd: SgdConfig {
                    lr: 0.1,
                    momentum: 0.9,
                    weight_decay: 1e-4,
                    milestones: vec![4],
                    gamma: 0.1,
                },
                bn_momentum: 0.1,
            },
            linearize: LinearizeConfig {
                mu: 0.5,
                epochs: 10,
                batch_size: 16,
                hw_lr: 0.05,
                target_effective: Some(2.0),
                ..LinearizeConfig::default()
            },
            distill: DistillConfig {
                epochs: 6,
                batch_size: 16,
                teacher: TeacherKind::AllRelu,
                sgd: SgdConfig {
                    lr: 0.01,
                    momentum: 0.9,
                    weight_decay: 1e-4,
                    milestones: vec![4],
                    gamma: 0.1,
                },
                ..DistillConfig::default()
            },
            compile: CompileConfig::default(),
            simulate: SimulateConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reads `path` over the defaults and applies `key=value` overrides in
    /// order. A value of `none` clears an optional field.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = toml::Table::try_from(RunConfig::default()).expect("defaults serialize");
        let mut given = toml::Table::new();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("reading {}: {e}", p.display())))?;
            let file = text
                .parse::<toml::Table>()
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            merge(&mut given, file.clone());
            merge(&mut table, file);
        }
        for o in overrides {
            apply_override(&mut given, o)?;
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        let known = toml::Table::try_from(&cfg).expect("config serializes");
        if let Some(k) = unknown_key(&given, &known, "") {
            return Err(CliError::Config(format!("unknown config key {k:?}")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn model_config(&self) -> Result<StgcnConfig> {
        StgcnConfig::preset(&self.model).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn synth_spec(&self) -> Result<SynthSpec> {
        let m = self.model_config()?;
        Ok(SynthSpec {
            v: m.v,
            t: m.t,
            c: m.in_channels(),
            num_classes: m.num_classes,
            persons: m.persons,
            noise: self.data.noise,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.model_config()?;
        let bad = |msg: String| Err(CliError::Config(msg));
        if self.data.train_samples == 0 || self.data.eval_samples == 0 {
            return bad("data.train_samples and data.eval_samples must be positive".into());
        }
        if !(self.data.noise >= 0.0) {
            return bad(format!("data.noise {} must be non-negative", self.data.noise));
        }
        if self.simulate.samples == 0 || self.simulate.samples > self.data.eval_samples {
            return bad(format!(
                "simulate.samples {} must be in 1..={}",
                self.simulate.samples, self.data.eval_samples
            ));
        }
        for (name, bs) in [
            ("teacher", self.teacher.batch_size),
            ("linearize", self.linearize.batch_size),
            ("distill", self.distill.batch_size),
        ] {
            if bs == 0 {
                return bad(format!("{name}.batch_size must be positive"));
            }
        }
        if self.linearize.mu < 0.0 {
            return bad(format!("linearize.mu {} must be non-negative", self.linearize.mu));
        }
        if let Some(t) = self.linearize.target_effective {
            if t < 0.0 || t > m.sites() as f64 {
                return bad(format!("linearize.target_effective {t} outside 0..={}", m.sites()));
            }
        }
        if !(self.distill.c > 0.0) {
            return bad(format!("distill.c {} must be positive", self.distill.c));
        }
        self.distill.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if let Noise::Uniform { magnitude } = self.simulate.noise {
            if !(magnitude >= 0.0) {
                return bad(format!("simulate.noise magnitude {magnitude} must be non-negative"));
            }
        }
        Ok(())
    }
}

/// Parses the right-hand side as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {spec:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("override key {key:?} is malformed")));
    }
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for p in path {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override {key:?}: {p} is not a table")))?;
    }
    match raw.trim() {
        "none" => {
            cur.remove(*last);
        }
        v => {
            cur.insert(last.to_string(), parse_value(v));
        }
    }
    Ok(())
}

fn merge(into: &mut toml::Table, from: toml::Table) {
    for (k, v) in from {
        match (into.get_mut(&k), v) {
            (Some(toml::Value::Table(a)), toml::Value::Table(b)) => merge(a, b),
            (_, v) => {
                into.insert(k, v);
            }
        }
    }
}

/// First dotted key of `given` that deserialization dropped.
fn unknown_key(given: &toml::Table, known: &toml::Table, prefix: &str) -> Option<String> {
    for (k, v) in given {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (v, known.get(k)) {
            (toml::Value::Table(g), Some(toml::Value::Table(kn))) => {
                if let Some(bad) = unknown_key(g, kn, &path) {
                    return Some(bad);
                }
            }
            (toml::Value::Table(_), _) | (_, None) => return Some(path),
            _ => {}
        }
    }
    None
}
