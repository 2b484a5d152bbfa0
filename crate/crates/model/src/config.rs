use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

/// How the skeleton adjacency is split into per-partition matrices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Partitioning {
    /// One matrix, the normalized adjacency itself.
    Single,
    /// Self / centripetal / centrifugal split by hop distance to a center joint.
    Spatial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StgcnConfig {
    /// Input channels followed by each layer's output channels.
    pub layer_channels: Vec<usize>,
    pub v: usize,
    pub t: usize,
    /// Temporal kernel size (odd).
    pub k: usize,
    pub num_classes: usize,
    /// Bodies per sample, stacked on the batch axis.
    pub persons: usize,
    pub partitioning: Partitioning,
    pub dropout: f64,
    pub bn_eps: f64,
}

/// Named architectures. The `-desk` entries are scaled down for one-core runs.
pub const PRESETS: &[&str] = &[
    "stgcn-3-128-desk",
    "stgcn-6-256-desk",
    "stgcn-3-128",
    "stgcn-3-256",
    "stgcn-6-256",
];

impl StgcnConfig {
    /// Parses a dash-separated channel list such as `3-64-128-128`.
    pub fn parse_channels(spec: &str) -> Result<Vec<usize>> {
        let chans = spec
            .split('-')
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| config_err(format!("bad channel entry {s:?} in {spec:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if chans.len() < 2 || chans.contains(&0) {
            return Err(config_err(format!(
                "channel list {spec:?} needs an input and at least one layer, all positive"
            )));
        }
        Ok(chans)
    }

    pub fn with_channels(channels: &str) -> Result<Self> {
        let cfg = StgcnConfig {
            layer_channels: Self::parse_channels(channels)?,
            v: 25,
            t: 16,
            k: 3,
            num_classes: 4,
            persons: 1,
            partitioning: Partitioning::Single,
            dropout: 0.5,
            bn_eps: 1e-5,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn desk() -> Self {
        Self::preset("stgcn-3-128-desk").expect("built-in preset")
    }

    pub fn preset(name: &str) -> Result<Self> {
        let mut cfg = match name {
            "stgcn-3-128-desk" => Self::with_channels("3-8-16-16")?,
            "stgcn-6-256-desk" => Self::with_channels("3-4-4-8-8-16-16")?,
            "stgcn-3-128" => Self::with_channels("3-64-128-128")?,
            "stgcn-3-256" => Self::with_channels("3-128-256-256")?,
            "stgcn-6-256" => Self::with_channels("3-64-64-128-128-256-256")?,
            _ => {
                return Err(config_err(format!(
                    "unknown model config {name:?}; known: {}",
                    PRESETS.join(", ")
                )))
            }
        };
        if !name.ends_with("-desk") {
            cfg.t = 256;
            cfg.k = 9;
            cfg.num_classes = 60;
            cfg.persons = 2;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_channels.len() < 2 || self.layer_channels.contains(&0) {
            return Err(config_err("layer_channels needs at least two positive entries"));
        }
        if self.v == 0 || self.t == 0 || self.persons == 0 {
            return Err(config_err("V, T and persons must be positive"));
        }
        if self.k % 2 == 0 {
            return Err(config_err(format!("temporal kernel size {} must be odd", self.k)));
        }
        if self.num_classes < 2 {
            return Err(config_err("num_classes must be at least 2"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(config_err(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.bn_eps < 0.0 {
            return Err(config_err("bn_eps must be non-negative"));
        }
        Ok(())
    }

    pub fn layers(&self) -> usize {
        self.layer_channels.len() - 1
    }

    /// Number of activation sites, two per layer.
    pub fn sites(&self) -> usize {
        2 * self.layers()
    }

    pub fn in_channels(&self) -> usize {
        self.layer_channels[0]
    }

    pub fn out_channels(&self, layer: usize) -> usize {
        self.layer_channels[layer + 1]
    }

    pub fn final_channels(&self) -> usize {
        *self.layer_channels.last().unwrap()
    }

    pub fn channel_string(&self) -> String {
        self.layer_channels
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join("-")
    }
}
