//! Model checkpoints in the shared container format.

use depthcut_core::{bn_affine, Container, Tensor};
use serde_json::{json, Map, Value};

use crate::act::ActivationPlan;
use crate::config::StgcnConfig;
use crate::error::{ModelError, Result};
use crate::linearize::IndicatorState;
use crate::mask::Mask;
use crate::params::{bn_name, ModelParams};

pub const CHECKPOINT_KIND: &str = "checkpoint";
const H_W: &str = "indicator.h_w";

/// Parameters plus everything needed to rebuild and compile the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: StgcnConfig,
    pub params: ModelParams,
    pub plan: ActivationPlan,
    pub indicator: Option<IndicatorState>,
    pub meta: Map<String, Value>,
}

fn affine_name(layer: usize, which: usize, field: &str) -> String {
    format!("layer{layer}.bn{which}.affine_{field}")
}

fn json_err(e: serde_json::Error) -> ModelError {
    ModelError::State(format!("checkpoint header: {e}"))
}

impl Checkpoint {
    pub fn new(config: StgcnConfig, params: ModelParams, plan: ActivationPlan) -> Self {
        Checkpoint {
            config,
            params,
            plan,
            indicator: None,
            meta: Map::new(),
        }
    }

    /// Eval-mode batch norm of `(layer, which)` as `(scale, shift)`.
    pub fn bn_affine(&self, layer: usize, which: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let g = |f: &str| self.params.get(&bn_name(layer, which, f)).map(|t| t.data());
        Ok(bn_affine(g("gamma")?, g("beta")?, g("mean")?, g("var")?, self.config.bn_eps)?)
    }

    pub fn to_container(&self) -> Result<Container> {
        let indicator = self.indicator.as_ref().map(|i| {
            json!({ "mask": i.mask, "frozen": i.frozen, "mu": i.mu })
        });
        let meta = json!({
            "config": serde_json::to_value(&self.config).map_err(json_err)?,
            "plan": serde_json::to_value(&self.plan).map_err(json_err)?,
            "indicator": indicator,
            "meta": self.meta,
        });
        let mut c = Container::new(CHECKPOINT_KIND).with_meta(meta);
        for (n, t) in &self.params.tensors {
            c.insert(n.clone(), t.clone());
        }
        for l in 0..self.config.layers() {
            for which in [1, 2] {
                let (scale, shift) = self.bn_affine(l, which)?;
                let n = scale.len();
                c.insert(affine_name(l, which, "scale"), Tensor::new([n], scale)?);
                c.insert(affine_name(l, which, "shift"), Tensor::new([n], shift)?);
            }
        }
        if let Some(i) = &self.indicator {
            c.insert(H_W, i.h_w.clone());
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let config: StgcnConfig =
            serde_json::from_value(c.meta_field("config")?.clone()).map_err(json_err)?;
        config.validate()?;
        let plan: ActivationPlan =
            serde_json::from_value(c.meta_field("plan")?.clone()).map_err(json_err)?;
        let indicator = match c.meta_field("indicator")? {
            Value::Null => None,
            v => {
                let mask: Mask = serde_json::from_value(v["mask"].clone()).map_err(json_err)?;
                Some(IndicatorState {
                    h_w: c.tensor(H_W)?.clone(),
                    mask,
                    frozen: v["frozen"].as_bool().unwrap_or(false),
                    mu: v["mu"].as_f64().unwrap_or(0.0),
                })
            }
        };
        let meta = match c.meta_field("meta")? {
            Value::Object(m) => m.clone(),
            _ => Map::new(),
        };
        let mut params = ModelParams::default();
        for (n, t) in &c.tensors {
            if n == H_W || n.contains(".affine_") {
                continue;
            }
            params.insert(n.clone(), t.clone());
        }
        plan.check(config.sites(), config.v, &params)?;
        Ok(Checkpoint {
            config,
            params,
            plan,
            indicator,
            meta,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        Ok(self.to_container()?.save(path)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_container(&Container::load(path, Some(CHECKPOINT_KIND))?)
    }
}
