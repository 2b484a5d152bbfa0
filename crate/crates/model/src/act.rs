//! Activation slots. A model forward calls its slot once per site.

use depthcut_core::{Tape, Var};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::mask::Mask;
use crate::params::{poly_name, Bound, ModelParams};

pub trait SiteActivation {
    fn apply(&mut self, tape: &mut Tape, site: usize, z: Var) -> Result<Var>;
}

pub struct Relu;

impl SiteActivation for Relu {
    fn apply(&mut self, tape: &mut Tape, _site: usize, z: Var) -> Result<Var> {
        Ok(tape.relu(z)?)
    }
}

pub struct Identity;

impl SiteActivation for Identity {
    fn apply(&mut self, _tape: &mut Tape, _site: usize, z: Var) -> Result<Var> {
        Ok(z)
    }
}

/// ReLU on kept nodes, pass-through elsewhere.
pub struct MaskedRelu<'a>(pub &'a Mask);

impl SiteActivation for MaskedRelu<'_> {
    fn apply(&mut self, tape: &mut Tape, site: usize, z: Var) -> Result<Var> {
        Ok(tape.masked_relu(z, self.0.row(site))?)
    }
}

/// Node-wise `c*w2*x^2 + w1*x + b` on kept nodes, pass-through elsewhere.
pub struct Poly<'a> {
    mask: &'a Mask,
    c: f64,
    coeffs: Vec<Option<[Var; 3]>>,
}

impl<'a> Poly<'a> {
    pub fn bind(mask: &'a Mask, c: f64, bound: &Bound) -> Result<Self> {
        let coeffs = (0..mask.sites())
            .map(|s| {
                if mask.row(s).iter().any(|&b| b) {
                    Ok(Some([
                        bound.var(&poly_name(s, "w2"))?,
                        bound.var(&poly_name(s, "w1"))?,
                        bound.var(&poly_name(s, "b"))?,
                    ]))
                } else {
                    Ok(None)
                }
            })
            .collect::<Result<_>>()?;
        Ok(Poly { mask, c, coeffs })
    }
}

impl SiteActivation for Poly<'_> {
    fn apply(&mut self, tape: &mut Tape, site: usize, z: Var) -> Result<Var> {
        match self.coeffs[site] {
            Some([w2, w1, b]) => Ok(tape.node_poly(z, w2, w1, b, self.c, self.mask.row(site))?),
            None => Ok(z),
        }
    }
}

/// Serializable description of a model's activation slots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ActivationPlan {
    AllRelu,
    Identity,
    MaskedRelu { mask: Mask },
    Poly { mask: Mask, c: f64 },
}

impl ActivationPlan {
    pub fn mask(&self) -> Option<&Mask> {
        match self {
            ActivationPlan::MaskedRelu { mask } | ActivationPlan::Poly { mask, .. } => Some(mask),
            _ => None,
        }
    }

    pub fn check(&self, sites: usize, v: usize, params: &ModelParams) -> Result<()> {
        if let Some(m) = self.mask() {
            if m.sites() != sites || m.v() != v {
                return Err(config_err(format!(
                    "activation plan is {}x{}, model needs {sites}x{v}",
                    m.sites(),
                    m.v()
                )));
            }
        }
        if let ActivationPlan::Poly { mask, .. } = self {
            for s in 0..sites {
                if mask.row(s).iter().any(|&b| b) {
                    for c in ["w2", "w1", "b"] {
                        params.get(&poly_name(s, c))?;
                    }
                }
            }
        }
        Ok(())
    }

    /// Slot implementation bound to the coefficients on a tape.
    pub fn activation<'a>(&'a self, bound: &Bound) -> Result<Box<dyn SiteActivation + 'a>> {
        Ok(match self {
            ActivationPlan::AllRelu => Box::new(Relu),
            ActivationPlan::Identity => Box::new(Identity),
            ActivationPlan::MaskedRelu { mask } => Box::new(MaskedRelu(mask)),
            ActivationPlan::Poly { mask, c } => Box::new(Poly::bind(mask, *c, bound)?),
        })
    }
}
