//! Run report: encryption profiles, latency breakdown, accuracy against
//! estimated cost, and the final summary.

use std::path::Path;

use depthcut_he::cost::{cost_rows, CostRow};
use depthcut_he::{estimate_cost, Compiled, CostModel, CostReport, EncryptionProfile, OpCounts};
use depthcut_model::Checkpoint;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::pipeline::SimulationSummary;

/// `N, Q, p, q0, L` in the order of the parameter table.
pub fn profile_line(p: &EncryptionProfile) -> String {
    format!("{}, {}, {}, {}, {}", p.n, p.q_bits, p.scale_bits, p.base_bits, p.levels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub model: String,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "Q")]
    pub q_bits: u32,
    pub p: u32,
    pub q0: u32,
    #[serde(rename = "L")]
    pub levels: usize,
}

impl ProfileRow {
    pub fn new(model: &str, p: &EncryptionProfile) -> Self {
        ProfileRow {
            model: model.to_string(),
            n: p.n,
            q_bits: p.q_bits,
            p: p.scale_bits,
            q0: p.base_bits,
            levels: p.levels,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParetoRow {
    pub model: String,
    pub effective: f64,
    pub accuracy: f64,
    pub levels: usize,
    pub n: usize,
    pub cost_s: f64,
}

/// One compiled network and its estimated cost.
pub struct ModelEntry {
    pub name: String,
    pub accuracy: f64,
    pub effective: f64,
    pub compiled: Compiled,
    pub cost: CostReport,
}

impl ModelEntry {
    pub fn new(name: &str, ck: &Checkpoint, compiled: Compiled, model: &CostModel) -> Result<Self> {
        let cost = estimate_cost(&compiled.circuit, compiled.profile.n, compiled.groups(), model)
            .map_err(|e| CliError::from_he("report", e))?;
        let effective = match &ck.plan {
            depthcut_model::ActivationPlan::Identity => 0.0,
            plan => plan.mask().map_or(ck.config.sites() as f64, |m| m.effective()),
        };
        Ok(ModelEntry {
            name: name.to_string(),
            accuracy: ck.meta.get("eval_acc").and_then(|v| v.as_f64()).unwrap_or(f64::NAN),
            effective,
            compiled,
            cost,
        })
    }
}

/// Everything a run produces that is deterministic in its seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalReport {
    pub model: String,
    pub seed: u64,
    pub teacher_acc: f64,
    pub student_acc: f64,
    pub baseline_acc: Option<f64>,
    pub encrypted_acc: f64,
    pub argmax_agreement: f64,
    pub max_abs_err: f64,
    pub effective: f64,
    pub levels: usize,
    pub n: usize,
    pub q_bits: u32,
    pub scale_bits: u32,
    pub base_bits: u32,
    pub samples: usize,
    pub groups: usize,
    pub counts: OpCounts,
    pub cost_s: f64,
    pub baseline_cost_s: Option<f64>,
    pub speedup: Option<f64>,
}

/// `models` lists the baseline first when there is one; the student is last.
pub fn build(cfg: &RunConfig, teacher_acc: f64, models: &[ModelEntry], sim: &SimulationSummary) -> Result<FinalReport> {
    let student = models
        .last()
        .ok_or_else(|| CliError::phase("report", "no compiled model to report"))?;
    let baseline = (models.len() > 1).then(|| &models[0]);
    let p = &student.compiled.profile;
    Ok(FinalReport {
        model: cfg.model.clone(),
        seed: cfg.seed,
        teacher_acc,
        student_acc: student.accuracy,
        baseline_acc: baseline.map(|b| b.accuracy),
        encrypted_acc: sim.encrypted_acc,
        argmax_agreement: sim.argmax_agreement,
        max_abs_err: sim.max_abs_err,
        effective: student.effective,
        levels: student.compiled.levels(),
        n: p.n,
        q_bits: p.q_bits,
        scale_bits: p.scale_bits,
        base_bits: p.base_bits,
        samples: sim.samples,
        groups: student.compiled.groups(),
        counts: student.cost.counts.clone(),
        cost_s: student.cost.total_s,
        baseline_cost_s: baseline.map(|b| b.cost.total_s),
        speedup: baseline.map(|b| student.cost.speedup_over(&b.cost)),
    })
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> std::result::Result<(), String> {
    let mut w = csv::Writer::from_path(path).map_err(|e| e.to_string())?;
    for r in rows {
        w.serialize(r).map_err(|e| e.to_string())?;
    }
    w.flush().map_err(|e| e.to_string())
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> std::result::Result<(), String> {
    let text = serde_json::to_string_pretty(v).map_err(|e| e.to_string())?;
    std::fs::write(path, text + "\n").map_err(|e| e.to_string())
}

pub fn cost_table(models: &[ModelEntry]) -> Vec<CostRow> {
    let entries: Vec<(String, CostReport)> = models.iter().map(|m| (m.name.clone(), m.cost.clone())).collect();
    cost_rows(&entries)
}

/// Writes `profile.csv`, `cost.csv`, `cost.json`, `pareto.csv` and
/// `report.json` into `dir`.
pub fn write_all(dir: &Path, models: &[ModelEntry], report: &FinalReport) -> std::result::Result<(), String> {
    let profiles: Vec<ProfileRow> = models.iter().map(|m| ProfileRow::new(&m.name, &m.compiled.profile)).collect();
    write_csv(&dir.join("profile.csv"), &profiles)?;
    let costs = cost_table(models);
    write_csv(&dir.join("cost.csv"), &costs)?;
    write_json(&dir.join("cost.json"), &costs)?;
    let pareto: Vec<ParetoRow> = models
        .iter()
        .map(|m| ParetoRow {
            model: m.name.clone(),
            effective: m.effective,
            accuracy: m.accuracy,
            levels: m.compiled.levels(),
            n: m.compiled.profile.n,
            cost_s: m.cost.total_s,
        })
        .collect();
    write_csv(&dir.join("pareto.csv"), &pareto)?;
    write_json(&dir.join("report.json"), report)
}
