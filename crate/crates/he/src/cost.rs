//! Latency model: per-operation seconds by ring dimension.
//!
//! Tables are plain text, one `op N seconds` row per entry, `#` starts a
//! comment. Rescales are not charged; plaintext additions count as additions.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::circuit::{Circuit, OpCounts};
use crate::error::{config_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpClass {
    Rot,
    PMult,
    Add,
    CMult,
}

impl OpClass {
    pub const ALL: [OpClass; 4] = [OpClass::Rot, OpClass::PMult, OpClass::Add, OpClass::CMult];

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rot" => Some(OpClass::Rot),
            "pmult" => Some(OpClass::PMult),
            "add" => Some(OpClass::Add),
            "cmult" => Some(OpClass::CMult),
            _ => None,
        }
    }

    fn count(self, c: &OpCounts) -> usize {
        match self {
            OpClass::Rot => c.rot,
            OpClass::PMult => c.pmult,
            OpClass::Add => c.add,
            OpClass::CMult => c.cmult,
        }
    }
}

impl fmt::Display for OpClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OpClass::Rot => "rot",
            OpClass::PMult => "pmult",
            OpClass::Add => "add",
            OpClass::CMult => "cmult",
        })
    }
}

/// Illustrative single-thread latencies in seconds, shaped like a typical
/// RNS-CKKS library at full modulus. Replace with measured numbers.
pub const DEFAULT_TABLE: &str = "\
# op     N      seconds
rot    8192   0.0030
rot    16384  0.0110
rot    32768  0.0420
rot    65536  0.1650
pmult  8192   0.00025
pmult  16384  0.0009
pmult  32768  0.0034
pmult  65536  0.0135
add    8192   0.00005
add    16384  0.00018
add    32768  0.0007
add    65536  0.0028
cmult  8192   0.0035
cmult  16384  0.0125
cmult  32768  0.0480
cmult  65536  0.1900
";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    entries: BTreeMap<OpClass, BTreeMap<usize, f64>>,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel::parse(DEFAULT_TABLE).expect("built-in table is valid")
    }
}

impl CostModel {
    pub fn from_entries(rows: &[(OpClass, usize, f64)]) -> Result<Self> {
        let mut entries: BTreeMap<OpClass, BTreeMap<usize, f64>> = BTreeMap::new();
        for &(op, n, s) in rows {
            if !(s.is_finite() && s > 0.0) {
                return Err(config_err(format!("{op} at N={n}: latency {s} must be positive")));
            }
            if entries.entry(op).or_default().insert(n, s).is_some() {
                return Err(config_err(format!("duplicate entry for {op} at N={n}")));
            }
        }
        for (op, row) in &entries {
            let vals: Vec<(&usize, &f64)> = row.iter().collect();
            for w in vals.windows(2) {
                if w[1].1 < w[0].1 {
                    return Err(config_err(format!(
                        "{op} latency drops from {} s at N={} to {} s at N={}",
                        w[0].1, w[0].0, w[1].1, w[1].0
                    )));
                }
            }
        }
        Ok(CostModel { entries })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            let bad = || config_err(format!("cost table line {}: expected `op N seconds`, got `{line}`", lineno + 1));
            if f.len() != 3 {
                return Err(bad());
            }
            let op = OpClass::parse(f[0]).ok_or_else(bad)?;
            let n: usize = f[1].parse().map_err(|_| bad())?;
            let s: f64 = f[2].parse().map_err(|_| bad())?;
            rows.push((op, n, s));
        }
        Self::from_entries(&rows)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("reading cost table {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn latency(&self, op: OpClass, n: usize) -> Result<f64> {
        self.entries
            .get(&op)
            .and_then(|r| r.get(&n))
            .copied()
            .ok_or_else(|| config_err(format!("cost table has no {op} entry for N={n}")))
    }

    /// Ring dimensions with a complete set of entries.
    pub fn dimensions(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self.entries.values().flat_map(|r| r.keys().copied()).collect();
        out.sort_unstable();
        out.dedup();
        out.retain(|&n| OpClass::ALL.iter().all(|&op| self.latency(op, n).is_ok()));
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub n: usize,
    /// Ciphertext groups the circuit runs over.
    pub groups: usize,
    /// Whole-run counts (per-group counts times groups).
    pub counts: OpCounts,
    pub rot_s: f64,
    pub pmult_s: f64,
    pub add_s: f64,
    pub cmult_s: f64,
    pub total_s: f64,
}

impl CostReport {
    pub fn speedup_over(&self, baseline: &CostReport) -> f64 {
        if self.total_s == 0.0 {
            f64::INFINITY
        } else {
            baseline.total_s / self.total_s
        }
    }

    pub fn seconds(&self, op: OpClass) -> f64 {
        match op {
            OpClass::Rot => self.rot_s,
            OpClass::PMult => self.pmult_s,
            OpClass::Add => self.add_s,
            OpClass::CMult => self.cmult_s,
        }
    }
}

pub fn estimate_counts(counts: &OpCounts, n: usize, groups: usize, model: &CostModel) -> Result<CostReport> {
    let counts = counts.scaled(groups);
    let mut secs = [0.0; 4];
    for (i, op) in OpClass::ALL.into_iter().enumerate() {
        secs[i] = op.count(&counts) as f64 * model.latency(op, n)?;
    }
    Ok(CostReport {
        n,
        groups,
        counts,
        rot_s: secs[0],
        pmult_s: secs[1],
        add_s: secs[2],
        cmult_s: secs[3],
        total_s: secs.iter().sum(),
    })
}

pub fn estimate_cost(c: &Circuit, n: usize, groups: usize, model: &CostModel) -> Result<CostReport> {
    estimate_counts(&c.counts(), n, groups, model)
}

/// One line of the latency breakdown table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub model: String,
    pub n: usize,
    pub rot_s: f64,
    pub pmult_s: f64,
    pub add_s: f64,
    pub cmult_s: f64,
    pub total_s: f64,
    /// Relative to the first row.
    pub speedup: f64,
    pub rot: usize,
    pub pmult: usize,
    pub add: usize,
    pub cmult: usize,
}

pub fn cost_rows(entries: &[(String, CostReport)]) -> Vec<CostRow> {
    let Some((_, base)) = entries.first() else {
        return Vec::new();
    };
    entries
        .iter()
        .map(|(name, r)| CostRow {
            model: name.clone(),
            n: r.n,
            rot_s: r.rot_s,
            pmult_s: r.pmult_s,
            add_s: r.add_s,
            cmult_s: r.cmult_s,
            total_s: r.total_s,
            speedup: r.speedup_over(base),
            rot: r.counts.rot,
            pmult: r.counts.pmult,
            add: r.counts.add,
            cmult: r.counts.cmult,
        })
        .collect()
}
