//! Skeleton graphs and their normalized, optionally partitioned adjacency.

use std::collections::VecDeque;

use crate::config::{Partitioning, StgcnConfig};
use crate::error::{config_err, Result};

/// Bones of the 25-joint Kinect v2 skeleton, zero-indexed.
const NTU_BONES: [(usize, usize); 24] = [
    (0, 1),
    (1, 20),
    (2, 20),
    (3, 2),
    (4, 20),
    (5, 4),
    (6, 5),
    (7, 6),
    (8, 20),
    (9, 8),
    (10, 9),
    (11, 10),
    (12, 0),
    (13, 12),
    (14, 13),
    (15, 14),
    (16, 0),
    (17, 16),
    (18, 17),
    (19, 18),
    (21, 22),
    (22, 7),
    (23, 24),
    (24, 11),
];

/// Spine joint used as the partition center for the 25-joint skeleton.
pub const NTU_CENTER: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonGraph {
    v: usize,
    /// 0/1 adjacency, row-major V x V.
    adjacency: Vec<f64>,
    /// `D^{-1/2} (A + I) D^{-1/2}` with D the degree matrix of `A + I`.
    normalized: Vec<f64>,
    /// Row-major V x V matrices summing exactly to `normalized`. Entry
    /// `[k][j]` weighs input node `j` into output node `k`.
    partitions: Vec<Vec<f64>>,
}

/// Symmetric renormalized adjacency of a 0/1 matrix without self-loops.
pub fn normalize_adjacency(a: &[f64], v: usize) -> Result<Vec<f64>> {
    if a.len() != v * v {
        return Err(config_err(format!("adjacency has {} entries for V={v}", a.len())));
    }
    for i in 0..v {
        if a[i * v + i] != 0.0 {
            return Err(config_err(format!("adjacency diagonal at node {i} is non-zero")));
        }
        for j in 0..v {
            let x = a[i * v + j];
            if x != 0.0 && x != 1.0 {
                return Err(config_err(format!("adjacency entry ({i},{j}) = {x} is not 0/1")));
            }
            if x != a[j * v + i] {
                return Err(config_err(format!("adjacency is not symmetric at ({i},{j})")));
            }
        }
    }
    let deg: Vec<f64> = (0..v)
        .map(|i| 1.0 + a[i * v..(i + 1) * v].iter().sum::<f64>())
        .collect();
    let mut out = vec![0.0; v * v];
    for i in 0..v {
        for j in 0..v {
            let aij = a[i * v + j] + if i == j { 1.0 } else { 0.0 };
            if aij != 0.0 {
                out[i * v + j] = aij / (deg[i].sqrt() * deg[j].sqrt());
            }
        }
    }
    Ok(out)
}

fn hop_distances(adjacency: &[f64], v: usize, center: usize) -> Vec<usize> {
    let mut dist = vec![usize::MAX; v];
    let mut queue = VecDeque::from([center]);
    dist[center] = 0;
    while let Some(i) = queue.pop_front() {
        for j in 0..v {
            if adjacency[i * v + j] != 0.0 && dist[j] == usize::MAX {
                dist[j] = dist[i] + 1;
                queue.push_back(j);
            }
        }
    }
    dist
}

impl SkeletonGraph {
    pub fn from_edges(
        v: usize,
        edges: &[(usize, usize)],
        center: usize,
        partitioning: Partitioning,
    ) -> Result<Self> {
        if v == 0 {
            return Err(config_err("graph needs at least one node"));
        }
        if center >= v {
            return Err(config_err(format!("center node {center} out of range for V={v}")));
        }
        let mut adjacency = vec![0.0; v * v];
        for &(a, b) in edges {
            if a >= v || b >= v || a == b {
                return Err(config_err(format!("bad edge ({a},{b}) for V={v}")));
            }
            adjacency[a * v + b] = 1.0;
            adjacency[b * v + a] = 1.0;
        }
        Self::from_adjacency(adjacency, v, center, partitioning)
    }

    pub fn from_adjacency(
        adjacency: Vec<f64>,
        v: usize,
        center: usize,
        partitioning: Partitioning,
    ) -> Result<Self> {
        let normalized = normalize_adjacency(&adjacency, v)?;
        let partitions = match partitioning {
            Partitioning::Single => vec![normalized.clone()],
            Partitioning::Spatial => {
                let dist = hop_distances(&adjacency, v, center);
                let mut parts = vec![vec![0.0; v * v]; 3];
                for k in 0..v {
                    for j in 0..v {
                        let w = normalized[k * v + j];
                        if w == 0.0 {
                            continue;
                        }
                        // unreachable nodes share the root's distance class
                        let p = match dist[j].cmp(&dist[k]) {
                            std::cmp::Ordering::Equal => 0,
                            std::cmp::Ordering::Less => 1,
                            std::cmp::Ordering::Greater => 2,
                        };
                        parts[p][k * v + j] = w;
                    }
                }
                parts
            }
        };
        Ok(SkeletonGraph {
            v,
            adjacency,
            normalized,
            partitions,
        })
    }

    /// Graph with caller-supplied partition matrices; they must sum to the
    /// normalized adjacency exactly.
    pub fn with_partitions(adjacency: Vec<f64>, v: usize, partitions: Vec<Vec<f64>>) -> Result<Self> {
        let normalized = normalize_adjacency(&adjacency, v)?;
        if partitions.is_empty() || partitions.iter().any(|p| p.len() != v * v) {
            return Err(config_err("partitions must be non-empty V x V matrices"));
        }
        for i in 0..v * v {
            let s: f64 = partitions.iter().map(|p| p[i]).sum();
            if s != normalized[i] {
                return Err(config_err(format!(
                    "partitions sum to {s} at entry {i}, normalized adjacency has {}",
                    normalized[i]
                )));
            }
        }
        Ok(SkeletonGraph {
            v,
            adjacency,
            normalized,
            partitions,
        })
    }

    pub fn ntu25(partitioning: Partitioning) -> Self {
        Self::from_edges(25, &NTU_BONES, NTU_CENTER, partitioning).expect("static skeleton is valid")
    }

    /// Chain `0 - 1 - ... - (n-1)` centered on its middle node.
    pub fn path(n: usize, partitioning: Partitioning) -> Result<Self> {
        let edges: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
        Self::from_edges(n, &edges, n / 2, partitioning)
    }

    /// The 25-joint skeleton when `V = 25`, otherwise a chain over V nodes.
    pub fn for_config(cfg: &StgcnConfig) -> Result<Self> {
        if cfg.v == 25 {
            Ok(Self::ntu25(cfg.partitioning))
        } else {
            Self::path(cfg.v, cfg.partitioning)
        }
    }

    pub fn v(&self) -> usize {
        self.v
    }

    pub fn adjacency(&self) -> &[f64] {
        &self.adjacency
    }

    pub fn normalized(&self) -> &[f64] {
        &self.normalized
    }

    pub fn partitions(&self) -> &[Vec<f64>] {
        &self.partitions
    }

    /// Relabels nodes so that new node `i` is old node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> SkeletonGraph {
        let v = self.v;
        let remap = |m: &[f64]| {
            let mut out = vec![0.0; v * v];
            for i in 0..v {
                for j in 0..v {
                    out[i * v + j] = m[perm[i] * v + perm[j]];
                }
            }
            out
        };
        SkeletonGraph {
            v,
            adjacency: remap(&self.adjacency),
            normalized: remap(&self.normalized),
            partitions: self.partitions.iter().map(|p| remap(p)).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ntu_skeleton_is_a_tree() {
        let g = SkeletonGraph::ntu25(Partitioning::Single);
        let edges = g.adjacency().iter().sum::<f64>() / 2.0;
        assert_eq!(edges, 24.0);
        let d = hop_distances(g.adjacency(), 25, NTU_CENTER);
        assert!(d.iter().all(|&x| x != usize::MAX));
    }

    #[test]
    fn rejects_asymmetric_or_looped_input() {
        assert!(normalize_adjacency(&[0.0, 1.0, 0.0, 0.0], 2).is_err());
        assert!(normalize_adjacency(&[1.0], 1).is_err());
    }
}
