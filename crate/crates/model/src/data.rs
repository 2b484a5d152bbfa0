//! Synthetic skeleton-action data: each class moves joint groups along
//! class-specific sinusoids, plus per-sample amplitude jitter and noise.

use std::f64::consts::PI;

use depthcut_core::seed::rng_from_seed;
use depthcut_core::{Container, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde_json::json;

use crate::error::{config_err, ModelError, Result};

pub const DATASET_KIND: &str = "dataset";

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SynthSpec {
    pub v: usize,
    pub t: usize,
    pub c: usize,
    pub num_classes: usize,
    pub persons: usize,
    pub noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            v: 25,
            t: 16,
            c: 3,
            num_classes: 4,
            persons: 1,
            noise: 0.1,
        }
    }
}

/// Samples are stored person-major inside each sample: row `i * persons + p`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub persons: usize,
}

const GROUPS: usize = 5;

/// Torso, two arms, two legs for the 25-joint skeleton; equal slices otherwise.
fn joint_group(j: usize, v: usize) -> usize {
    if v == 25 {
        match j {
            0..=3 | 20 => 0,
            4..=7 | 21 | 22 => 1,
            8..=11 | 23 | 24 => 2,
            12..=15 => 3,
            _ => 4,
        }
    } else {
        j * GROUPS / v.max(1)
    }
}

/// Frequency in cycles per clip and phase of class `cl` for group `g`.
fn trajectory(cl: usize, g: usize) -> (f64, f64) {
    let freq = 1.0 + ((cl * (g + 1) + cl / 3) % 3) as f64;
    let phase = 2.0 * PI * ((cl * 7 + g * 3) % 10) as f64 / 10.0;
    (freq, phase)
}

/// Noise-free class template, `[C, T, V]` row-major.
pub fn class_template(spec: &SynthSpec, cl: usize) -> Vec<f64> {
    let (c, t, v) = (spec.c, spec.t, spec.v);
    let mut out = vec![0.0; c * t * v];
    for ci in 0..c {
        for ti in 0..t {
            for j in 0..v {
                let g = joint_group(j, v);
                let (f, ph) = trajectory(cl, g);
                let arg = 2.0 * PI * f * ti as f64 / t as f64 + ph + ci as f64 * PI / 2.0 + 0.3 * j as f64;
                out[(ci * t + ti) * v + j] = arg.sin();
            }
        }
    }
    out
}

pub fn synth_dataset(spec: &SynthSpec, n_samples: usize, seed: u64) -> Result<Dataset> {
    if spec.num_classes < 2 {
        return Err(config_err("synthetic data needs at least two classes"));
    }
    if spec.v == 0 || spec.t == 0 || spec.c == 0 || spec.persons == 0 {
        return Err(config_err("V, T, C and persons must be positive"));
    }
    if spec.noise < 0.0 {
        return Err(config_err("noise must be non-negative"));
    }
    let mut rng = rng_from_seed(seed);
    let mut labels: Vec<usize> = (0..n_samples).map(|i| i % spec.num_classes).collect();
    labels.shuffle(&mut rng);
    let templates: Vec<Vec<f64>> = (0..spec.num_classes).map(|cl| class_template(spec, cl)).collect();
    let per = spec.c * spec.t * spec.v;
    let normal = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut data = Vec::with_capacity(n_samples * spec.persons * per);
    for &l in &labels {
        for _ in 0..spec.persons {
            let amp = rng.random_range(0.8..1.2);
            for &base in &templates[l] {
                let noise = if spec.noise > 0.0 { normal.sample(&mut rng) } else { 0.0 };
                data.push(amp * base + noise);
            }
        }
    }
    let x = Tensor::new([n_samples * spec.persons, spec.c, spec.t, spec.v], data)?;
    Ok(Dataset {
        x,
        labels,
        persons: spec.persons,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Input rows and labels for the given sample indices.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let rows: Vec<usize> = idx
            .iter()
            .flat_map(|&i| i * self.persons..(i + 1) * self.persons)
            .collect();
        (self.x.select_rows(&rows), idx.iter().map(|&i| self.labels[i]).collect())
    }

    /// First `n` samples.
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let (x, labels) = self.batch(&idx);
        Dataset {
            x,
            labels,
            persons: self.persons,
        }
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(DATASET_KIND).with_meta(json!({ "persons": self.persons }));
        c.insert("x", self.x.clone());
        c.insert(
            "labels",
            Tensor::new([self.labels.len()], self.labels.iter().map(|&l| l as f64).collect())
                .expect("length matches"),
        );
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let persons = c
            .meta_field("persons")?
            .as_u64()
            .ok_or_else(|| ModelError::State("dataset persons is not an integer".into()))?
            as usize;
        let labels = c.tensor("labels")?.data().iter().map(|&l| l as usize).collect();
        Ok(Dataset {
            x: c.tensor("x")?.clone(),
            labels,
            persons,
        })
    }
}

/// Shuffled mini-batches of sample indices covering `0..n` once.
pub fn epoch_batches(n: usize, batch: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}
