//! Synthetic datasets and their CSV form.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::math::{Matrix, Vector};

/// A set of `(input, target)` pairs with uniform dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub inputs: Vec<Vector>,
    pub targets: Vec<Vector>,
    /// Latent class or group of each sample, when the generator knows it.
    /// Not written to CSV.
    #[serde(default)]
    pub labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, inputs: Vec<Vector>, targets: Vec<Vector>) -> Result<Self> {
        let d = Self {
            name: name.into(),
            inputs,
            targets,
            labels: None,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.inputs.len() != self.targets.len() {
            return shape_err(format!(
                "{} inputs but {} targets",
                self.inputs.len(),
                self.targets.len()
            ));
        }
        if let Some(first) = self.inputs.first() {
            if self.inputs.iter().any(|x| x.len() != first.len()) {
                return shape_err("inputs have non-uniform dimension");
            }
        }
        if let Some(first) = self.targets.first() {
            if self.targets.iter().any(|y| y.len() != first.len()) {
                return shape_err("targets have non-uniform dimension");
            }
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.inputs.len() {
                return shape_err("labels length differs from sample count");
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    pub fn target_dim(&self) -> usize {
        self.targets.first().map_or(0, Vec::len)
    }

    /// Inputs stacked as a `samples × input_dim` matrix.
    pub fn input_matrix(&self) -> Matrix {
        let cols = self.input_dim();
        let data = self.inputs.iter().flatten().copied().collect();
        Matrix::new(self.len(), cols, data).expect("validated dataset")
    }

    /// First `n` samples and the rest.
    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.len());
        let part = |range: std::ops::Range<usize>, suffix: &str| Dataset {
            name: format!("{}{suffix}", self.name),
            inputs: self.inputs[range.clone()].to_vec(),
            targets: self.targets[range.clone()].to_vec(),
            labels: self.labels.as_ref().map(|l| l[range].to_vec()),
        };
        (part(0..n, "-head"), part(n..self.len(), "-tail"))
    }

    /// Write as CSV with header `x0,..,y0,..`, one row per sample.
    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path)?;
        let header: Vec<String> = (0..self.input_dim())
            .map(|i| format!("x{i}"))
            .chain((0..self.target_dim()).map(|i| format!("y{i}")))
            .collect();
        wtr.write_record(&header)?;
        for (x, y) in self.inputs.iter().zip(&self.targets) {
            // `{:?}` on f64 prints the shortest string that round-trips.
            let row: Vec<String> = x.iter().chain(y).map(|v| format!("{v:?}")).collect();
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut rdr = csv::Reader::from_path(path)?;
        let headers = rdr.headers()?.clone();
        let n_x = headers.iter().filter(|h| h.starts_with('x')).count();
        let n_y = headers.iter().filter(|h| h.starts_with('y')).count();
        if n_x + n_y != headers.len() {
            return Err(Error::Config(format!(
                "{}: header columns must be named x<i> or y<i>",
                path.display()
            )));
        }
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let vals: Vec<f64> = rec
                .iter()
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Config(format!("row {}: {e}", line + 1)))?;
            inputs.push(vals[..n_x].to_vec());
            targets.push(vals[n_x..].to_vec());
        }
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Dataset::new(name, inputs, targets)
    }
}

/// Synthetic data families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SyntheticKind {
    /// Two Gaussian blobs; target is the one-hot class in the first two
    /// output coordinates.
    Blobs,
    /// Each sample lives in one of `groups` disjoint input blocks and its
    /// target is a nonlinear function of that block written to the matching
    /// output block. Trained FFNs develop group-specific, co-activated
    /// neuron sets.
    SparseRegression { groups: usize },
    /// Gaussian inputs through a fixed random linear map.
    RandomProj,
}

impl SyntheticKind {
    pub fn name(&self) -> &'static str {
        match self {
            SyntheticKind::Blobs => "blobs",
            SyntheticKind::SparseRegression { .. } => "sparse_regression",
            SyntheticKind::RandomProj => "random_proj",
        }
    }
}

/// Noise level on the coordinates outside a sample's active block.
const OFF_BLOCK_NOISE: f64 = 0.05;
/// Active-block features are "present" signals: positive on average.
const ACTIVE_MEAN: f64 = 1.0;
const ACTIVE_STD: f64 = 0.5;

/// Generate `n` samples of dimension `d_model` (targets share the
/// dimension, since an FFN maps `d_model → d_model`).
pub fn gen_synthetic(kind: SyntheticKind, n: usize, d_model: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = d_model.max(1);
    let mut inputs = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    match kind {
        SyntheticKind::Blobs => {
            let mut dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let len = crate::math::norm(&dir).max(1e-12);
            dir.iter_mut().for_each(|v| *v *= 2.5 / len);
            for _ in 0..n {
                let class = rng.random_range(0..2usize);
                let sign = if class == 0 { 1.0 } else { -1.0 };
                let x: Vector = dir
                    .iter()
                    .map(|m| sign * m + rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let mut y = vec![0.0; d];
                if d >= 2 {
                    y[class] = 1.0;
                } else {
                    y[0] = sign;
                }
                inputs.push(x);
                targets.push(y);
                labels.push(class);
            }
        }
        SyntheticKind::SparseRegression { groups } => {
            let groups = groups.clamp(1, d);
            let block = d / groups;
            let teachers: Vec<Matrix> = (0..groups)
                .map(|_| {
                    let scale = 1.5 / (block as f64).sqrt();
                    Matrix::from_fn(block, block, |_, _| {
                        scale * rng.sample::<f64, _>(StandardNormal)
                    })
                })
                .collect();
            let noise = Normal::new(0.0, OFF_BLOCK_NOISE).unwrap();
            let active = Normal::new(ACTIVE_MEAN, ACTIVE_STD).unwrap();
            for _ in 0..n {
                let g = rng.random_range(0..groups);
                let mut x: Vector = (0..d).map(|_| noise.sample(&mut rng)).collect();
                let lo = g * block;
                for v in &mut x[lo..lo + block] {
                    *v = active.sample(&mut rng);
                }
                let z = teachers[g]
                    .vec_mul(&x[lo..lo + block])
                    .expect("teacher shape");
                let mut y = vec![0.0; d];
                for (yi, zi) in y[lo..lo + block].iter_mut().zip(&z) {
                    *yi = zi.tanh();
                }
                inputs.push(x);
                targets.push(y);
                labels.push(g);
            }
        }
        SyntheticKind::RandomProj => {
            let scale = 1.0 / (d as f64).sqrt();
            let proj = Matrix::from_fn(d, d, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
            for _ in 0..n {
                let x: Vector = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                let y = proj.vec_mul(&x).expect("projection shape");
                inputs.push(x);
                targets.push(y);
                labels.push(0);
            }
        }
    }
    Dataset {
        name: format!("{}-n{n}-d{d}-s{seed}", kind.name()),
        inputs,
        targets,
        labels: Some(labels),
    }
}

/// Deterministic shuffle of `0..n`.
pub(crate) fn shuffled_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}
