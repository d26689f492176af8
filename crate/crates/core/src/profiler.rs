//! Activation traces and sparsity statistics.
//!
//! A neuron counts as active only when its pre-activation is strictly
//! positive; `h == 0` is inactive.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::math::{FfnWeights, Matrix};

/// Number of evenly spaced thresholds in [`SparsityReport::cdf`].
pub const CDF_POINTS: usize = 100;

/// Pre-activations `h` of one FFN over a sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    /// `samples × d_ff`
    pub h: Matrix,
}

impl ActivationTrace {
    pub fn new(h: Matrix) -> Self {
        Self { h }
    }

    pub fn samples(&self) -> usize {
        self.h.rows()
    }

    pub fn d_ff(&self) -> usize {
        self.h.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.h.row(i)
    }
}

/// Record `h = x·W1 + b1` for every input in `d`, in sample order.
pub fn record_trace(w: &FfnWeights, d: &Dataset) -> Result<ActivationTrace> {
    let rows: Vec<Vec<f64>> = d
        .inputs
        .par_iter()
        .map(|x| w.preactivation(x))
        .collect::<Result<_>>()?;
    let data = rows.into_iter().flatten().collect();
    Ok(ActivationTrace::new(Matrix::new(d.len(), w.d_ff, data)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub samples: usize,
    pub d_ff: usize,
    /// Fraction of neurons with `h > 0`, per input.
    pub per_sample_active_ratio: Vec<f64>,
    pub neuron_ever_active: Vec<bool>,
    /// Fraction of all trace entries with `h <= 0`.
    pub negative_ratio: f64,
    pub mean_active_ratio: f64,
    /// `(threshold, fraction of inputs with active ratio <= threshold)` at
    /// thresholds `1/100, 2/100, .., 1`.
    pub cdf: Vec<(f64, f64)>,
}

impl SparsityReport {
    pub fn dead_neurons(&self) -> usize {
        self.neuron_ever_active.iter().filter(|a| !**a).count()
    }

    /// Two-column `ratio,cum_fraction` CSV.
    pub fn cdf_csv(&self) -> String {
        let mut s = String::from("ratio,cum_fraction\n");
        for (r, f) in &self.cdf {
            s.push_str(&format!("{r},{f}\n"));
        }
        s
    }
}

pub fn sparsity_report(t: &ActivationTrace) -> Result<SparsityReport> {
    let samples = t.samples();
    let d_ff = t.d_ff();
    if samples == 0 {
        return Err(Error::Empty("activation trace"));
    }
    let mut active_counts = Vec::with_capacity(samples);
    let mut ever = vec![false; d_ff];
    for i in 0..samples {
        let mut count = 0usize;
        for (j, &v) in t.row(i).iter().enumerate() {
            if v > 0.0 {
                count += 1;
                ever[j] = true;
            }
        }
        active_counts.push(count);
    }
    let total_active: usize = active_counts.iter().sum();
    let entries = samples * d_ff;
    let negative_ratio = (entries - total_active) as f64 / entries as f64;
    let per_sample_active_ratio: Vec<f64> = active_counts
        .iter()
        .map(|&c| c as f64 / d_ff as f64)
        .collect();
    let mean_active_ratio = per_sample_active_ratio.iter().sum::<f64>() / samples as f64;

    // count/d_ff <= i/100  <=>  100·count <= i·d_ff, compared exactly in integers
    let cdf = (1..=CDF_POINTS)
        .map(|i| {
            let below = active_counts
                .iter()
                .filter(|&&c| c * CDF_POINTS <= i * d_ff)
                .count();
            (i as f64 / CDF_POINTS as f64, below as f64 / samples as f64)
        })
        .collect();

    Ok(SparsityReport {
        samples,
        d_ff,
        per_sample_active_ratio,
        neuron_ever_active: ever,
        negative_ratio,
        mean_active_ratio,
        cdf,
    })
}
