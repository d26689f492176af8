//! Restricted MoE forward pass, evaluation against the dense FFN, and
//! second-layer calibration.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{shape_err, Error, Result};
use crate::math::{axpy, mean_squared_error, relu, Adam, FfnWeights, Matrix, Vector};
use crate::router::{score_groundtruth, select_top_n, Router, SelectionBudget};
use crate::splitter::{materialize_experts, ExpertPartition, ExpertWeights};

/// An FFN split into experts with a router and a selection budget.
#[derive(Debug, Clone, PartialEq)]
pub struct MoefiedFfn {
    pub experts: ExpertWeights,
    pub partition: ExpertPartition,
    pub router: Router,
    pub budget: SelectionBudget,
}

impl MoefiedFfn {
    pub fn new(
        experts: ExpertWeights,
        partition: ExpertPartition,
        router: Router,
        budget: SelectionBudget,
    ) -> Result<Self> {
        let k = partition.k();
        if experts.k() != k || router.k() != k || budget.k() != k {
            return Err(Error::Config(format!(
                "expert count mismatch: partition {k}, experts {}, router {}, budget {}",
                experts.k(),
                router.k(),
                budget.k()
            )));
        }
        if experts.d_e() != partition.d_e() {
            return shape_err("expert width differs from partition");
        }
        Ok(Self {
            experts,
            partition,
            router,
            budget,
        })
    }

    /// Split `w` by `partition` and attach `router`.
    pub fn from_dense(
        w: &FfnWeights,
        partition: ExpertPartition,
        router: Router,
        budget: SelectionBudget,
    ) -> Result<Self> {
        let experts = materialize_experts(w, &partition)?;
        Self::new(experts, partition, router, budget)
    }

    pub fn d_model(&self) -> usize {
        self.experts.d_model
    }

    pub fn select(&self, x: &[f64]) -> Result<Vec<usize>> {
        let s = self.router.scores(x, &self.experts)?;
        select_top_n(&s, self.budget)
    }

    /// Sum of selected expert outputs plus `b2`, and the selected set.
    pub fn forward(&self, x: &[f64]) -> Result<(Vector, Vec<usize>)> {
        let selected = self.select(x)?;
        let y = self.forward_with(x, &selected)?;
        Ok((y, selected))
    }

    /// Output when exactly the experts in `selected` run.
    pub fn forward_with(&self, x: &[f64], selected: &[usize]) -> Result<Vector> {
        let mut y = vec![0.0; self.d_model()];
        for &i in selected {
            axpy(1.0, &self.experts.experts[i].contribution(x)?, &mut y);
        }
        axpy(1.0, &self.experts.b2, &mut y);
        Ok(y)
    }

    /// Dense weights equivalent to running every expert.
    pub fn to_dense(&self) -> Result<FfnWeights> {
        self.experts.to_dense(&self.partition)
    }
}

pub fn moe_forward(m: &MoefiedFfn, x: &[f64]) -> Result<(Vector, Vec<usize>)> {
    m.forward(x)
}

/// Fraction of the positive neurons of `h` that lie in `selected` experts;
/// 1 when `h` has no positive entry.
pub fn coverage(h: &[f64], p: &ExpertPartition, selected: &[usize]) -> f64 {
    let mut total = 0usize;
    let mut covered = 0usize;
    for (n, &v) in h.iter().enumerate() {
        if v > 0.0 {
            total += 1;
            if selected.contains(&p.expert_of(n)) {
                covered += 1;
            }
        }
    }
    if total == 0 {
        1.0
    } else {
        covered as f64 / total as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub router: String,
    pub k: usize,
    pub n: usize,
    /// Mean over inputs of the per-coordinate squared error against the
    /// dense FFN output.
    pub output_mse: f64,
    /// Mean fraction of positive neurons inside the selected experts.
    pub coverage: f64,
    /// Coverage the groundtruth selection achieves on the same inputs.
    pub groundtruth_coverage: f64,
    /// Mean `|S ∩ S_gt| / n`.
    pub overlap: f64,
    /// MSE of the MoE output against the dataset targets.
    pub task_mse: f64,
    /// Task MSE of the dense FFN, for reference.
    pub dense_task_mse: f64,
    /// Selected fraction of expert parameters, `n / k`.
    pub flop_ratio: f64,
    /// Inputs where the router covered more positives than groundtruth
    /// selection. Always zero unless something is broken.
    pub dominance_violations: usize,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str =
        "router,k,n,samples,output_mse,coverage,groundtruth_coverage,overlap,task_mse,dense_task_mse,flop_ratio";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.router,
            self.k,
            self.n,
            self.samples,
            self.output_mse,
            self.coverage,
            self.groundtruth_coverage,
            self.overlap,
            self.task_mse,
            self.dense_task_mse,
            self.flop_ratio
        )
    }
}

/// Per-input evaluation record, exposed for paired comparisons.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleEval {
    pub selected: Vec<usize>,
    pub groundtruth: Vec<usize>,
    pub coverage: f64,
    pub groundtruth_coverage: f64,
    pub output_se: f64,
    pub task_se: f64,
    pub dense_task_se: f64,
}

pub fn evaluate_samples(
    m: &MoefiedFfn,
    original: &FfnWeights,
    d: &Dataset,
) -> Result<Vec<SampleEval>> {
    if d.is_empty() {
        return Err(Error::Empty("evaluation dataset"));
    }
    if original.d_model != m.d_model() || original.d_ff != m.partition.d_ff() {
        return shape_err("original FFN does not match the MoEfied model");
    }
    let has_targets = d.target_dim() == m.d_model();
    d.inputs
        .par_iter()
        .zip(d.targets.par_iter())
        .map(|(x, t)| {
            let h = original.preactivation(x)?;
            let dense = original.forward(x)?;
            let (y, selected) = m.forward(x)?;
            let gt = select_top_n(&score_groundtruth(&h, &m.partition)?, m.budget)?;
            let (task_se, dense_task_se) = if has_targets {
                (mean_squared_error(&y, t), mean_squared_error(&dense, t))
            } else {
                (f64::NAN, f64::NAN)
            };
            Ok(SampleEval {
                coverage: coverage(&h, &m.partition, &selected),
                groundtruth_coverage: coverage(&h, &m.partition, &gt),
                selected,
                groundtruth: gt,
                output_se: mean_squared_error(&y, &dense),
                task_se,
                dense_task_se,
            })
        })
        .collect()
}

/// Compare the MoEfied model with the dense FFN it came from over `d`.
pub fn evaluate(m: &MoefiedFfn, original: &FfnWeights, d: &Dataset) -> Result<EvalReport> {
    let per = evaluate_samples(m, original, d)?;
    let count = per.len() as f64;
    let mean = |f: &dyn Fn(&SampleEval) -> f64| per.iter().map(f).sum::<f64>() / count;
    let n = m.budget.n();
    Ok(EvalReport {
        samples: per.len(),
        router: m.router.kind().to_string(),
        k: m.budget.k(),
        n,
        output_mse: mean(&|s| s.output_se),
        coverage: mean(&|s| s.coverage),
        groundtruth_coverage: mean(&|s| s.groundtruth_coverage),
        overlap: mean(&|s| {
            s.selected
                .iter()
                .filter(|i| s.groundtruth.contains(i))
                .count() as f64
                / n as f64
        }),
        task_mse: mean(&|s| s.task_se),
        dense_task_mse: mean(&|s| s.dense_task_se),
        flop_ratio: m.budget.ratio(),
        dominance_violations: per
            .iter()
            .filter(|s| s.coverage > s.groundtruth_coverage + 1e-12)
            .count(),
    })
}

/// What calibration fits the MoE output to.
#[derive(Debug, Clone, Copy)]
pub enum CalibrationTarget<'a> {
    /// Outputs of the dense FFN.
    Original(&'a FfnWeights),
    /// The dataset's own targets.
    Task,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 20,
            batch: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CalibrationOutcome {
    pub model: MoefiedFfn,
    /// Mean MSE over the calibration set before training and after each epoch.
    pub loss_history: Vec<f64>,
}

/// Second-layer parameters: every expert's `W2` block followed by `b2`.
pub fn second_layer_flat(m: &MoefiedFfn) -> Vector {
    let mut v: Vector = m
        .experts
        .experts
        .iter()
        .flat_map(|e| e.w2.data().iter().copied())
        .collect();
    v.extend_from_slice(&m.experts.b2);
    v
}

pub fn set_second_layer_flat(m: &mut MoefiedFfn, flat: &[f64]) -> Result<()> {
    let block = m.partition.d_e() * m.d_model();
    let k = m.experts.k();
    let expected = block * k + m.d_model();
    if flat.len() != expected {
        return shape_err(format!(
            "second-layer vector has {} values, expected {expected}",
            flat.len()
        ));
    }
    for (i, e) in m.experts.experts.iter_mut().enumerate() {
        e.w2.data_mut()
            .copy_from_slice(&flat[i * block..(i + 1) * block]);
    }
    m.experts.b2.copy_from_slice(&flat[block * k..]);
    Ok(())
}

/// Precomputed first-layer activations and selection for one sample. These
/// do not depend on the second layer, so they stay fixed during calibration.
#[derive(Debug, Clone)]
pub struct FrozenSample {
    pub selected: Vec<usize>,
    /// `relu(x·W1ⁱ + b1ⁱ)` for each selected expert, same order.
    pub activations: Vec<Vector>,
}

pub fn freeze_sample(m: &MoefiedFfn, x: &[f64]) -> Result<FrozenSample> {
    let selected = m.select(x)?;
    let activations = selected
        .iter()
        .map(|&i| Ok(relu(&m.experts.experts[i].preactivation(x)?)))
        .collect::<Result<_>>()?;
    Ok(FrozenSample {
        selected,
        activations,
    })
}

/// Batch MSE (averaged over samples and output coordinates) and its
/// gradient with respect to [`second_layer_flat`].
pub fn calibration_loss_and_grad(
    m: &MoefiedFfn,
    samples: &[&FrozenSample],
    targets: &[&[f64]],
) -> Result<(f64, Vector)> {
    if samples.len() != targets.len() {
        return shape_err("samples and targets differ in length");
    }
    if samples.is_empty() {
        return Err(Error::Empty("calibration batch"));
    }
    let d_model = m.d_model();
    let d_e = m.partition.d_e();
    let block = d_e * d_model;
    let k = m.experts.k();
    let scale = 1.0 / (samples.len() * d_model) as f64;
    let mut grad = vec![0.0; block * k + d_model];
    let mut loss = 0.0;
    for (s, t) in samples.iter().zip(targets) {
        let mut y = m.experts.b2.clone();
        for (&i, a) in s.selected.iter().zip(&s.activations) {
            axpy(1.0, &m.experts.experts[i].w2.vec_mul(a)?, &mut y);
        }
        let dy: Vector = y.iter().zip(t.iter()).map(|(a, b)| a - b).collect();
        loss += dy.iter().map(|v| v * v).sum::<f64>() * scale;
        let dy: Vector = dy.iter().map(|v| 2.0 * scale * v).collect();
        for (&i, a) in s.selected.iter().zip(&s.activations) {
            let mut g = Matrix::new(d_e, d_model, grad[i * block..(i + 1) * block].to_vec())?;
            g.add_outer(1.0, a, &dy);
            grad[i * block..(i + 1) * block].copy_from_slice(g.data());
        }
        axpy(1.0, &dy, &mut grad[block * k..]);
    }
    Ok((loss, grad))
}

/// Fine-tune only the experts' `W2` blocks and `b2` so the restricted
/// forward pass tracks `target`. `W1`, `b1`, router, partition and budget
/// are left untouched.
pub fn calibrate(
    m: &MoefiedFfn,
    d: &Dataset,
    target: CalibrationTarget<'_>,
    cfg: &CalibrationConfig,
) -> Result<CalibrationOutcome> {
    if d.is_empty() {
        return Err(Error::Empty("calibration dataset"));
    }
    if cfg.lr.is_nan() || cfg.lr < 0.0 || cfg.batch == 0 {
        return Err(Error::Config(
            "calibration needs lr >= 0 and batch >= 1".into(),
        ));
    }
    let targets: Vec<Vector> = match target {
        CalibrationTarget::Original(w) => d
            .inputs
            .iter()
            .map(|x| w.forward(x))
            .collect::<Result<_>>()?,
        CalibrationTarget::Task => {
            if d.target_dim() != m.d_model() {
                return shape_err("task targets do not match d_model");
            }
            d.targets.clone()
        }
    };
    let frozen: Vec<FrozenSample> = d
        .inputs
        .par_iter()
        .map(|x| freeze_sample(m, x))
        .collect::<Result<_>>()?;
    let all: Vec<usize> = (0..d.len()).collect();
    let full_loss = |model: &MoefiedFfn| -> Result<f64> {
        let s: Vec<&FrozenSample> = all.iter().map(|&i| &frozen[i]).collect();
        let t: Vec<&[f64]> = all.iter().map(|&i| targets[i].as_slice()).collect();
        Ok(calibration_loss_and_grad(model, &s, &t)?.0)
    };

    let mut model = m.clone();
    let mut history = vec![full_loss(&model)?];
    if cfg.lr == 0.0 || cfg.epochs == 0 {
        return Ok(CalibrationOutcome {
            model,
            loss_history: history,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut flat = second_layer_flat(&model);
    let mut opt = Adam::new(flat.len(), cfg.lr);
    let mut order = all.clone();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch) {
            let s: Vec<&FrozenSample> = chunk.iter().map(|&i| &frozen[i]).collect();
            let t: Vec<&[f64]> = chunk.iter().map(|&i| targets[i].as_slice()).collect();
            let (loss, grad) = calibration_loss_and_grad(&model, &s, &t)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            opt.update(&mut flat, &grad);
            set_second_layer_flat(&mut model, &flat)?;
        }
        let loss = full_loss(&model)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { epoch, loss });
        }
        history.push(loss);
    }
    Ok(CalibrationOutcome {
        model,
        loss_history: history,
    })
}
