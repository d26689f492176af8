//! In-memory pipeline stages shared by the subcommands, `pipeline` and
//! `sweep`.

use moefication::data::{gen_synthetic, Dataset};
use moefication::engine::{calibrate, evaluate, CalibrationConfig, CalibrationTarget, EvalReport};
use moefication::profiler::{record_trace, ActivationTrace};
use moefication::router::{
    train_learnable_router, Router, RouterFile, RouterKind, RouterTrainConfig,
};
use moefication::splitter::{
    build_coactivation_graph, materialize_experts, split_cluster, split_coactivation, split_random,
    ExpertPartition, PartitionFile, SplitMethod,
};
use moefication::train::{dataset_mse, train_toy_ffn, ToyTrainConfig};
use moefication::FfnWeights;
use serde::{Deserialize, Serialize};

use crate::bundle::Bundle;
use crate::config::{Calibration, CalibrationGoal, DatasetSpec, RouterTraining, ToyTraining};
use crate::error::CliResult;

/// Lloyd iterations for the parameter-clustering split.
pub const KMEANS_ITERS: usize = 50;

pub fn generate_data(spec: &DatasetSpec, train_seed: u64, eval_seed: u64) -> (Dataset, Dataset) {
    let kind = spec.synthetic_kind();
    let mut train = gen_synthetic(kind, spec.train_samples, spec.d_model, train_seed);
    let mut eval = gen_synthetic(kind, spec.eval_samples, spec.d_model, eval_seed);
    train.name = "train".into();
    eval.name = "eval".into();
    (train, eval)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub d_model: usize,
    pub d_ff: usize,
    pub samples: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub bias_init: f64,
    pub seed: u64,
    pub loss_history: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_mse: Option<f64>,
}

pub fn train_toy(
    train: &Dataset,
    eval: Option<&Dataset>,
    d_ff: usize,
    t: &ToyTraining,
    seed: u64,
) -> CliResult<(FfnWeights, TrainReport)> {
    let cfg = ToyTrainConfig {
        d_ff,
        epochs: t.epochs,
        lr: t.lr,
        batch: t.batch,
        seed,
        bias_init: t.bias_init,
    };
    let out = train_toy_ffn(train, &cfg)?;
    let eval_mse = eval.map(|d| dataset_mse(&out.weights, d)).transpose()?;
    let report = TrainReport {
        d_model: train.input_dim(),
        d_ff,
        samples: train.len(),
        epochs: t.epochs,
        lr: t.lr,
        batch: t.batch,
        bias_init: t.bias_init,
        seed,
        loss_history: out.loss_history,
        eval_mse,
    };
    Ok((out.weights, report))
}

/// Split `w` into `k` experts. Only the co-activation method reads `data`.
pub fn build_partition(
    w: &FfnWeights,
    data: &Dataset,
    method: SplitMethod,
    k: usize,
    quantile: f64,
    seed: u64,
) -> CliResult<PartitionFile> {
    let (p, q) = match method {
        SplitMethod::Random => (split_random(w.d_ff, k, seed)?, None),
        SplitMethod::Cluster => (split_cluster(w, k, seed, KMEANS_ITERS)?, None),
        SplitMethod::Coact => {
            let trace = record_trace(w, data)?;
            let g = build_coactivation_graph(&trace, quantile)?;
            (split_coactivation(&g, k, seed)?, Some(quantile))
        }
    };
    Ok(PartitionFile::new(&p, method, seed, q))
}

/// Build a router of `kind` for `w` split by `p`. Only the learnable
/// router trains, on `data`; `trace` is recorded when not supplied.
pub fn build_router(
    w: &FfnWeights,
    p: &ExpertPartition,
    data: &Dataset,
    trace: Option<&ActivationTrace>,
    kind: RouterKind,
    cfg: &RouterTraining,
    seed: u64,
) -> CliResult<RouterFile> {
    let experts = materialize_experts(w, p)?;
    let router = match kind {
        RouterKind::Groundtruth => Router::Groundtruth { k: p.k() },
        RouterKind::RandomCenter => Router::random_center(&experts),
        RouterKind::ParamCenter => Router::param_center(&experts),
        RouterKind::Learnable => {
            let owned;
            let trace = match trace {
                Some(t) => t,
                None => {
                    owned = record_trace(w, data)?;
                    &owned
                }
            };
            let rcfg = RouterTrainConfig {
                lr: cfg.lr,
                epochs: cfg.epochs,
                batch: cfg.batch,
                dev_fraction: cfg.dev_fraction,
                seed,
                loss: cfg.loss,
            };
            let trained = train_learnable_router(w, p, &data.inputs, trace, &rcfg)?;
            let mut file = RouterFile::new(&Router::Learnable(trained.params), w.d_model, seed);
            file.train_loss = trained.train_loss;
            file.dev_loss = trained.dev_loss;
            return Ok(file);
        }
    };
    Ok(RouterFile::new(&router, w.d_model, seed))
}

pub fn eval_bundle(b: &Bundle, original: &FfnWeights, data: &Dataset) -> CliResult<EvalReport> {
    Ok(evaluate(&b.moefied()?, original, data)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub target: CalibrationGoal,
    /// Mean MSE on the calibration set before training and after each epoch.
    pub loss_history: Vec<f64>,
}

/// Calibrate the second layers of `b` and return the updated bundle.
pub fn calibrate_bundle(
    b: &Bundle,
    original: &FfnWeights,
    data: &Dataset,
    cfg: &Calibration,
    seed: u64,
) -> CliResult<(Bundle, CalibrationReport)> {
    let m = b.moefied()?;
    let target = match cfg.target {
        CalibrationGoal::Original => CalibrationTarget::Original(original),
        CalibrationGoal::Task => CalibrationTarget::Task,
    };
    let ccfg = CalibrationConfig {
        lr: cfg.lr,
        epochs: cfg.epochs,
        batch: cfg.batch,
        seed,
    };
    let out = calibrate(&m, data, target, &ccfg)?;
    let calibrated = Bundle {
        weights: out.model.to_dense()?,
        partition: b.partition.clone(),
        router: b.router.clone(),
        n: b.n,
        calibrated: true,
    };
    let report = CalibrationReport {
        lr: cfg.lr,
        epochs: cfg.epochs,
        batch: cfg.batch,
        seed,
        target: cfg.target,
        loss_history: out.loss_history,
    };
    Ok((calibrated, report))
}

/// `EvalReport` as a two-line CSV: header and row.
pub fn eval_csv(r: &EvalReport) -> String {
    format!("{}\n{}\n", EvalReport::CSV_HEADER, r.csv_row())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DataKind;

    fn small() -> (Dataset, FfnWeights) {
        let spec = DatasetSpec {
            kind: DataKind::SparseRegression,
            groups: 2,
            train_samples: 200,
            eval_samples: 50,
            d_model: 8,
        };
        let (train, _) = generate_data(&spec, 0, 1);
        let t = ToyTraining {
            epochs: 2,
            ..Default::default()
        };
        let (w, _) = train_toy(&train, None, 16, &t, 2).unwrap();
        (train, w)
    }

    #[test]
    fn every_router_kind_builds_and_round_trips() {
        let (d, w) = small();
        for method in SplitMethod::ALL {
            let pf = build_partition(&w, &d, method, 4, 0.8, 3).unwrap();
            let p = pf.to_partition().unwrap();
            for kind in RouterKind::ALL {
                let cfg = RouterTraining {
                    epochs: 2,
                    ..Default::default()
                };
                let rf = build_router(&w, &p, &d, None, kind, &cfg, 4).unwrap();
                assert_eq!(rf.kind, kind);
                assert_eq!(rf.to_router().unwrap().k(), 4);
            }
        }
    }

    #[test]
    fn calibration_keeps_first_layer_bits() {
        let (d, w) = small();
        let pf = build_partition(&w, &d, SplitMethod::Random, 4, 0.8, 0).unwrap();
        let rf = build_router(
            &w,
            &pf.to_partition().unwrap(),
            &d,
            None,
            RouterKind::ParamCenter,
            &RouterTraining::default(),
            0,
        )
        .unwrap();
        let b = Bundle {
            weights: w.clone(),
            partition: pf,
            router: rf,
            n: 1,
            calibrated: false,
        };
        let cfg = Calibration {
            epochs: 3,
            ..Default::default()
        };
        let (c, report) = calibrate_bundle(&b, &w, &d, &cfg, 0).unwrap();
        assert_eq!(report.loss_history.len(), 4);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(c.weights.w1.data()), bits(w.w1.data()));
        assert_eq!(bits(&c.weights.b1), bits(&w.b1));
        assert_eq!(c.router, b.router);
        assert_ne!(bits(c.weights.w2.data()), bits(w.w2.data()));
    }
}
