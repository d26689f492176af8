//! Experiment configuration shared by `pipeline` and `sweep`.

use std::path::{Path, PathBuf};

use moefication::data::SyntheticKind;
use moefication::router::{RouterKind, RouterLoss, SelectionBudget};
use moefication::splitter::{SplitMethod, DEFAULT_QUANTILE};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const SEED_ENV: &str = "MOEF_SEED";

/// Fraction of experts selected when `n` is not given.
pub const DEFAULT_BUDGET_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Blobs,
    SparseRegression,
    RandomProj,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DataKind,
    /// Latent groups for `sparse_regression`.
    pub groups: usize,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub d_model: usize,
}

impl DatasetSpec {
    pub fn synthetic_kind(&self) -> SyntheticKind {
        match self.kind {
            DataKind::Blobs => SyntheticKind::Blobs,
            DataKind::SparseRegression => SyntheticKind::SparseRegression {
                groups: self.groups,
            },
            DataKind::RandomProj => SyntheticKind::RandomProj,
        }
    }
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            kind: DataKind::SparseRegression,
            groups: 4,
            train_samples: 4000,
            eval_samples: 1000,
            d_model: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyTraining {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub bias_init: f64,
}

impl Default for ToyTraining {
    fn default() -> Self {
        let d = moefication::train::ToyTrainConfig::default();
        Self {
            epochs: d.epochs,
            lr: d.lr,
            batch: d.batch,
            bias_init: d.bias_init,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RouterTraining {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub dev_fraction: f64,
    pub loss: RouterLoss,
}

impl Default for RouterTraining {
    fn default() -> Self {
        let d = moefication::router::RouterTrainConfig::default();
        Self {
            lr: d.lr,
            epochs: d.epochs,
            batch: d.batch,
            dev_fraction: d.dev_fraction,
            loss: d.loss,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CalibrationGoal {
    /// Match the dense model's outputs.
    #[default]
    Original,
    /// Match the dataset targets.
    Task,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Calibration {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub target: CalibrationGoal,
}

impl Default for Calibration {
    fn default() -> Self {
        let d = moefication::engine::CalibrationConfig::default();
        Self {
            lr: d.lr,
            epochs: d.epochs,
            batch: d.batch,
            target: CalibrationGoal::Original,
        }
    }
}

/// Per-stage seeds, all derived from the base seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSeeds {
    pub train_data: u64,
    pub eval_data: u64,
    pub train_toy: u64,
    pub split: u64,
    pub router: u64,
    pub calibrate: u64,
}

impl StageSeeds {
    pub fn derive(base: u64) -> Self {
        Self {
            train_data: base,
            eval_data: base.wrapping_add(1),
            train_toy: base.wrapping_add(2),
            split: base.wrapping_add(3),
            router: base.wrapping_add(4),
            calibrate: base.wrapping_add(5),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Existing model file. When absent the pipeline trains a toy FFN.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    pub dataset: DatasetSpec,
    pub d_ff: usize,
    pub k: usize,
    /// Experts selected per input; `ceil(0.2 k)` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    pub split: SplitMethod,
    pub router: RouterKind,
    pub quantile: f64,
    pub seed: u64,
    pub train: ToyTraining,
    pub router_training: RouterTraining,
    pub calibration: Calibration,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: None,
            dataset: DatasetSpec::default(),
            d_ff: 512,
            k: 16,
            n: None,
            split: SplitMethod::Coact,
            router: RouterKind::Learnable,
            quantile: DEFAULT_QUANTILE,
            seed: 0,
            train: ToyTraining::default(),
            router_training: RouterTraining::default(),
            calibration: Calibration::default(),
            output: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| CliError::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Replace the base seed with `MOEF_SEED` when it is set.
    pub fn apply_env(&mut self) -> CliResult<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("{SEED_ENV}={v:?} is not a u64")))?;
        }
        Ok(())
    }

    pub fn budget(&self) -> CliResult<SelectionBudget> {
        self.validate()?;
        let b = match self.n {
            Some(n) => SelectionBudget::new(n, self.k),
            None => SelectionBudget::from_fraction(DEFAULT_BUDGET_FRACTION, self.k),
        };
        Ok(b?)
    }

    pub fn seeds(&self) -> StageSeeds {
        StageSeeds::derive(self.seed)
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.k == 0 || self.d_ff == 0 {
            return Err(CliError::Config("k and d_ff must be at least 1".into()));
        }
        if !self.d_ff.is_multiple_of(self.k) {
            return Err(CliError::Config(format!(
                "k must divide d_ff (k = {}, d_ff = {})",
                self.k, self.d_ff
            )));
        }
        if let Some(n) = self.n {
            if n == 0 || n > self.k {
                return Err(CliError::Config(format!(
                    "n must satisfy 1 <= n <= k (n = {n}, k = {})",
                    self.k
                )));
            }
        }
        if !(0.0..1.0).contains(&self.quantile) {
            return Err(CliError::Config(format!(
                "quantile must be in [0, 1), got {}",
                self.quantile
            )));
        }
        if self.dataset.kind == DataKind::SparseRegression
            && (self.dataset.groups == 0 || self.dataset.groups > self.dataset.d_model)
        {
            return Err(CliError::Config(format!(
                "sparse_regression needs 1 <= groups <= d_model (groups = {})",
                self.dataset.groups
            )));
        }
        if self.dataset.d_model == 0
            || self.dataset.train_samples == 0
            || self.dataset.eval_samples == 0
        {
            return Err(CliError::Config(
                "dataset needs d_model, train_samples and eval_samples of at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_desk_scale() {
        let c = ExperimentConfig::default();
        assert_eq!((c.dataset.d_model, c.d_ff, c.k), (64, 512, 16));
        assert_eq!(c.budget().unwrap().n(), 4);
    }

    #[test]
    fn json_round_trip_and_partial_files() {
        let c = ExperimentConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, c);
        let partial: ExperimentConfig =
            serde_json::from_str(r#"{"k": 8, "dataset": {"kind": "blobs"}}"#).unwrap();
        assert_eq!(partial.k, 8);
        assert_eq!(partial.dataset.synthetic_kind(), SyntheticKind::Blobs);
        assert_eq!(partial.dataset.d_model, 64);
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"experts": 8}"#).is_err());
    }

    #[test]
    fn non_dividing_k_names_constraint() {
        let c = ExperimentConfig {
            k: 7,
            ..Default::default()
        };
        let err = c.validate().unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("k must divide d_ff"));
    }
}
