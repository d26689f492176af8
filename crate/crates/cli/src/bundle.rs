//! The model + partition + router directory that `eval` and `calibrate`
//! read and `calibrate` writes.

use std::path::{Path, PathBuf};

use moefication::engine::MoefiedFfn;
use moefication::model_file::{load_model, save_model};
use moefication::router::{RouterFile, RouterKind, SelectionBudget};
use moefication::splitter::{PartitionFile, SplitMethod};
use moefication::FfnWeights;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::files::{read_json, write_json};

pub const MODEL_FILE: &str = "model.moef";
pub const PARTITION_FILE: &str = "partition.json";
pub const ROUTER_FILE: &str = "router.json";
pub const INFO_FILE: &str = "bundle.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleInfo {
    pub d_model: usize,
    pub d_ff: usize,
    pub k: usize,
    pub n: usize,
    pub split: SplitMethod,
    pub router: RouterKind,
    pub calibrated: bool,
}

#[derive(Debug, Clone)]
pub struct Bundle {
    /// Dense weights. For a calibrated bundle the experts' second layers
    /// are scattered back into `W2` by the inverse permutation.
    pub weights: FfnWeights,
    pub partition: PartitionFile,
    pub router: RouterFile,
    pub n: usize,
    pub calibrated: bool,
}

/// Paths of the three parts, possibly coming from a bundle directory.
#[derive(Debug, Clone)]
pub struct BundlePaths {
    pub model: PathBuf,
    pub partition: PathBuf,
    pub router: PathBuf,
    /// `bundle.json`, when reading from a directory.
    pub info: Option<PathBuf>,
}

impl BundlePaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            model: dir.join(MODEL_FILE),
            partition: dir.join(PARTITION_FILE),
            router: dir.join(ROUTER_FILE),
            info: Some(dir.join(INFO_FILE)),
        }
    }
}

impl Bundle {
    /// Load the parts. `n` falls back to the bundle's recorded budget.
    pub fn load(paths: &BundlePaths, n: Option<usize>) -> CliResult<Self> {
        let weights = load_model(&paths.model)?;
        let partition = PartitionFile::load(&paths.partition)?;
        let router = RouterFile::load(&paths.router)?;
        let info: Option<BundleInfo> = match &paths.info {
            Some(p) if p.exists() => Some(read_json(p)?),
            _ => None,
        };
        let n = match (n, &info) {
            (Some(n), _) => n,
            (None, Some(i)) => i.n,
            (None, None) => {
                return Err(CliError::Config(
                    "selection budget unknown: pass --n or a bundle directory".into(),
                ))
            }
        };
        Ok(Self {
            weights,
            partition,
            router,
            n,
            calibrated: info.is_some_and(|i| i.calibrated),
        })
    }

    pub fn moefied(&self) -> CliResult<MoefiedFfn> {
        let p = self.partition.to_partition()?;
        if p.d_ff() != self.weights.d_ff {
            return Err(CliError::Config(format!(
                "partition covers {} neurons but the model has d_ff = {}",
                p.d_ff(),
                self.weights.d_ff
            )));
        }
        if self.router.d_model != self.weights.d_model {
            return Err(CliError::Config(format!(
                "router expects d_model = {} but the model has {}",
                self.router.d_model, self.weights.d_model
            )));
        }
        let budget = SelectionBudget::new(self.n, p.k())?;
        Ok(MoefiedFfn::from_dense(
            &self.weights,
            p,
            self.router.to_router()?,
            budget,
        )?)
    }

    pub fn info(&self) -> BundleInfo {
        BundleInfo {
            d_model: self.weights.d_model,
            d_ff: self.weights.d_ff,
            k: self.partition.k,
            n: self.n,
            split: self.partition.method,
            router: self.router.kind,
            calibrated: self.calibrated,
        }
    }

    /// Write into an existing directory.
    pub fn save(&self, dir: &Path) -> CliResult<()> {
        let paths = BundlePaths::in_dir(dir);
        save_model(&self.weights, &paths.model)?;
        self.partition.save(&paths.partition)?;
        self.router.save(&paths.router)?;
        write_json(&dir.join(INFO_FILE), &self.info())
    }
}
