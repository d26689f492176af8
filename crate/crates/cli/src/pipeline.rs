//! The full train → profile → split → route → eval → calibrate → eval run.

use std::path::{Path, PathBuf};

use moefication::model_file::{load_model, save_model};
use moefication::profiler::{record_trace, sparsity_report};
use moefication::router::SelectionBudget;
use moefication::FfnWeights;
use serde::{Deserialize, Serialize};

use crate::bundle::{Bundle, BundlePaths, INFO_FILE, MODEL_FILE, PARTITION_FILE, ROUTER_FILE};
use crate::config::{ExperimentConfig, StageSeeds};
use crate::error::{CliError, CliResult};
use crate::files::{list_files, prepare_dir, sha256_file, write_json, write_text};
use crate::stages;

pub const MANIFEST_FILE: &str = "manifest.json";

pub const STAGES: [&str; 7] = [
    "train-toy",
    "profile",
    "split",
    "train-router",
    "eval",
    "calibrate",
    "eval-calibrated",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Ok,
    /// Not needed, e.g. `train-toy` when a model file was supplied.
    Skipped,
    Failed,
    NotRun,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    pub name: String,
    pub status: StageStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Files written by the stage, relative to the output directory.
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub core_version: String,
    pub config: ExperimentConfig,
    pub seeds: StageSeeds,
    pub n: usize,
    /// Files read from outside the output directory.
    pub inputs: Vec<FileHash>,
    pub stages: Vec<StageEntry>,
    /// Every file under the output directory except the manifest.
    pub files: Vec<FileHash>,
}

impl Manifest {
    pub fn all_ok(&self) -> bool {
        self.stages
            .iter()
            .all(|s| matches!(s.status, StageStatus::Ok | StageStatus::Skipped))
    }
}

struct Runner<'a> {
    out: &'a Path,
    stages: Vec<StageEntry>,
}

impl Runner<'_> {
    fn stage<T>(
        &mut self,
        name: &'static str,
        f: impl FnOnce(&Path) -> CliResult<(T, Vec<String>)>,
    ) -> CliResult<T> {
        match f(self.out) {
            Ok((value, outputs)) => {
                self.stages.push(StageEntry {
                    name: name.into(),
                    status: StageStatus::Ok,
                    error: None,
                    outputs,
                });
                Ok(value)
            }
            Err(e) => {
                self.stages.push(StageEntry {
                    name: name.into(),
                    status: StageStatus::Failed,
                    error: Some(e.to_string()),
                    outputs: Vec::new(),
                });
                Err(CliError::Stage {
                    stage: name,
                    source: Box::new(e),
                })
            }
        }
    }
}

fn mkdir(p: &Path) -> CliResult<()> {
    std::fs::create_dir_all(p).map_err(|e| CliError::io(p, e))
}

fn execute(
    cfg: &ExperimentConfig,
    budget: SelectionBudget,
    seeds: &StageSeeds,
    r: &mut Runner<'_>,
) -> CliResult<()> {
    let (train, eval) = stages::generate_data(&cfg.dataset, seeds.train_data, seeds.eval_data);

    let weights: FfnWeights = match &cfg.model {
        Some(path) => {
            let w = r.stage("train-toy", |out| {
                let w = load_model(path)?;
                if w.d_model != cfg.dataset.d_model || w.d_ff != cfg.d_ff {
                    return Err(CliError::Config(format!(
                        "model {} is {}x{} but the config asks for d_model = {}, d_ff = {}",
                        path.display(),
                        w.d_model,
                        w.d_ff,
                        cfg.dataset.d_model,
                        cfg.d_ff
                    )));
                }
                mkdir(&out.join("data"))?;
                train.save_csv(out.join("data/train.csv"))?;
                eval.save_csv(out.join("data/eval.csv"))?;
                save_model(&w, out.join(MODEL_FILE))?;
                Ok((
                    w,
                    vec![
                        "data/eval.csv".into(),
                        "data/train.csv".into(),
                        MODEL_FILE.into(),
                    ],
                ))
            })?;
            r.stages.last_mut().expect("just pushed").status = StageStatus::Skipped;
            w
        }
        None => r.stage("train-toy", |out| {
            mkdir(&out.join("data"))?;
            train.save_csv(out.join("data/train.csv"))?;
            eval.save_csv(out.join("data/eval.csv"))?;
            let (w, report) =
                stages::train_toy(&train, Some(&eval), cfg.d_ff, &cfg.train, seeds.train_toy)?;
            save_model(&w, out.join(MODEL_FILE))?;
            write_json(&out.join("train_report.json"), &report)?;
            Ok((
                w,
                vec![
                    "data/eval.csv".into(),
                    "data/train.csv".into(),
                    MODEL_FILE.into(),
                    "train_report.json".into(),
                ],
            ))
        })?,
    };

    let trace = r.stage("profile", |out| {
        let trace = record_trace(&weights, &train)?;
        let report = sparsity_report(&trace)?;
        mkdir(&out.join("profile"))?;
        write_json(&out.join("profile/sparsity.json"), &report)?;
        write_text(&out.join("profile/cdf.csv"), &report.cdf_csv())?;
        Ok((
            trace,
            vec!["profile/cdf.csv".into(), "profile/sparsity.json".into()],
        ))
    })?;

    let partition = r.stage("split", |out| {
        let pf = stages::build_partition(
            &weights,
            &train,
            cfg.split,
            cfg.k,
            cfg.quantile,
            seeds.split,
        )?;
        pf.save(out.join(PARTITION_FILE))?;
        Ok((pf, vec![PARTITION_FILE.into()]))
    })?;

    let bundle = r.stage("train-router", |out| {
        let p = partition.to_partition()?;
        let router = stages::build_router(
            &weights,
            &p,
            &train,
            Some(&trace),
            cfg.router,
            &cfg.router_training,
            seeds.router,
        )?;
        let b = Bundle {
            weights: weights.clone(),
            partition: partition.clone(),
            router,
            n: budget.n(),
            calibrated: false,
        };
        b.router.save(out.join(ROUTER_FILE))?;
        write_json(&out.join(INFO_FILE), &b.info())?;
        Ok((b, vec![INFO_FILE.into(), ROUTER_FILE.into()]))
    })?;

    r.stage("eval", |out| {
        let report = stages::eval_bundle(&bundle, &weights, &eval)?;
        mkdir(&out.join("eval"))?;
        write_json(&out.join("eval/report.json"), &report)?;
        write_text(&out.join("eval/report.csv"), &stages::eval_csv(&report))?;
        Ok((
            (),
            vec!["eval/report.csv".into(), "eval/report.json".into()],
        ))
    })?;

    let calibrated = r.stage("calibrate", |out| {
        let (c, report) =
            stages::calibrate_bundle(&bundle, &weights, &train, &cfg.calibration, seeds.calibrate)?;
        let dir = out.join("calibrated");
        mkdir(&dir)?;
        c.save(&dir)?;
        write_json(&dir.join("calibration.json"), &report)?;
        let outputs = [
            INFO_FILE,
            "calibration.json",
            MODEL_FILE,
            PARTITION_FILE,
            ROUTER_FILE,
        ]
        .iter()
        .map(|f| format!("calibrated/{f}"))
        .collect();
        Ok((c, outputs))
    })?;

    r.stage("eval-calibrated", |out| {
        // read back from disk so the written bundle is what gets measured
        let c = Bundle::load(&BundlePaths::in_dir(&out.join("calibrated")), None)?;
        debug_assert_eq!(c.weights, calibrated.weights);
        let report = stages::eval_bundle(&c, &weights, &eval)?;
        mkdir(&out.join("eval_calibrated"))?;
        write_json(&out.join("eval_calibrated/report.json"), &report)?;
        write_text(
            &out.join("eval_calibrated/report.csv"),
            &stages::eval_csv(&report),
        )?;
        Ok((
            (),
            vec![
                "eval_calibrated/report.csv".into(),
                "eval_calibrated/report.json".into(),
            ],
        ))
    })?;
    Ok(())
}

/// Run every stage into `out`. The manifest is written even when a stage
/// fails; the error is returned after it.
pub fn run_pipeline(cfg: &ExperimentConfig, out: &Path, force: bool) -> CliResult<Manifest> {
    let budget = cfg.budget()?;
    let seeds = cfg.seeds();
    let mut inputs = Vec::new();
    if let Some(model) = &cfg.model {
        inputs.push(FileHash {
            path: model.display().to_string(),
            sha256: sha256_file(model)?,
        });
    }
    prepare_dir(out, force)?;
    let mut runner = Runner {
        out,
        stages: Vec::new(),
    };
    let result = execute(cfg, budget, &seeds, &mut runner);
    let mut stages = runner.stages;
    for name in STAGES.iter().skip(stages.len()) {
        stages.push(StageEntry {
            name: (*name).into(),
            status: StageStatus::NotRun,
            error: None,
            outputs: Vec::new(),
        });
    }
    let mut files = Vec::new();
    for rel in list_files(out)? {
        if rel != MANIFEST_FILE {
            files.push(FileHash {
                sha256: sha256_file(&out.join(&rel))?,
                path: rel,
            });
        }
    }
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        core_version: moefication::VERSION.into(),
        config: ExperimentConfig {
            output: None,
            ..cfg.clone()
        },
        seeds,
        n: budget.n(),
        inputs,
        stages,
        files,
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    result.map(|()| manifest)
}

/// Output directory from the config when no flag gave one.
pub fn output_dir(flag: Option<PathBuf>, cfg: &ExperimentConfig) -> CliResult<PathBuf> {
    flag.or_else(|| cfg.output.clone())
        .ok_or_else(|| CliError::Config("no output directory: pass --out or set \"output\"".into()))
}
