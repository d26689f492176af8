//! `moefy`: run the MoEfication pipeline on toy FFNs from the shell.

pub mod bundle;
pub mod config;
pub mod error;
pub mod files;
pub mod pipeline;
pub mod stages;
pub mod sweep;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use moefication::data::Dataset;
use moefication::model_file::{load_model, save_model};
use moefication::profiler::{record_trace, sparsity_report};
use moefication::router::{RouterKind, RouterLoss};
use moefication::splitter::{PartitionFile, SplitMethod, DEFAULT_QUANTILE};

use crate::bundle::{Bundle, BundlePaths};
use crate::config::{
    Calibration, CalibrationGoal, DataKind, DatasetSpec, ExperimentConfig, RouterTraining,
    StageSeeds, ToyTraining,
};
use crate::error::{CliError, CliResult};
use crate::files::{prepare_dir, prepare_file, write_json, write_text};

#[derive(Debug, Parser)]
#[command(
    name = "moefy",
    version,
    about = "Split ReLU FFNs into mixtures of experts"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset and train a toy FFN on it.
    TrainToy(TrainToyArgs),
    /// Record activations and write the sparsity report and CDF.
    Profile(ProfileArgs),
    /// Partition the FFN's neurons into equal-size experts.
    Split(SplitArgs),
    /// Build or train a router for a partition.
    TrainRouter(TrainRouterArgs),
    /// Compare a MoEfied model with its dense original.
    Eval(EvalArgs),
    /// Fine-tune the experts' second layers and write a new bundle.
    Calibrate(CalibrateArgs),
    /// Evaluate every split method with every router.
    Sweep(SweepArgs),
    /// Run every stage end to end and write a manifest.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DataKindArg {
    Blobs,
    SparseRegression,
    RandomProj,
}

impl From<DataKindArg> for DataKind {
    fn from(k: DataKindArg) -> Self {
        match k {
            DataKindArg::Blobs => DataKind::Blobs,
            DataKindArg::SparseRegression => DataKind::SparseRegression,
            DataKindArg::RandomProj => DataKind::RandomProj,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LossArg {
    /// Softmax cross-entropy on normalized counts.
    Ce,
    /// Per-expert sigmoid cross-entropy.
    Bce,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TargetArg {
    Original,
    Task,
}

#[derive(Debug, Args)]
pub struct TrainToyArgs {
    #[arg(long, value_enum, default_value = "sparse-regression")]
    pub kind: DataKindArg,
    #[arg(long, default_value_t = 4)]
    pub groups: usize,
    #[arg(long, default_value_t = 64)]
    pub d_model: usize,
    #[arg(long, default_value_t = 512)]
    pub d_ff: usize,
    #[arg(long, default_value_t = 4000)]
    pub samples: usize,
    #[arg(long, default_value_t = 1000)]
    pub eval_samples: usize,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub bias_init: Option<f64>,
    /// Base seed; defaults to $MOEF_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory for model.moef, train.csv, eval.csv and train_report.json.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset CSV.
    #[arg(long)]
    pub data: PathBuf,
    /// Directory for sparsity.json and cdf.csv.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset CSV; required for `coact`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "coact")]
    pub method: SplitMethod,
    #[arg(long)]
    pub experts: usize,
    #[arg(long, default_value_t = DEFAULT_QUANTILE)]
    pub quantile: f64,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Partition JSON to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainRouterArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub partition: PathBuf,
    /// Dataset CSV; required for `learn`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "learn")]
    pub router: RouterKind,
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 512)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.1)]
    pub dev_fraction: f64,
    #[arg(long, value_enum, default_value = "ce")]
    pub loss: LossArg,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Router JSON to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

/// Either a bundle directory or the three files.
#[derive(Debug, Args)]
pub struct BundleArgs {
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub partition: Option<PathBuf>,
    #[arg(long)]
    pub router: Option<PathBuf>,
    /// Experts selected per input; read from bundle.json when omitted.
    #[arg(long)]
    pub n: Option<usize>,
}

impl BundleArgs {
    fn paths(&self) -> CliResult<BundlePaths> {
        let base = self.bundle.as_deref().map(BundlePaths::in_dir);
        let pick = |own: &Option<PathBuf>, from: Option<&PathBuf>, what: &str| {
            own.clone()
                .or_else(|| from.cloned())
                .ok_or_else(|| CliError::Config(format!("--{what} or --bundle is required")))
        };
        Ok(BundlePaths {
            model: pick(&self.model, base.as_ref().map(|b| &b.model), "model")?,
            partition: pick(
                &self.partition,
                base.as_ref().map(|b| &b.partition),
                "partition",
            )?,
            router: pick(&self.router, base.as_ref().map(|b| &b.router), "router")?,
            info: base.and_then(|b| b.info),
        })
    }

    fn load(&self) -> CliResult<Bundle> {
        Bundle::load(&self.paths()?, self.n)
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub bundle: BundleArgs,
    /// Dense model to compare against; defaults to the bundle's model.
    #[arg(long)]
    pub original: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Report JSON to write; printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the two-line CSV form here.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub bundle: BundleArgs,
    /// Dense model whose outputs are the target; defaults to the bundle's model.
    #[arg(long)]
    pub original: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long, value_enum, default_value = "original")]
    pub target: TargetArg,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Bundle directory to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// JSON file mirroring the experiment config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Use this model instead of training one.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub experts: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    /// Base seed; beats $MOEF_SEED, which beats the config file.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ExperimentArgs {
    pub fn resolve(&self) -> CliResult<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        cfg.apply_env()?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if self.model.is_some() {
            cfg.model.clone_from(&self.model);
        }
        if let Some(k) = self.experts {
            cfg.k = k;
        }
        if self.n.is_some() {
            cfg.n = self.n;
        }
        if let Some(d) = self.d_ff {
            cfg.d_ff = d;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub experiment: ExperimentArgs,
    /// CSV to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[command(flatten)]
    pub experiment: ExperimentArgs,
    /// Output directory; overrides the config's `output`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

/// `--seed`, else `$MOEF_SEED`, else 0.
fn resolve_seed(flag: Option<u64>) -> CliResult<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    let mut cfg = ExperimentConfig::default();
    cfg.apply_env()?;
    Ok(cfg.seed)
}

fn load_data(path: &Path) -> CliResult<Dataset> {
    Ok(Dataset::load_csv(path)?)
}

fn required<'a>(p: &'a Option<PathBuf>, why: &str) -> CliResult<&'a Path> {
    p.as_deref()
        .ok_or_else(|| CliError::Config(format!("--data is required {why}")))
}

fn train_toy_cmd(a: &TrainToyArgs) -> CliResult<()> {
    let seeds = StageSeeds::derive(resolve_seed(a.seed)?);
    let spec = DatasetSpec {
        kind: a.kind.into(),
        groups: a.groups,
        train_samples: a.samples,
        eval_samples: a.eval_samples,
        d_model: a.d_model,
    };
    let d = ToyTraining::default();
    let t = ToyTraining {
        epochs: a.epochs.unwrap_or(d.epochs),
        lr: a.lr.unwrap_or(d.lr),
        batch: a.batch.unwrap_or(d.batch),
        bias_init: a.bias_init.unwrap_or(d.bias_init),
    };
    prepare_dir(&a.out, a.force)?;
    let (train, eval) = stages::generate_data(&spec, seeds.train_data, seeds.eval_data);
    train.save_csv(a.out.join("train.csv"))?;
    eval.save_csv(a.out.join("eval.csv"))?;
    let (w, report) = stages::train_toy(&train, Some(&eval), a.d_ff, &t, seeds.train_toy)?;
    save_model(&w, a.out.join(bundle::MODEL_FILE))?;
    write_json(&a.out.join("train_report.json"), &report)?;
    println!(
        "trained {}x{} FFN: loss {:.6} -> {:.6}, eval mse {:.6}",
        w.d_model,
        w.d_ff,
        report.loss_history[0],
        report.loss_history.last().copied().unwrap_or(f64::NAN),
        report.eval_mse.unwrap_or(f64::NAN)
    );
    Ok(())
}

fn profile_cmd(a: &ProfileArgs) -> CliResult<()> {
    let w = load_model(&a.model)?;
    let d = load_data(&a.data)?;
    let report = sparsity_report(&record_trace(&w, &d)?)?;
    prepare_dir(&a.out, a.force)?;
    write_json(&a.out.join("sparsity.json"), &report)?;
    write_text(&a.out.join("cdf.csv"), &report.cdf_csv())?;
    println!(
        "{} samples: negative ratio {:.4}, mean active ratio {:.4}, {} dead neurons",
        report.samples,
        report.negative_ratio,
        report.mean_active_ratio,
        report.dead_neurons()
    );
    Ok(())
}

fn split_cmd(a: &SplitArgs) -> CliResult<()> {
    let w = load_model(&a.model)?;
    let d = match (&a.data, a.method) {
        (Some(p), _) => load_data(p)?,
        (None, SplitMethod::Coact) => {
            return Err(CliError::Config(
                "--data is required for --method coact".into(),
            ))
        }
        (None, _) => Dataset::new("none", vec![], vec![])?,
    };
    let pf = stages::build_partition(
        &w,
        &d,
        a.method,
        a.experts,
        a.quantile,
        resolve_seed(a.seed)?,
    )?;
    prepare_file(&a.out, a.force)?;
    pf.save(&a.out)?;
    println!("{} split: {} experts of {} neurons", a.method, pf.k, pf.d_e);
    Ok(())
}

fn train_router_cmd(a: &TrainRouterArgs) -> CliResult<()> {
    let w = load_model(&a.model)?;
    let p = PartitionFile::load(&a.partition)?.to_partition()?;
    let d = if a.router == RouterKind::Learnable {
        load_data(required(&a.data, "for --router learn")?)?
    } else {
        Dataset::new("none", vec![], vec![])?
    };
    let cfg = RouterTraining {
        lr: a.lr,
        epochs: a.epochs,
        batch: a.batch,
        dev_fraction: a.dev_fraction,
        loss: match a.loss {
            LossArg::Ce => RouterLoss::SoftmaxCrossEntropy,
            LossArg::Bce => RouterLoss::BinaryCrossEntropy,
        },
    };
    let rf = stages::build_router(&w, &p, &d, None, a.router, &cfg, resolve_seed(a.seed)?)?;
    prepare_file(&a.out, a.force)?;
    rf.save(&a.out)?;
    match (rf.train_loss.first(), rf.train_loss.last()) {
        (Some(first), Some(last)) => {
            println!("{} router: train loss {first:.6} -> {last:.6}", rf.kind)
        }
        _ => println!("{} router written", rf.kind),
    }
    Ok(())
}

fn eval_cmd(a: &EvalArgs) -> CliResult<()> {
    let b = a.bundle.load()?;
    let original = match &a.original {
        Some(p) => load_model(p)?,
        None if b.calibrated => {
            return Err(CliError::Config(
                "a calibrated bundle must be compared with --original".into(),
            ))
        }
        None => b.weights.clone(),
    };
    let d = load_data(&a.data)?;
    let report = stages::eval_bundle(&b, &original, &d)?;
    match &a.out {
        Some(p) => {
            prepare_file(p, a.force)?;
            write_json(p, &report)?;
        }
        None => println!(
            "{}",
            serde_json::to_string_pretty(&report).expect("report serializes")
        ),
    }
    if let Some(p) = &a.csv {
        prepare_file(p, a.force)?;
        write_text(p, &stages::eval_csv(&report))?;
    }
    println!("{}", report.csv_row());
    Ok(())
}

fn calibrate_cmd(a: &CalibrateArgs) -> CliResult<()> {
    let b = a.bundle.load()?;
    let original = match &a.original {
        Some(p) => load_model(p)?,
        None => b.weights.clone(),
    };
    let d = load_data(&a.data)?;
    let def = Calibration::default();
    let cfg = Calibration {
        lr: a.lr.unwrap_or(def.lr),
        epochs: a.epochs.unwrap_or(def.epochs),
        batch: a.batch.unwrap_or(def.batch),
        target: match a.target {
            TargetArg::Original => CalibrationGoal::Original,
            TargetArg::Task => CalibrationGoal::Task,
        },
    };
    let (c, report) = stages::calibrate_bundle(&b, &original, &d, &cfg, resolve_seed(a.seed)?)?;
    prepare_dir(&a.out, a.force)?;
    c.save(&a.out)?;
    write_json(&a.out.join("calibration.json"), &report)?;
    println!(
        "calibration loss {:.6} -> {:.6}",
        report.loss_history[0],
        report.loss_history.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn sweep_cmd(a: &SweepArgs) -> CliResult<()> {
    let cfg = a.experiment.resolve()?;
    let budget = cfg.budget()?;
    let seeds = cfg.seeds();
    prepare_file(&a.out, a.force)?;
    let (train, eval) = stages::generate_data(&cfg.dataset, seeds.train_data, seeds.eval_data);
    let w = match &cfg.model {
        Some(p) => load_model(p)?,
        None => stages::train_toy(&train, None, cfg.d_ff, &cfg.train, seeds.train_toy)?.0,
    };
    let cells = sweep::run_sweep(&sweep::SweepInputs {
        weights: &w,
        train: &train,
        eval: &eval,
        budget,
        quantile: cfg.quantile,
        split_seed: seeds.split,
        router_seed: seeds.router,
        router_training: cfg.router_training,
    })?;
    let csv = sweep::sweep_csv(&cells);
    write_text(&a.out, &csv)?;
    print!("{csv}");
    let failed = cells.iter().filter(|c| c.result.is_err()).count();
    if failed > 0 {
        eprintln!("{failed} of {} cells failed", cells.len());
    }
    Ok(())
}

fn pipeline_cmd(a: &PipelineArgs) -> CliResult<()> {
    let cfg = a.experiment.resolve()?;
    let out = pipeline::output_dir(a.out.clone(), &cfg)?;
    let m = pipeline::run_pipeline(&cfg, &out, a.force)?;
    for s in &m.stages {
        println!("{:<16} {:?}", s.name, s.status);
    }
    println!("manifest: {}", out.join(pipeline::MANIFEST_FILE).display());
    Ok(())
}

pub fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::TrainToy(a) => train_toy_cmd(a),
        Command::Profile(a) => profile_cmd(a),
        Command::Split(a) => split_cmd(a),
        Command::TrainRouter(a) => train_router_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Calibrate(a) => calibrate_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::Pipeline(a) => pipeline_cmd(a),
    }
}
