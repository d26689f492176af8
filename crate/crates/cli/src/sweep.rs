//! Every split method crossed with every router type.

use moefication::data::Dataset;
use moefication::engine::EvalReport;
use moefication::profiler::record_trace;
use moefication::router::{RouterKind, SelectionBudget};
use moefication::splitter::{PartitionFile, SplitMethod};
use moefication::FfnWeights;
use rayon::prelude::*;

use crate::bundle::Bundle;
use crate::config::RouterTraining;
use crate::error::CliResult;
use crate::stages;

#[derive(Debug, Clone)]
pub struct SweepInputs<'a> {
    pub weights: &'a FfnWeights,
    pub train: &'a Dataset,
    pub eval: &'a Dataset,
    pub budget: SelectionBudget,
    pub quantile: f64,
    pub split_seed: u64,
    pub router_seed: u64,
    pub router_training: RouterTraining,
}

#[derive(Debug, Clone)]
pub struct SweepCell {
    pub split: SplitMethod,
    pub router: RouterKind,
    pub result: Result<EvalReport, String>,
}

pub fn csv_header() -> String {
    format!("split,{},status,error", EvalReport::CSV_HEADER)
}

fn quote(s: &str) -> String {
    format!("\"{}\"", s.replace('"', "\"\""))
}

impl SweepCell {
    pub fn csv_row(&self) -> String {
        match &self.result {
            Ok(r) => format!("{},{},ok,", self.split, r.csv_row()),
            Err(e) => {
                let blanks = EvalReport::CSV_HEADER.matches(',').count();
                format!(
                    "{},{}{},failed,{}",
                    self.split,
                    self.router,
                    ",".repeat(blanks),
                    quote(e)
                )
            }
        }
    }
}

pub fn sweep_csv(cells: &[SweepCell]) -> String {
    let mut out = csv_header() + "\n";
    for c in cells {
        out.push_str(&c.csv_row());
        out.push('\n');
    }
    out
}

/// Evaluate all 12 cells in split-major, router-minor order. A failing
/// cell is recorded and the rest still run.
pub fn run_sweep(inp: &SweepInputs<'_>) -> CliResult<Vec<SweepCell>> {
    let trace = record_trace(inp.weights, inp.train)?;
    let k = inp.budget.k();
    let partitions: Vec<Result<PartitionFile, String>> = SplitMethod::ALL
        .par_iter()
        .map(|&m| {
            stages::build_partition(inp.weights, inp.train, m, k, inp.quantile, inp.split_seed)
                .map_err(|e| e.to_string())
        })
        .collect();
    let grid: Vec<(usize, RouterKind)> = (0..SplitMethod::ALL.len())
        .flat_map(|s| RouterKind::ALL.iter().map(move |&r| (s, r)))
        .collect();
    let cells = grid
        .par_iter()
        .map(|&(s, kind)| {
            let result = partitions[s].clone().and_then(|pf| {
                let run = || -> CliResult<EvalReport> {
                    let p = pf.to_partition()?;
                    let router = stages::build_router(
                        inp.weights,
                        &p,
                        inp.train,
                        Some(&trace),
                        kind,
                        &inp.router_training,
                        inp.router_seed,
                    )?;
                    let b = Bundle {
                        weights: inp.weights.clone(),
                        partition: pf.clone(),
                        router,
                        n: inp.budget.n(),
                        calibrated: false,
                    };
                    stages::eval_bundle(&b, inp.weights, inp.eval)
                };
                run().map_err(|e| e.to_string())
            });
            SweepCell {
                split: SplitMethod::ALL[s],
                router: kind,
                result,
            }
        })
        .collect();
    Ok(cells)
}
