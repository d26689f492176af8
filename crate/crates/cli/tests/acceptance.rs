//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use moefication::data::{gen_synthetic, Dataset, SyntheticKind};
use moefication::engine::{
    calibrate, calibration_loss_and_grad, evaluate_samples, freeze_sample, moe_forward,
    second_layer_flat, set_second_layer_flat, CalibrationConfig, CalibrationTarget, FrozenSample,
    MoefiedFfn,
};
use moefication::profiler::{record_trace, sparsity_report, ActivationTrace};
use moefication::router::{
    router_loss_and_grad, router_target, score_groundtruth, select_top_n, train_learnable_router,
    LearnableRouterParams, Router, RouterLoss, RouterTrainConfig, SelectionBudget,
};
use moefication::splitter::{
    build_coactivation_graph, materialize_experts, partition_graph, split_cluster,
    split_coactivation, split_random, CoActivationGraph, Edge, ExpertPartition, PartitionOptions,
    SplitMethod, DEFAULT_QUANTILE,
};
use moefication::train::{train_toy_ffn, ToyTrainConfig};
use moefication::{FfnWeights, Vector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- oracles

/// Dense FFN forward with explicit loops, independent of the library's
/// matrix code.
fn naive_forward(w: &FfnWeights, x: &[f64]) -> Vec<f64> {
    let mut h = vec![0.0; w.d_ff];
    for (j, hj) in h.iter_mut().enumerate() {
        let mut s = w.b1[j];
        for (i, xi) in x.iter().enumerate() {
            s += xi * w.w1.get(i, j);
        }
        *hj = s.max(0.0);
    }
    let mut y = w.b2.clone();
    for (o, yo) in y.iter_mut().enumerate() {
        for (j, hj) in h.iter().enumerate() {
            *yo += hj * w.w2.get(j, o);
        }
    }
    y
}

fn naive_preactivation(w: &FfnWeights, x: &[f64]) -> Vec<f64> {
    (0..w.d_ff)
        .map(|j| {
            w.b1[j]
                + x.iter()
                    .enumerate()
                    .map(|(i, xi)| xi * w.w1.get(i, j))
                    .sum::<f64>()
        })
        .collect()
}

/// Positive neurons of `h` whose expert is in `chosen`.
fn covered(h: &[f64], assignment: &[usize], chosen: &[usize]) -> usize {
    h.iter()
        .zip(assignment)
        .filter(|(v, e)| **v > 0.0 && chosen.contains(e))
        .count()
}

/// Best coverage over every `n`-subset of `k` experts.
fn exhaustive_best(h: &[f64], assignment: &[usize], k: usize, n: usize) -> usize {
    let mut best = 0;
    for mask in 0u32..(1 << k) {
        if mask.count_ones() as usize != n {
            continue;
        }
        let chosen: Vec<usize> = (0..k).filter(|i| mask & (1 << i) != 0).collect();
        best = best.max(covered(h, assignment, &chosen));
    }
    best
}

fn oracle_cut(edges: &[Edge], side: &[usize]) -> f64 {
    edges
        .iter()
        .filter(|e| side[e.a] != side[e.b])
        .map(|e| e.weight)
        .sum()
}

/// Minimum cut over all balanced bipartitions.
fn brute_force_bisection(nodes: usize, edges: &[Edge]) -> f64 {
    let mut best = f64::INFINITY;
    for mask in 0u32..(1 << nodes) {
        // fix node 0 on side 0 to halve the search
        if mask & 1 != 0 || mask.count_ones() as usize != nodes / 2 {
            continue;
        }
        let side: Vec<usize> = (0..nodes).map(|i| ((mask >> i) & 1) as usize).collect();
        best = best.min(oracle_cut(edges, &side));
    }
    best
}

/// Loss and analytic gradient at a flat parameter point.
type LossFn<'a> = dyn Fn(&[f64]) -> (f64, Vec<f64>) + 'a;

/// Central differences with the relative error `|a - n| / (|a| + |n| + 1e-8)`.
fn fd_max_rel_err(f: &LossFn, point: &[f64], eps: f64) -> f64 {
    let (_, analytic) = f(point);
    let mut p = point.to_vec();
    let mut worst = 0.0f64;
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + eps;
        let fp = f(&p).0;
        p[i] = orig - eps;
        let fm = f(&p).0;
        p[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        let err = (analytic[i] - numeric).abs() / (analytic[i].abs() + numeric.abs() + 1e-8);
        worst = worst.max(err);
    }
    worst
}

fn random_inputs(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Vector> {
    (0..n)
        .map(|_| (0..d).map(|_| rng.random_range(-1.5..1.5)).collect())
        .collect()
}

// ---------------------------------------------------------------- toy model

/// Trained model and data shared by the toy-model criteria.
struct Toy {
    w: FfnWeights,
    train: Dataset,
    eval: Dataset,
    trace: ActivationTrace,
}

const TOY_GROUPS: usize = 4;
const TOY_D_MODEL: usize = 64;
const TOY_D_FF: usize = 320;
/// 20% budget: 4 of 20 experts.
const TOY_K: usize = 20;
const TOY_N: usize = 4;

fn train_toy() -> Toy {
    let kind = SyntheticKind::SparseRegression { groups: TOY_GROUPS };
    let train = gen_synthetic(kind, 4000, TOY_D_MODEL, 1);
    let eval = gen_synthetic(kind, 1000, TOY_D_MODEL, 2);
    let cfg = ToyTrainConfig {
        d_ff: TOY_D_FF,
        seed: 3,
        ..Default::default()
    };
    let w = train_toy_ffn(&train, &cfg).expect("toy training").weights;
    let trace = record_trace(&w, &train).expect("trace");
    Toy {
        w,
        train,
        eval,
        trace,
    }
}

fn coact_partition(toy: &Toy, k: usize) -> ExpertPartition {
    let g = build_coactivation_graph(&toy.trace, DEFAULT_QUANTILE).expect("graph");
    split_coactivation(&g, k, 0).expect("coact split")
}

fn mean_coverage(m: &MoefiedFfn, original: &FfnWeights, d: &Dataset) -> (f64, f64) {
    let per = evaluate_samples(m, original, d).expect("eval");
    let n = per.len() as f64;
    (
        per.iter().map(|s| s.coverage).sum::<f64>() / n,
        per.iter().map(|s| s.groundtruth_coverage).sum::<f64>() / n,
    )
}

// ---------------------------------------------------------------- criteria

fn c1_permutation_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for case in 0..20 {
        let d_model = rng.random_range(8..=64);
        let k = [2usize, 4, 8, 16][rng.random_range(0..4)];
        let d_ff = k * rng.random_range((32usize).div_ceil(k)..=512 / k);
        let w = FfnWeights::random_with_bias(d_model, d_ff, &mut rng);
        let probe = Dataset::new(
            "probe",
            random_inputs(200, d_model, &mut rng),
            vec![vec![0.0; d_model]; 200],
        )
        .map_err(|e| e.to_string())?;
        let trace = record_trace(&w, &probe).map_err(|e| e.to_string())?;
        let inputs = random_inputs(1000, d_model, &mut rng);
        for method in SplitMethod::ALL {
            let p = match method {
                SplitMethod::Random => split_random(d_ff, k, case),
                SplitMethod::Cluster => split_cluster(&w, k, case, 50),
                SplitMethod::Coact => build_coactivation_graph(&trace, DEFAULT_QUANTILE)
                    .and_then(|g| split_coactivation(&g, k, case)),
            }
            .map_err(|e| format!("{method} split: {e}"))?;
            let e = materialize_experts(&w, &p).map_err(|e| e.to_string())?;
            let m = MoefiedFfn::new(
                e.clone(),
                p,
                Router::param_center(&e),
                SelectionBudget::new(k, k).unwrap(),
            )
            .map_err(|e| e.to_string())?;
            for x in &inputs {
                let (y, _) = moe_forward(&m, x).map_err(|e| e.to_string())?;
                let dense = naive_forward(&w, x);
                for (a, b) in y.iter().zip(&dense) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
    }
    check(
        worst < 1e-9,
        format!("max |moe - dense| = {worst:.3e} over 20 FFNs x 3 splits x 1000 inputs"),
    )
}

fn c2_groundtruth_optimal() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut mismatches = 0;
    for case in 0..200u64 {
        let k = [1usize, 2, 4, 8][rng.random_range(0..4)];
        let d_e = rng.random_range(1..=16 / k);
        let d_ff = k * d_e;
        let p = split_random(d_ff, k, case).map_err(|e| e.to_string())?;
        let h: Vec<f64> = (0..d_ff)
            .map(|_| {
                if rng.random_bool(0.5) {
                    rng.random_range(0.01..2.0)
                } else {
                    -rng.random_range(0.0..2.0)
                }
            })
            .collect();
        let n = rng.random_range(1..=k);
        let budget = SelectionBudget::new(n, k).unwrap();
        let chosen = select_top_n(&score_groundtruth(&h, &p).unwrap(), budget).unwrap();
        let got = covered(&h, p.assignment(), &chosen);
        let best = exhaustive_best(&h, p.assignment(), k, n);
        let lib = moefication::engine::coverage(&h, &p, &chosen);
        let total = h.iter().filter(|v| **v > 0.0).count();
        let expect = if total == 0 {
            1.0
        } else {
            got as f64 / total as f64
        };
        if got != best || lib != expect {
            mismatches += 1;
        }
    }
    check(
        mismatches == 0,
        format!("{mismatches} of 200 instances differ from the exhaustive optimum"),
    )
}

fn c3_partitioner_quality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst_ratio = 0.0f64;
    for case in 0..50u64 {
        let nodes = 12;
        let mut edges = Vec::new();
        for a in 0..nodes {
            for b in a + 1..nodes {
                if rng.random_bool(0.5) {
                    edges.push(Edge {
                        a,
                        b,
                        weight: rng.random_range(0.0..1.0),
                    });
                }
            }
        }
        let g = CoActivationGraph::new(nodes, edges.clone()).map_err(|e| e.to_string())?;
        let gp =
            partition_graph(&g, 2, case, PartitionOptions::default()).map_err(|e| e.to_string())?;
        let sizes = [0, 1].map(|s| gp.assignment.iter().filter(|&&a| a == s).count());
        if sizes != [6, 6] {
            return Err(format!("unbalanced partition {sizes:?}"));
        }
        let cut = oracle_cut(&edges, &gp.assignment);
        let opt = brute_force_bisection(nodes, &edges);
        let ratio = if opt > 0.0 {
            cut / opt
        } else if cut == 0.0 {
            1.0
        } else {
            f64::INFINITY
        };
        worst_ratio = worst_ratio.max(ratio);
    }
    check(
        worst_ratio <= 1.05,
        format!("worst cut / optimal = {worst_ratio:.4} over 50 graphs"),
    )
}

#[allow(clippy::needless_range_loop)]
fn c4_planted_recovery(toy: &Toy) -> Outcome {
    let labels = toy.train.labels.as_ref().expect("labels");
    let d_ff = toy.w.d_ff;
    // positive activation mass per neuron and latent group
    let mut mass = vec![[0.0f64; TOY_GROUPS]; d_ff];
    for s in 0..toy.trace.samples() {
        for (j, &v) in toy.trace.row(s).iter().enumerate() {
            if v > 0.0 {
                mass[j][labels[s]] += v;
            }
        }
    }
    let totals: Vec<f64> = mass.iter().map(|m| m.iter().sum()).collect();
    let mut live: Vec<f64> = totals.iter().copied().filter(|&t| t > 0.0).collect();
    live.sort_by(f64::total_cmp);
    let median = live[live.len() / 2];
    let p = coact_partition(toy, TOY_GROUPS);

    let mut worst = 1.0f64;
    let mut worst_all_specific = 1.0f64;
    let mut sizes = Vec::new();
    for g in 0..TOY_GROUPS {
        let specific: Vec<usize> = (0..d_ff)
            .filter(|&j| totals[j] > 0.0 && mass[j][g] / totals[j] >= 0.9)
            .collect();
        let dominant: Vec<usize> = specific
            .iter()
            .copied()
            .filter(|&j| totals[j] >= median)
            .collect();
        let share = |set: &[usize]| {
            let mut per = [0usize; TOY_GROUPS];
            set.iter().for_each(|&j| per[p.expert_of(j)] += 1);
            *per.iter().max().unwrap() as f64 / set.len().max(1) as f64
        };
        if dominant.is_empty() {
            return Err(format!("group {g} has no dominant neurons"));
        }
        worst = worst.min(share(&dominant));
        worst_all_specific = worst_all_specific.min(share(&specific));
        sizes.push(dominant.len());
    }
    check(
        worst >= 0.8,
        format!(
            "min share of a group's dominant neurons in one expert = {worst:.3} (group sizes {sizes:?}; \
             counting low-mass specific neurons too: {worst_all_specific:.3})"
        ),
    )
}

fn c5_coverage_ordering(toy: &Toy) -> Outcome {
    let budget = SelectionBudget::new(TOY_N, TOY_K).unwrap();
    let p = coact_partition(toy, TOY_K);
    let e = materialize_experts(&toy.w, &p).map_err(|e| e.to_string())?;
    let trained = train_learnable_router(
        &toy.w,
        &p,
        &toy.train.inputs,
        &toy.trace,
        &RouterTrainConfig::default(),
    )
    .map_err(|e| e.to_string())?;
    let cov = |r: Router, p: &ExpertPartition, e: &moefication::splitter::ExpertWeights| {
        let m = MoefiedFfn::new(e.clone(), p.clone(), r, budget).expect("model");
        mean_coverage(&m, &toy.w, &toy.eval)
    };
    let (gt, _) = cov(Router::Groundtruth { k: TOY_K }, &p, &e);
    let (learn, _) = cov(Router::Learnable(trained.params), &p, &e);
    let (param, _) = cov(Router::param_center(&e), &p, &e);
    let (random, _) = cov(Router::random_center(&e), &p, &e);

    let rp = split_random(toy.w.d_ff, TOY_K, 0).map_err(|e| e.to_string())?;
    let re = materialize_experts(&toy.w, &rp).map_err(|e| e.to_string())?;
    let (gt_random_split, _) = cov(Router::Groundtruth { k: TOY_K }, &rp, &re);
    check(
        gt > learn && learn > param && learn > random && gt > gt_random_split,
        format!(
            "{} eval inputs, n/k = {TOY_N}/{TOY_K}: gt {gt:.4} > learn {learn:.4} > param {param:.4}, random {random:.4}; \
             coact gt {gt:.4} > random-split gt {gt_random_split:.4}",
            toy.eval.len()
        ),
    )
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn c6_calibration(toy: &Toy) -> Outcome {
    let budget = SelectionBudget::new(TOY_N, TOY_K).unwrap();
    let p = coact_partition(toy, TOY_K);
    let e = materialize_experts(&toy.w, &p).map_err(|e| e.to_string())?;
    let cfg = RouterTrainConfig {
        seed: 1,
        ..Default::default()
    };
    let trained = train_learnable_router(&toy.w, &p, &toy.train.inputs, &toy.trace, &cfg)
        .map_err(|e| e.to_string())?;
    let m = MoefiedFfn::new(e, p, Router::Learnable(trained.params), budget)
        .map_err(|e| e.to_string())?;
    let out = calibrate(
        &m,
        &toy.train,
        CalibrationTarget::Original(&toy.w),
        &CalibrationConfig::default(),
    )
    .map_err(|e| e.to_string())?;
    let c = out.model;

    let held_out_mse = |model: &MoefiedFfn| {
        let mut total = 0.0;
        for x in &toy.eval.inputs {
            let (y, _) = moe_forward(model, x).expect("forward");
            let dense = naive_forward(&toy.w, x);
            total += y
                .iter()
                .zip(&dense)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / y.len() as f64;
        }
        total / toy.eval.len() as f64
    };
    let before = held_out_mse(&m);
    let after = held_out_mse(&c);
    let reduction = 1.0 - after / before;

    let frozen = m
        .experts
        .experts
        .iter()
        .zip(&c.experts.experts)
        .all(|(a, b)| bits(a.w1.data()) == bits(b.w1.data()) && bits(&a.b1) == bits(&b.b1));
    let router_same = match (&m.router, &c.router) {
        (Router::Learnable(a), Router::Learnable(b)) => bits(&a.to_flat()) == bits(&b.to_flat()),
        _ => false,
    };
    let partition_same = m.partition == c.partition;
    check(
        reduction >= 0.2 && frozen && router_same && partition_same,
        format!(
            "held-out output MSE {before:.3e} -> {after:.3e} ({:.1}% lower); W1/b1 unchanged: {frozen}, \
             router unchanged: {router_same}, partition unchanged: {partition_same}",
            100.0 * reduction
        ),
    )
}

fn c7_sparsity(toy: &Toy) -> Outcome {
    let r = sparsity_report(&toy.trace).map_err(|e| e.to_string())?;
    let in_open = r
        .per_sample_active_ratio
        .iter()
        .all(|&a| a > 0.0 && a < 1.0);
    let monotone = r
        .cdf
        .windows(2)
        .all(|w| w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
    let ends_at_one = r.cdf.last().is_some_and(|&(_, c)| c == 1.0);
    // independent negative ratio over the stored trace
    let mut neg = 0usize;
    let mut all = 0usize;
    for (s, x) in toy.train.inputs.iter().enumerate().take(200) {
        let h = naive_preactivation(&toy.w, x);
        let stored = toy.trace.row(s);
        if h.iter().zip(stored).any(|(a, b)| (a - b).abs() > 1e-9) {
            return Err(format!("trace row {s} disagrees with the FFN"));
        }
    }
    for s in 0..toy.trace.samples() {
        for &v in toy.trace.row(s) {
            all += 1;
            if v <= 0.0 {
                neg += 1;
            }
        }
    }
    let oracle_neg = neg as f64 / all as f64;
    let (lo, hi) = r
        .per_sample_active_ratio
        .iter()
        .fold((1.0f64, 0.0f64), |(lo, hi), &a| (lo.min(a), hi.max(a)));
    check(
        in_open && monotone && ends_at_one && r.negative_ratio > 0.5 && (oracle_neg - r.negative_ratio).abs() < 1e-12,
        format!(
            "active ratios in [{lo:.4}, {hi:.4}], CDF monotone: {monotone}, ends at 1: {ends_at_one}, \
             negative ratio {:.4} (recount {oracle_neg:.4})",
            r.negative_ratio
        ),
    )
}

fn c8_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let eps = 1e-5;
    let mut worst_router = 0.0f64;
    let mut worst_calib = 0.0f64;
    for point in 0..10 {
        // router: the default loss on even points, the sigmoid variant on odd ones
        let (d_model, k, d_e) = (6, 4, 3);
        let loss = if point % 2 == 0 {
            RouterLoss::SoftmaxCrossEntropy
        } else {
            RouterLoss::BinaryCrossEntropy
        };
        let r = LearnableRouterParams::random(d_model, k, &mut rng);
        let xs = random_inputs(8, d_model, &mut rng);
        let ts: Vec<Vector> = (0..8)
            .map(|_| {
                let counts: Vec<f64> = (0..k).map(|_| rng.random_range(0..=d_e) as f64).collect();
                router_target(&counts, d_e, loss)
            })
            .collect();
        let f = |flat: &[f64]| {
            let p = LearnableRouterParams::from_flat(d_model, k, flat).unwrap();
            let xr: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
            let tr: Vec<&[f64]> = ts.iter().map(Vec::as_slice).collect();
            let (l, g) = router_loss_and_grad(&p, &xr, &tr, loss).unwrap();
            (l, g.to_flat())
        };
        worst_router = worst_router.max(fd_max_rel_err(&f, &r.to_flat(), eps));

        // calibration: random FFN, random split, frozen selections, random second layer
        let (d_model, d_ff, k) = (5, 12, 4);
        let w = FfnWeights::random_with_bias(d_model, d_ff, &mut rng);
        let p = split_random(d_ff, k, point).unwrap();
        let e = materialize_experts(&w, &p).unwrap();
        let m = MoefiedFfn::new(
            e.clone(),
            p,
            Router::param_center(&e),
            SelectionBudget::new(2, k).unwrap(),
        )
        .unwrap();
        let xs = random_inputs(8, d_model, &mut rng);
        let frozen: Vec<FrozenSample> = xs.iter().map(|x| freeze_sample(&m, x).unwrap()).collect();
        let targets = random_inputs(8, d_model, &mut rng);
        let start: Vec<f64> = second_layer_flat(&m)
            .iter()
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let f = |flat: &[f64]| {
            let mut mm = m.clone();
            set_second_layer_flat(&mut mm, flat).unwrap();
            let s: Vec<&FrozenSample> = frozen.iter().collect();
            let t: Vec<&[f64]> = targets.iter().map(Vec::as_slice).collect();
            calibration_loss_and_grad(&mm, &s, &t).unwrap()
        };
        worst_calib = worst_calib.max(fd_max_rel_err(&f, &start, eps));
    }
    check(
        worst_router < 1e-5 && worst_calib < 1e-5,
        format!("max relative error: router {worst_router:.2e}, calibration {worst_calib:.2e} (10 points each)"),
    )
}

fn run_pipeline_into(dir: &Path, cfg: &Path) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_moefy"))
        .args(["pipeline", "--config"])
        .arg(cfg)
        .arg("--out")
        .arg(dir)
        .env_remove("MOEF_SEED")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "pipeline failed: {}",
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(())
}

fn c9_determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{
            "dataset": {"train_samples": 1000, "eval_samples": 300, "d_model": 16},
            "d_ff": 64, "k": 8, "seed": 5,
            "train": {"epochs": 5},
            "router_training": {"epochs": 5},
            "calibration": {"epochs": 3}
        }"#,
    )
    .map_err(|e| e.to_string())?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_pipeline_into(&a, &cfg)?;
    run_pipeline_into(&b, &cfg)?;
    let files_a = moefication_cli::files::list_files(&a).map_err(|e| e.to_string())?;
    let files_b = moefication_cli::files::list_files(&b).map_err(|e| e.to_string())?;
    if files_a != files_b {
        return Err(format!("file sets differ: {files_a:?} vs {files_b:?}"));
    }
    let differing: Vec<&String> = files_a
        .iter()
        .filter(|f| std::fs::read(a.join(f)).ok() != std::fs::read(b.join(f)).ok())
        .collect();
    let manifest: moefication_cli::pipeline::Manifest =
        moefication_cli::files::read_json(&a.join("manifest.json")).map_err(|e| e.to_string())?;
    let stages_ok = manifest.stages.len() == 7 && manifest.all_ok();
    check(
        differing.is_empty() && stages_ok,
        format!(
            "{} files compared, {} differ; manifest has {} stages, all ok: {stages_ok}",
            files_a.len(),
            differing.len(),
            manifest.stages.len()
        ),
    )
}

fn main() {
    let started = Instant::now();
    let mut failed = 0;
    let mut report = |id: u32, name: &str, secs: Duration, outcome: Outcome| {
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} [{id}] {name} ({:.1}s): {detail}", secs.as_secs_f64());
    };
    let timed = |f: &dyn Fn() -> Outcome| {
        let t = Instant::now();
        let o = f();
        (t.elapsed(), o)
    };

    let (t, o) = timed(&c1_permutation_identity);
    report(1, "permutation identity", t, o);
    let (t, o) = timed(&c2_groundtruth_optimal);
    report(2, "groundtruth selection optimality", t, o);
    let (t, o) = timed(&c3_partitioner_quality);
    report(3, "partitioner vs brute force", t, o);

    let t0 = Instant::now();
    let toy = train_toy();
    println!(
        "     toy model trained in {:.1}s",
        t0.elapsed().as_secs_f64()
    );
    let (t, o) = timed(&|| c4_planted_recovery(&toy));
    report(4, "planted group recovery", t, o);
    let (t, o) = timed(&|| c5_coverage_ordering(&toy));
    report(5, "coverage ordering at 20% budget", t, o);
    let (t, o) = timed(&|| c6_calibration(&toy));
    report(6, "calibration effect", t, o);
    let (t, o) = timed(&|| c7_sparsity(&toy));
    report(7, "sparsity profile sanity", t, o);
    let (t, o) = timed(&c8_gradients);
    report(8, "gradient checks", t, o);
    let (t, o) = timed(&c9_determinism);
    report(9, "pipeline determinism", t, o);

    println!(
        "acceptance: {} of 9 passed in {:.1}s",
        9 - failed,
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
