//! Expert selection: per-expert scores and top-n choice.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::shuffled_indices;
use crate::error::{shape_err, Error, Result};
use crate::math::{axpy, cosine, softmax, Adam, FfnWeights, Matrix, Vector};
use crate::profiler::ActivationTrace;
use crate::splitter::{ExpertPartition, ExpertWeights};

/// Select `n` of `k` experts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionBudget {
    n: usize,
    k: usize,
}

impl SelectionBudget {
    pub fn new(n: usize, k: usize) -> Result<Self> {
        if n == 0 || n > k {
            return Err(Error::Config(format!(
                "budget needs 1 <= n <= k, got n={n}, k={k}"
            )));
        }
        Ok(Self { n, k })
    }

    /// `ceil(fraction · k)`, at least 1.
    pub fn from_fraction(fraction: f64, k: usize) -> Result<Self> {
        let n = ((fraction * k as f64) - 1e-9).ceil().max(1.0) as usize;
        Self::new(n, k)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Fraction of expert parameters used per input.
    pub fn ratio(&self) -> f64 {
        self.n as f64 / self.k as f64
    }
}

/// Indices of the `n` highest scores, ascending. Equal scores prefer the
/// lower expert index.
pub fn select_top_n(scores: &[f64], budget: SelectionBudget) -> Result<Vec<usize>> {
    if scores.len() != budget.k {
        return shape_err(format!("{} scores for {} experts", scores.len(), budget.k));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut chosen = order[..budget.n].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Number of positive pre-activations inside each expert.
pub fn score_groundtruth(h: &[f64], p: &ExpertPartition) -> Result<Vector> {
    if h.len() != p.d_ff() {
        return shape_err(format!("h has {} entries, partition {}", h.len(), p.d_ff()));
    }
    let mut s = vec![0.0; p.k()];
    for (n, &v) in h.iter().enumerate() {
        if v > 0.0 {
            s[p.expert_of(n)] += 1.0;
        }
    }
    Ok(s)
}

fn check_dim(x: &[f64], e: &ExpertWeights) -> Result<()> {
    if x.len() != e.d_model {
        return shape_err(format!("input dim {} vs d_model {}", x.len(), e.d_model));
    }
    Ok(())
}

/// Cosine between `x` and the mean of each expert's `W1` columns.
pub fn score_param_center(x: &[f64], e: &ExpertWeights) -> Result<Vector> {
    check_dim(x, e)?;
    Ok(e.experts
        .iter()
        .map(|ex| cosine(x, &ex.column_mean()))
        .collect())
}

/// Cosine between `x` and the first `W1` column of each expert.
pub fn score_random_center(x: &[f64], e: &ExpertWeights) -> Result<Vector> {
    check_dim(x, e)?;
    Ok(e.experts
        .iter()
        .map(|ex| cosine(x, &ex.w1.column(0)))
        .collect())
}

/// Two-layer tanh network `d_model → k → k`.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnableRouterParams {
    /// `d_model × k`
    pub w1: Matrix,
    pub b1: Vector,
    /// `k × k`
    pub w2: Matrix,
    pub b2: Vector,
}

impl LearnableRouterParams {
    pub fn zeros(d_model: usize, k: usize) -> Self {
        Self {
            w1: Matrix::zeros(d_model, k),
            b1: vec![0.0; k],
            w2: Matrix::zeros(k, k),
            b2: vec![0.0; k],
        }
    }

    pub fn random<R: rand::Rng>(d_model: usize, k: usize, rng: &mut R) -> Self {
        let b1 = (6.0 / (d_model + k) as f64).sqrt();
        let b2 = (6.0 / (2 * k) as f64).sqrt();
        Self {
            w1: Matrix::random_uniform(d_model, k, b1, rng),
            b1: vec![0.0; k],
            w2: Matrix::random_uniform(k, k, b2, rng),
            b2: vec![0.0; k],
        }
    }

    pub fn d_model(&self) -> usize {
        self.w1.rows()
    }

    pub fn k(&self) -> usize {
        self.w1.cols()
    }

    pub fn to_flat(&self) -> Vector {
        let mut v = Vec::new();
        v.extend_from_slice(self.w1.data());
        v.extend_from_slice(&self.b1);
        v.extend_from_slice(self.w2.data());
        v.extend_from_slice(&self.b2);
        v
    }

    pub fn from_flat(d_model: usize, k: usize, flat: &[f64]) -> Result<Self> {
        let n1 = d_model * k;
        let expected = n1 + k + k * k + k;
        if flat.len() != expected {
            return shape_err(format!(
                "router params: {} values, expected {expected}",
                flat.len()
            ));
        }
        let (w1, rest) = flat.split_at(n1);
        let (b1, rest) = rest.split_at(k);
        let (w2, b2) = rest.split_at(k * k);
        Ok(Self {
            w1: Matrix::new(d_model, k, w1.to_vec())?,
            b1: b1.to_vec(),
            w2: Matrix::new(k, k, w2.to_vec())?,
            b2: b2.to_vec(),
        })
    }

    fn hidden(&self, x: &[f64]) -> Result<Vector> {
        let mut z = self.w1.vec_mul(x)?;
        axpy(1.0, &self.b1, &mut z);
        Ok(z.into_iter().map(f64::tanh).collect())
    }
}

/// `s = tanh(x·W1 + b1)·W2 + b2`
pub fn score_learnable(x: &[f64], r: &LearnableRouterParams) -> Result<Vector> {
    let a = r.hidden(x)?;
    let mut s = r.w2.vec_mul(&a)?;
    axpy(1.0, &r.b2, &mut s);
    Ok(s)
}

/// Training objective for the learnable router.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterLoss {
    /// Softmax cross-entropy against the per-expert positive counts
    /// normalized to sum to one (uniform when nothing is positive).
    #[default]
    SoftmaxCrossEntropy,
    /// Independent sigmoid cross-entropy per expert against the fraction of
    /// the expert's neurons that are positive.
    BinaryCrossEntropy,
}

/// Training target for one input given its per-expert positive counts.
pub fn router_target(counts: &[f64], d_e: usize, loss: RouterLoss) -> Vector {
    match loss {
        RouterLoss::SoftmaxCrossEntropy => {
            let total: f64 = counts.iter().sum();
            if total > 0.0 {
                counts.iter().map(|c| c / total).collect()
            } else {
                vec![1.0 / counts.len() as f64; counts.len()]
            }
        }
        RouterLoss::BinaryCrossEntropy => counts.iter().map(|c| c / d_e as f64).collect(),
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean loss over a batch and its gradient with respect to every router
/// parameter.
pub fn router_loss_and_grad(
    r: &LearnableRouterParams,
    inputs: &[&[f64]],
    targets: &[&[f64]],
    loss: RouterLoss,
) -> Result<(f64, LearnableRouterParams)> {
    if inputs.len() != targets.len() {
        return shape_err("inputs and targets differ in length");
    }
    if inputs.is_empty() {
        return Err(Error::Empty("router batch"));
    }
    let k = r.k();
    let inv_b = 1.0 / inputs.len() as f64;
    let mut g = LearnableRouterParams::zeros(r.d_model(), k);
    let mut total = 0.0;
    for (x, t) in inputs.iter().zip(targets) {
        if t.len() != k {
            return shape_err(format!("router target has {} entries, k={k}", t.len()));
        }
        let a = r.hidden(x)?;
        let mut s = r.w2.vec_mul(&a)?;
        axpy(1.0, &r.b2, &mut s);
        let ds: Vector = match loss {
            RouterLoss::SoftmaxCrossEntropy => {
                let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + s.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                total += t
                    .iter()
                    .zip(&s)
                    .map(|(ti, si)| ti * (lse - si))
                    .sum::<f64>()
                    * inv_b;
                let tsum: f64 = t.iter().sum();
                softmax(&s)
                    .iter()
                    .zip(t.iter())
                    .map(|(p, ti)| (tsum * p - ti) * inv_b)
                    .collect()
            }
            RouterLoss::BinaryCrossEntropy => {
                total += s
                    .iter()
                    .zip(t.iter())
                    .map(|(si, ti)| softplus(*si) - ti * si)
                    .sum::<f64>()
                    * inv_b;
                s.iter()
                    .zip(t.iter())
                    .map(|(si, ti)| (sigmoid(*si) - ti) * inv_b)
                    .collect()
            }
        };
        g.w2.add_outer(1.0, &a, &ds);
        axpy(1.0, &ds, &mut g.b2);
        let da = r.w2.mul_vec(&ds)?;
        let dz: Vector = da
            .iter()
            .zip(&a)
            .map(|(d, ai)| d * (1.0 - ai * ai))
            .collect();
        g.w1.add_outer(1.0, x, &dz);
        axpy(1.0, &dz, &mut g.b1);
    }
    Ok((total, g))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RouterTrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    /// Fraction of samples held out for the dev split.
    pub dev_fraction: f64,
    pub seed: u64,
    #[serde(default)]
    pub loss: RouterLoss,
}

impl Default for RouterTrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            epochs: 30,
            batch: 512,
            dev_fraction: 0.1,
            seed: 0,
            loss: RouterLoss::SoftmaxCrossEntropy,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedRouter {
    pub params: LearnableRouterParams,
    /// Loss on the train split before training and after every epoch.
    pub train_loss: Vec<f64>,
    /// Loss on the dev split, same schedule. Empty if the dev split is empty.
    pub dev_loss: Vec<f64>,
    pub train_indices: Vec<usize>,
    pub dev_indices: Vec<usize>,
}

fn mean_loss(
    r: &LearnableRouterParams,
    idx: &[usize],
    inputs: &[Vector],
    targets: &[Vector],
    loss: RouterLoss,
) -> Result<f64> {
    if idx.is_empty() {
        return Ok(f64::NAN);
    }
    let xs: Vec<&[f64]> = idx.iter().map(|&i| inputs[i].as_slice()).collect();
    let ts: Vec<&[f64]> = idx.iter().map(|&i| targets[i].as_slice()).collect();
    Ok(router_loss_and_grad(r, &xs, &ts, loss)?.0)
}

/// Fit the two-layer router to predict where the positive neurons of each
/// input fall. `inputs[i]` must be the input that produced trace row `i`.
pub fn train_learnable_router(
    w: &FfnWeights,
    p: &ExpertPartition,
    inputs: &[Vector],
    t: &ActivationTrace,
    cfg: &RouterTrainConfig,
) -> Result<TrainedRouter> {
    if t.d_ff() != w.d_ff || p.d_ff() != w.d_ff {
        return shape_err("trace, partition and FFN disagree on d_ff");
    }
    if t.samples() != inputs.len() {
        return shape_err(format!(
            "{} inputs for {} trace rows",
            inputs.len(),
            t.samples()
        ));
    }
    if inputs.is_empty() {
        return Err(Error::Empty("router training inputs"));
    }
    if inputs.iter().any(|x| x.len() != w.d_model) {
        return shape_err("router input dimension differs from d_model");
    }
    if cfg.lr.is_nan() || cfg.lr < 0.0 || cfg.batch == 0 || !(0.0..1.0).contains(&cfg.dev_fraction)
    {
        return Err(Error::Config(
            "router config needs lr >= 0, batch >= 1, dev_fraction in [0,1)".into(),
        ));
    }
    let targets: Vec<Vector> = (0..t.samples())
        .map(|i| score_groundtruth(t.row(i), p).map(|c| router_target(&c, p.d_e(), cfg.loss)))
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = LearnableRouterParams::random(w.d_model, p.k(), &mut rng);
    let order = shuffled_indices(inputs.len(), &mut rng);
    let n_dev = ((inputs.len() as f64) * cfg.dev_fraction).round() as usize;
    let n_train = (inputs.len() - n_dev).max(1);
    let train_idx = order[..n_train].to_vec();
    let dev_idx = order[n_train..].to_vec();

    let mut train_loss = vec![mean_loss(&params, &train_idx, inputs, &targets, cfg.loss)?];
    let mut dev_loss = Vec::new();
    if !dev_idx.is_empty() {
        dev_loss.push(mean_loss(&params, &dev_idx, inputs, &targets, cfg.loss)?);
    }

    let mut flat = params.to_flat();
    let mut opt = Adam::new(flat.len(), cfg.lr);
    let mut batch_order = train_idx.clone();
    for epoch in 1..=cfg.epochs {
        use rand::seq::SliceRandom;
        batch_order.shuffle(&mut rng);
        for chunk in batch_order.chunks(cfg.batch) {
            let xs: Vec<&[f64]> = chunk.iter().map(|&i| inputs[i].as_slice()).collect();
            let ts: Vec<&[f64]> = chunk.iter().map(|&i| targets[i].as_slice()).collect();
            let (l, g) = router_loss_and_grad(&params, &xs, &ts, cfg.loss)?;
            if !l.is_finite() {
                return Err(Error::Divergence { epoch, loss: l });
            }
            opt.update(&mut flat, &g.to_flat());
            params = LearnableRouterParams::from_flat(w.d_model, p.k(), &flat)?;
        }
        let tl = mean_loss(&params, &train_idx, inputs, &targets, cfg.loss)?;
        if !tl.is_finite() {
            return Err(Error::Divergence { epoch, loss: tl });
        }
        train_loss.push(tl);
        if !dev_idx.is_empty() {
            dev_loss.push(mean_loss(&params, &dev_idx, inputs, &targets, cfg.loss)?);
        }
    }
    Ok(TrainedRouter {
        params,
        train_loss,
        dev_loss,
        train_indices: train_idx,
        dev_indices: dev_idx,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RouterKind {
    #[serde(rename = "gt")]
    Groundtruth,
    #[serde(rename = "random")]
    RandomCenter,
    #[serde(rename = "param")]
    ParamCenter,
    #[serde(rename = "learn")]
    Learnable,
}

impl RouterKind {
    pub const ALL: [RouterKind; 4] = [
        RouterKind::Groundtruth,
        RouterKind::RandomCenter,
        RouterKind::ParamCenter,
        RouterKind::Learnable,
    ];
}

impl fmt::Display for RouterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RouterKind::Groundtruth => "gt",
            RouterKind::RandomCenter => "random",
            RouterKind::ParamCenter => "param",
            RouterKind::Learnable => "learn",
        })
    }
}

impl FromStr for RouterKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gt" | "groundtruth" => Ok(RouterKind::Groundtruth),
            "random" | "random-center" => Ok(RouterKind::RandomCenter),
            "param" | "param-center" => Ok(RouterKind::ParamCenter),
            "learn" | "learnable" => Ok(RouterKind::Learnable),
            other => Err(Error::Config(format!("unknown router {other:?}"))),
        }
    }
}

/// A concrete expert scorer.
#[derive(Debug, Clone, PartialEq)]
pub enum Router {
    /// Counts positive neurons of the full pre-activation (oracle).
    Groundtruth {
        k: usize,
    },
    /// `centers` is `k × d_model`.
    RandomCenter {
        centers: Matrix,
    },
    ParamCenter {
        centers: Matrix,
    },
    Learnable(LearnableRouterParams),
}

impl Router {
    pub fn random_center(e: &ExpertWeights) -> Self {
        let c: Vec<Vector> = e.experts.iter().map(|ex| ex.w1.column(0)).collect();
        Router::RandomCenter {
            centers: Matrix::new(c.len(), e.d_model, c.concat()).expect("center shape"),
        }
    }

    pub fn param_center(e: &ExpertWeights) -> Self {
        let c: Vec<Vector> = e.experts.iter().map(|ex| ex.column_mean()).collect();
        Router::ParamCenter {
            centers: Matrix::new(c.len(), e.d_model, c.concat()).expect("center shape"),
        }
    }

    pub fn kind(&self) -> RouterKind {
        match self {
            Router::Groundtruth { .. } => RouterKind::Groundtruth,
            Router::RandomCenter { .. } => RouterKind::RandomCenter,
            Router::ParamCenter { .. } => RouterKind::ParamCenter,
            Router::Learnable(_) => RouterKind::Learnable,
        }
    }

    pub fn k(&self) -> usize {
        match self {
            Router::Groundtruth { k } => *k,
            Router::RandomCenter { centers } | Router::ParamCenter { centers } => centers.rows(),
            Router::Learnable(p) => p.k(),
        }
    }

    /// Scores for `x`. The groundtruth router evaluates every expert's
    /// pre-activation to count positives.
    pub fn scores(&self, x: &[f64], e: &ExpertWeights) -> Result<Vector> {
        check_dim(x, e)?;
        match self {
            Router::Groundtruth { .. } => e
                .experts
                .iter()
                .map(|ex| Ok(ex.preactivation(x)?.iter().filter(|&&v| v > 0.0).count() as f64))
                .collect(),
            Router::RandomCenter { centers } | Router::ParamCenter { centers } => Ok((0..centers
                .rows())
                .map(|i| cosine(x, centers.row(i)))
                .collect()),
            Router::Learnable(p) => score_learnable(x, p),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedMatrix {
    pub rows: usize,
    pub cols: usize,
    /// Base64 of little-endian f64 values, row-major.
    pub data: String,
}

impl EncodedMatrix {
    pub fn encode(m: &Matrix) -> Self {
        let bytes: Vec<u8> = m.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        Self {
            rows: m.rows(),
            cols: m.cols(),
            data: B64.encode(bytes),
        }
    }

    pub fn from_vector(v: &[f64]) -> Self {
        Self::encode(&Matrix::new(1, v.len(), v.to_vec()).expect("row vector"))
    }

    pub fn decode(&self) -> Result<Matrix> {
        let bytes = B64
            .decode(&self.data)
            .map_err(|e| Error::Config(format!("router payload is not base64: {e}")))?;
        if bytes.len() != 8 * self.rows * self.cols {
            return shape_err(format!(
                "router payload has {} bytes, expected {}",
                bytes.len(),
                8 * self.rows * self.cols
            ));
        }
        let vals = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Matrix::new(self.rows, self.cols, vals)
    }
}

/// JSON form of a router.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterFile {
    #[serde(rename = "type")]
    pub kind: RouterKind,
    pub k: usize,
    pub d_model: usize,
    pub seed: u64,
    pub payload: BTreeMap<String, EncodedMatrix>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub train_loss: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dev_loss: Vec<f64>,
}

impl RouterFile {
    pub fn new(r: &Router, d_model: usize, seed: u64) -> Self {
        let mut payload = BTreeMap::new();
        match r {
            Router::Groundtruth { .. } => {}
            Router::RandomCenter { centers } | Router::ParamCenter { centers } => {
                payload.insert("centers".into(), EncodedMatrix::encode(centers));
            }
            Router::Learnable(p) => {
                payload.insert("w1".into(), EncodedMatrix::encode(&p.w1));
                payload.insert("b1".into(), EncodedMatrix::from_vector(&p.b1));
                payload.insert("w2".into(), EncodedMatrix::encode(&p.w2));
                payload.insert("b2".into(), EncodedMatrix::from_vector(&p.b2));
            }
        }
        Self {
            kind: r.kind(),
            k: r.k(),
            d_model,
            seed,
            payload,
            train_loss: Vec::new(),
            dev_loss: Vec::new(),
        }
    }

    fn get(&self, name: &str) -> Result<Matrix> {
        self.payload
            .get(name)
            .ok_or_else(|| Error::Config(format!("router file is missing {name:?}")))?
            .decode()
    }

    pub fn to_router(&self) -> Result<Router> {
        let r = match self.kind {
            RouterKind::Groundtruth => Router::Groundtruth { k: self.k },
            RouterKind::RandomCenter => Router::RandomCenter {
                centers: self.get("centers")?,
            },
            RouterKind::ParamCenter => Router::ParamCenter {
                centers: self.get("centers")?,
            },
            RouterKind::Learnable => {
                let p = LearnableRouterParams {
                    w1: self.get("w1")?,
                    b1: self.get("b1")?.into_data(),
                    w2: self.get("w2")?,
                    b2: self.get("b2")?.into_data(),
                };
                let flat = p.to_flat();
                Router::Learnable(LearnableRouterParams::from_flat(
                    self.d_model,
                    self.k,
                    &flat,
                )?)
            }
        };
        if r.k() != self.k {
            return shape_err(format!(
                "router file declares k={}, payload has {}",
                self.k,
                r.k()
            ));
        }
        if let Router::RandomCenter { centers } | Router::ParamCenter { centers } = &r {
            if centers.cols() != self.d_model {
                return shape_err("router centers do not match d_model");
            }
        }
        Ok(r)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
