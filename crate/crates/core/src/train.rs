//! Plain mini-batch SGD trainer for toy FFNs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{shuffled_indices, Dataset};
use crate::error::{shape_err, Error, Result};
use crate::math::{axpy, ffn_mse_loss_and_grad, mean_squared_error, FfnWeights};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyTrainConfig {
    pub d_ff: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    /// Initial value of every first-layer bias. Slightly negative values
    /// start most neurons inactive on any given input.
    #[serde(default = "default_bias_init")]
    pub bias_init: f64,
}

fn default_bias_init() -> f64 {
    -0.25
}

impl Default for ToyTrainConfig {
    fn default() -> Self {
        Self {
            d_ff: 512,
            epochs: 30,
            lr: 0.05,
            batch: 32,
            seed: 0,
            bias_init: default_bias_init(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedFfn {
    pub weights: FfnWeights,
    /// Full-dataset MSE before training and after each epoch.
    pub loss_history: Vec<f64>,
}

pub fn dataset_mse(w: &FfnWeights, d: &Dataset) -> Result<f64> {
    let mut total = 0.0;
    for (x, t) in d.inputs.iter().zip(&d.targets) {
        total += mean_squared_error(&w.forward(x)?, t);
    }
    Ok(total / d.len() as f64)
}

/// Train an FFN on `d` by mini-batch SGD on mean squared error.
///
/// Weights start Glorot-uniform, first-layer biases at `cfg.bias_init`,
/// second-layer biases at zero. Initialization and batch order come from
/// `cfg.seed` only, so equal inputs give bit-identical weights.
pub fn train_toy_ffn(d: &Dataset, cfg: &ToyTrainConfig) -> Result<TrainedFfn> {
    if d.is_empty() {
        return Err(Error::Empty("training dataset"));
    }
    d.validate()?;
    if cfg.lr.is_nan() || cfg.lr <= 0.0 {
        return Err(Error::Config(format!(
            "lr must be positive, got {}",
            cfg.lr
        )));
    }
    if cfg.d_ff == 0 || cfg.batch == 0 {
        return Err(Error::Config("d_ff and batch must be at least 1".into()));
    }
    if d.target_dim() != d.input_dim() {
        return shape_err(format!(
            "FFN maps d_model to d_model; dataset has inputs {} and targets {}",
            d.input_dim(),
            d.target_dim()
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut w = FfnWeights::random(d.input_dim(), cfg.d_ff, &mut rng);
    w.b1.iter_mut().for_each(|b| *b = cfg.bias_init);
    let mut history = vec![dataset_mse(&w, d)?];

    for epoch in 1..=cfg.epochs {
        let order = shuffled_indices(d.len(), &mut rng);
        for chunk in order.chunks(cfg.batch) {
            let xs: Vec<&[f64]> = chunk.iter().map(|&i| d.inputs[i].as_slice()).collect();
            let ts: Vec<&[f64]> = chunk.iter().map(|&i| d.targets[i].as_slice()).collect();
            let (loss, grad) = ffn_mse_loss_and_grad(&w, &xs, &ts)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            axpy(-cfg.lr, grad.w1.data(), w.w1.data_mut());
            axpy(-cfg.lr, &grad.b1, &mut w.b1);
            axpy(-cfg.lr, grad.w2.data(), w.w2.data_mut());
            axpy(-cfg.lr, &grad.b2, &mut w.b2);
        }
        let loss = dataset_mse(&w, d)?;
        if !loss.is_finite() || !w.is_finite() {
            return Err(Error::Divergence { epoch, loss });
        }
        history.push(loss);
    }
    Ok(TrainedFfn {
        weights: w,
        loss_history: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticKind};

    #[test]
    fn blobs_training_reduces_loss() {
        let d = gen_synthetic(SyntheticKind::Blobs, 400, 8, 3);
        let cfg = ToyTrainConfig {
            d_ff: 64,
            epochs: 20,
            lr: 0.05,
            batch: 16,
            seed: 7,
            ..Default::default()
        };
        let t = train_toy_ffn(&d, &cfg).unwrap();
        let first = t.loss_history[0];
        let last = *t.loss_history.last().unwrap();
        assert!(last < 0.1 * first, "initial {first}, final {last}");
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let d = gen_synthetic(SyntheticKind::Blobs, 10, 4, 0);
        let cfg = ToyTrainConfig {
            d_ff: 8,
            epochs: 0,
            seed: 5,
            ..Default::default()
        };
        let t = train_toy_ffn(&d, &cfg).unwrap();
        let mut init = FfnWeights::random(4, 8, &mut ChaCha8Rng::seed_from_u64(5));
        init.b1.iter_mut().for_each(|b| *b = cfg.bias_init);
        assert_eq!(t.weights, init);
        assert_eq!(t.loss_history.len(), 1);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let d = gen_synthetic(SyntheticKind::RandomProj, 64, 4, 2);
        let cfg = ToyTrainConfig {
            d_ff: 16,
            epochs: 3,
            lr: 0.05,
            batch: 8,
            seed: 9,
            ..Default::default()
        };
        let a = train_toy_ffn(&d, &cfg).unwrap().weights.to_flat();
        let b = train_toy_ffn(&d, &cfg).unwrap().weights.to_flat();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn divergence_is_reported_with_epoch() {
        let d = gen_synthetic(SyntheticKind::RandomProj, 64, 4, 2);
        let cfg = ToyTrainConfig {
            d_ff: 16,
            epochs: 50,
            lr: 1e6,
            batch: 8,
            seed: 1,
            ..Default::default()
        };
        match train_toy_ffn(&d, &cfg) {
            Err(Error::Divergence { epoch, .. }) => assert!(epoch >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn rejects_empty_and_bad_lr() {
        let empty = Dataset::new("e", vec![], vec![]).unwrap();
        assert!(train_toy_ffn(&empty, &ToyTrainConfig::default()).is_err());
        let d = gen_synthetic(SyntheticKind::Blobs, 4, 2, 0);
        let cfg = ToyTrainConfig {
            lr: 0.0,
            ..Default::default()
        };
        assert!(matches!(train_toy_ffn(&d, &cfg), Err(Error::Config(_))));
    }
}
