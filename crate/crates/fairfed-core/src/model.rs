//! Binary logistic regression with weighted mini-batch SGD.
//!
//! Training is a pure function of (initial parameters, data, sample weights,
//! config): the shuffle order comes from a ChaCha20 generator seeded by the
//! config, so repeated calls are bitwise identical.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::TabularDataset;
use crate::rng::derive_rng;

/// Probability clamp for the loss; keeps log() finite on confident mistakes.
const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: model has {model} features, input has {input}")]
    DimensionMismatch { model: usize, input: usize },
    #[error("sample weight vector has {weights} entries for {rows} rows")]
    WeightLengthMismatch { weights: usize, rows: usize },
    #[error("sample weights must be finite and non-negative (found {0})")]
    InvalidWeight(f64),
    #[error("training needs at least one row")]
    EmptyData,
    #[error("batch size must be at least 1")]
    ZeroBatch,
    #[error("parameters diverged to non-finite values in epoch {epoch}")]
    Diverged { epoch: u32 },
}

/// Model parameters: one weight per feature plus a bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl ModelParams {
    pub fn zeros(n_features: usize) -> Self {
        Self {
            weights: vec![0.0; n_features],
            bias: 0.0,
        }
    }

    pub fn n_features(&self) -> usize {
        self.weights.len()
    }

    /// Flat layout: feature weights followed by the bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = self.weights.clone();
        flat.push(self.bias);
        flat
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self, ModelError> {
        let (&bias, weights) = flat.split_last().ok_or(ModelError::EmptyData)?;
        Ok(Self {
            weights: weights.to_vec(),
            bias,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.bias.is_finite() && self.weights.iter().all(|w| w.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: u32,
    pub batch_size: usize,
    /// Seeds the shuffle order; derived per round and client by the caller.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            epochs: 1,
            batch_size: 64,
            seed: 0,
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn margin(params: &ModelParams, x: &[f64]) -> Result<f64, ModelError> {
    if x.len() != params.weights.len() {
        return Err(ModelError::DimensionMismatch {
            model: params.weights.len(),
            input: x.len(),
        });
    }
    let mut z = params.bias;
    for (w, v) in params.weights.iter().zip(x) {
        z += w * v;
    }
    Ok(z)
}

/// P(y = 1 | x).
pub fn predict_proba(params: &ModelParams, x: &[f64]) -> Result<f64, ModelError> {
    Ok(sigmoid(margin(params, x)?))
}

/// Hard decision; the tie at exactly 0.5 predicts the positive class.
pub fn predict(params: &ModelParams, x: &[f64]) -> Result<u8, ModelError> {
    Ok(u8::from(predict_proba(params, x)? >= 0.5))
}

fn check_weights(weights: &[f64], rows: usize) -> Result<(), ModelError> {
    if weights.len() != rows {
        return Err(ModelError::WeightLengthMismatch {
            weights: weights.len(),
            rows,
        });
    }
    for &w in weights {
        if !w.is_finite() || w < 0.0 {
            return Err(ModelError::InvalidWeight(w));
        }
    }
    Ok(())
}

/// Weighted mean binary cross-entropy over the dataset.
pub fn loss(
    params: &ModelParams,
    data: &TabularDataset,
    sample_weights: &[f64],
) -> Result<f64, ModelError> {
    if data.n_rows() == 0 {
        return Err(ModelError::EmptyData);
    }
    check_weights(sample_weights, data.n_rows())?;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..data.n_rows() {
        let p = predict_proba(params, data.row(i))?.clamp(PROB_EPS, 1.0 - PROB_EPS);
        let y = f64::from(data.label(i));
        let w = sample_weights[i];
        num += w * -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
        den += w;
    }
    if den <= 0.0 {
        return Err(ModelError::InvalidWeight(den));
    }
    Ok(num / den)
}

/// Normalizes sample weights to mean one. A uniform vector maps to exactly
/// all-ones so weighted and unweighted training coincide bitwise.
fn normalize_mean_one(weights: &[f64]) -> Vec<f64> {
    let first = weights[0];
    if weights.iter().all(|w| w.to_bits() == first.to_bits()) && first > 0.0 {
        return vec![1.0; weights.len()];
    }
    let sum: f64 = weights.iter().sum();
    let scale = weights.len() as f64 / sum;
    weights.iter().map(|w| w * scale).collect()
}

/// Mini-batch SGD on the weighted cross-entropy. Sample weights are
/// normalized to mean one first, so only their relative sizes matter.
pub fn local_train(
    init: &ModelParams,
    data: &TabularDataset,
    sample_weights: &[f64],
    cfg: &TrainConfig,
) -> Result<ModelParams, ModelError> {
    let n = data.n_rows();
    if n == 0 {
        return Err(ModelError::EmptyData);
    }
    if cfg.batch_size == 0 {
        return Err(ModelError::ZeroBatch);
    }
    check_weights(sample_weights, n)?;
    if sample_weights.iter().sum::<f64>() <= 0.0 {
        return Err(ModelError::InvalidWeight(0.0));
    }
    if data.n_features() != init.n_features() {
        return Err(ModelError::DimensionMismatch {
            model: init.n_features(),
            input: data.n_features(),
        });
    }

    let weights = normalize_mean_one(sample_weights);
    let mut params = init.clone();
    let mut rng = derive_rng(cfg.seed, "sgd-shuffle", &[]);
    let mut grad_w = vec![0.0f64; params.n_features()];

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            grad_w.iter_mut().for_each(|g| *g = 0.0);
            let mut grad_b = 0.0;
            for &i in batch {
                let x = data.row(i);
                let p = sigmoid(margin(&params, x)?);
                let err = weights[i] * (p - f64::from(data.label(i)));
                for (g, v) in grad_w.iter_mut().zip(x) {
                    *g += err * v;
                }
                grad_b += err;
            }
            let scale = cfg.learning_rate / batch.len() as f64;
            for (w, g) in params.weights.iter_mut().zip(&grad_w) {
                *w -= scale * g;
            }
            params.bias -= scale * grad_b;
        }
        if !params.is_finite() {
            return Err(ModelError::Diverged { epoch });
        }
    }
    Ok(params)
}
