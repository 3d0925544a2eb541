//! Differentiable numeric core: valid 1-D convolution over embedded reviews,
//! max-pooling, softmax, bits-entropy, the batch entropy regularizer, the
//! composite loss and their hand-written gradients.
//!
//! Everything is `f64`. Shapes are carried explicitly and buffers are flat
//! row-major `Vec<f64>`.

mod gradcheck;
mod graph;

use std::f64::consts::LN_2;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use gradcheck::{gradient_check, GradCheckReport, GradCheckSpec};
pub use graph::{
    loss, loss_and_gradients, Batch, Gradients, GraphOptions, GraphParams, Observation, ReviewRef,
};

/// Guard below which the RMSE square root is treated as `RMSE_EPS`.
pub const RMSE_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(&'static str),
    #[error("non-finite loss")]
    NonFiniteLoss,
}

/// Element-wise nonlinearity applied to convolution outputs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Identity,
    Tanh,
}

impl Activation {
    pub fn apply(self, map: &mut ActivationMap) {
        if self == Activation::Tanh {
            map.values.iter_mut().for_each(|v| *v = v.tanh());
        }
    }

    /// Derivative expressed through the activated output `z`.
    fn derivative_from_output(self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - z * z,
        }
    }
}

/// `L × D` word-vector matrix for one review. Rows past `true_length` are PAD rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ReviewMatrix {
    pub len: usize,
    pub dim: usize,
    pub data: Vec<f64>,
    pub true_length: usize,
}

impl ReviewMatrix {
    pub fn new(len: usize, dim: usize, data: Vec<f64>, true_length: usize) -> Self {
        assert_eq!(data.len(), len * dim, "review matrix shape");
        Self {
            len,
            dim,
            data,
            true_length,
        }
    }

    /// Looks each token up in a flat `|V| × dim` table.
    pub fn gather(tokens: &[u32], true_length: usize, table: &[f64], dim: usize) -> Self {
        let mut data = Vec::with_capacity(tokens.len() * dim);
        for &t in tokens {
            let start = t as usize * dim;
            data.extend_from_slice(&table[start..start + dim]);
        }
        Self::new(tokens.len(), dim, data, true_length)
    }
}

/// `F` filters of shape `window × dim` plus one bias each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterBank {
    pub n_filters: usize,
    pub window: usize,
    pub dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl FilterBank {
    pub fn zeros(n_filters: usize, window: usize, dim: usize) -> Self {
        Self {
            n_filters,
            window,
            dim,
            weights: vec![0.0; n_filters * window * dim],
            bias: vec![0.0; n_filters],
        }
    }

    /// Weights uniform in `[-scale, scale]`, zero bias.
    pub fn uniform<R: Rng>(
        n_filters: usize,
        window: usize,
        dim: usize,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        let mut bank = Self::zeros(n_filters, window, dim);
        bank.weights
            .iter_mut()
            .for_each(|w| *w = rng.gen_range(-scale..=scale));
        bank
    }

    pub fn filter(&self, f: usize) -> &[f64] {
        let n = self.window * self.dim;
        &self.weights[f * n..(f + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }
}

/// `F × L'` window activations of one review, `L' = L - w + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMap {
    pub n_filters: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl ActivationMap {
    pub fn row(&self, f: usize) -> &[f64] {
        &self.values[f * self.width..(f + 1) * self.width]
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `a[f][t] = bias_f + Σ_{i<w, j<D} filter_f[i][j] · review[t+i][j]`.
pub fn conv1d_valid(
    review: &ReviewMatrix,
    filters: &FilterBank,
) -> Result<ActivationMap, NumericsError> {
    if review.dim != filters.dim {
        return Err(NumericsError::DimensionMismatch(format!(
            "review dim {} vs filter dim {}",
            review.dim, filters.dim
        )));
    }
    if filters.window == 0 || filters.window > review.len {
        return Err(NumericsError::DimensionMismatch(format!(
            "window {} does not fit review length {}",
            filters.window, review.len
        )));
    }
    let width = review.len - filters.window + 1;
    let span = filters.window * filters.dim;
    let mut values = Vec::with_capacity(filters.n_filters * width);
    for f in 0..filters.n_filters {
        let w = filters.filter(f);
        let b = filters.bias[f];
        for t in 0..width {
            let start = t * review.dim;
            values.push(b + dot(w, &review.data[start..start + span]));
        }
    }
    Ok(ActivationMap {
        n_filters: filters.n_filters,
        width,
        values,
    })
}

/// Maximum and the first index attaining it.
pub fn max_pool(row: &[f64]) -> (f64, usize) {
    assert!(!row.is_empty(), "max_pool of an empty row");
    let mut best = (row[0], 0);
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > best.0 {
            best = (v, i);
        }
    }
    best
}

pub fn softmax(a: &[f64]) -> Vec<f64> {
    let m = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = a.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// `-Σ p_i log2 p_i` with `0 · log2 0 = 0`.
pub fn entropy_bits(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.log2())
        .sum::<f64>()
}

/// Entropy in bits of `softmax(logits)` and its gradient w.r.t. the logits,
/// computed through the log-softmax so saturated rows stay finite.
pub fn softmax_entropy_with_grad(logits: &[f64]) -> (f64, Vec<f64>) {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    let ln_z = s.ln();
    let mut h_nats = ln_z;
    for (x, ex) in logits.iter().zip(&e) {
        h_nats -= ex / s * (x - m);
    }
    let h = (h_nats / LN_2).max(0.0);
    // dH/da_k = -p_k (log2 p_k + H)
    let grad = logits
        .iter()
        .zip(&e)
        .map(|(x, ex)| {
            let p = ex / s;
            let log2_p = (x - m - ln_z) / LN_2;
            -p * (log2_p + h)
        })
        .collect();
    (h, grad)
}

pub fn softmax_entropy(logits: &[f64]) -> f64 {
    softmax_entropy_with_grad(logits).0
}

/// Number of leading windows covering real words, at least one.
pub fn masked_width(true_length: usize, window: usize, width: usize) -> usize {
    (true_length + 1).saturating_sub(window).clamp(1, width)
}

/// Mean bits-entropy over every (review, filter) row of the batch.
/// With `true_lengths`, each row is cut to the windows that cover real words.
pub fn entropy_regularizer(
    maps: &[ActivationMap],
    window: usize,
    true_lengths: Option<&[usize]>,
) -> f64 {
    assert!(
        !maps.is_empty(),
        "entropy regularizer needs a non-empty batch"
    );
    let mut total = 0.0;
    let mut rows = 0usize;
    for (r, map) in maps.iter().enumerate() {
        let width = match true_lengths {
            Some(lens) => masked_width(lens[r], window, map.width),
            None => map.width,
        };
        for f in 0..map.n_filters {
            total += softmax_entropy(&map.row(f)[..width]);
            rows += 1;
        }
    }
    total / rows as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub rmse_term: f64,
    pub entropy_term_bits: f64,
    pub lambda: f64,
    pub n_reviews: usize,
    pub n_factors: usize,
}

pub fn rmse(predictions: &[f64], targets: &[f64]) -> f64 {
    assert_eq!(predictions.len(), targets.len());
    assert!(!predictions.is_empty(), "rmse of an empty batch");
    let sse: f64 = predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    (sse / predictions.len() as f64).sqrt()
}

/// `total = RMSE + λ · entropy`.
pub fn composite_loss(
    predictions: &[f64],
    targets: &[f64],
    entropy_bits: f64,
    lambda: f64,
) -> LossBreakdown {
    assert!(lambda >= 0.0, "lambda must be non-negative");
    let rmse_term = rmse(predictions, targets);
    LossBreakdown {
        total: rmse_term + lambda * entropy_bits,
        rmse_term,
        entropy_term_bits: entropy_bits,
        lambda,
        n_reviews: 0,
        n_factors: 0,
    }
}
