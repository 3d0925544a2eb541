//! Mini-batch training of ConvMF, RMSE evaluation, metric logs and the
//! λ × factor grid.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{clamp_rating, pmf_predict, Rating};
use crate::checkpoint::ModelState;
use crate::corpus::{Corpus, TokenizedReview};
use crate::embeddings::EmbeddingTable;
use crate::model::{
    model_batch_loss, predict_rating, BatchPlan, ItemEmbeddingCache, LossOptions, ModelConfig,
    ModelError, ModelParams, TrainReviews,
};
use crate::numerics::{Activation, Gradients, LossBreakdown, NumericsError};
use crate::topics::{accumulate_with_params, export_topic_report, KeywordOptions, TopicError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training set has no reviews")]
    EmptyTrainingSet,
    #[error("non-finite loss at epoch {epoch}; last good parameters kept")]
    NonFinite {
        epoch: usize,
        last_good: Box<ModelParams>,
        history: RunHistory,
        source: Option<NumericsError>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0} split is empty")]
    EmptySplit(EvalSplit),
    #[error(transparent)]
    Topics(#[from] TopicError),
    #[error("metrics i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub n_factors: usize,
    pub lambda: f64,
    pub window: usize,
    pub review_len: usize,
    /// Items per mini-batch.
    pub batch_size: usize,
    pub epochs: usize,
    pub step_size: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub mask_pad: bool,
    pub freeze_embeddings: bool,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    pub activation: Activation,
    pub center: bool,
    pub init_scale: f64,
    /// Reviews per item per batch; `None` uses all of them.
    pub review_cap: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_factors: 8,
            lambda: 0.0,
            window: 5,
            review_len: 64,
            batch_size: 32,
            epochs: 30,
            step_size: 1e-3,
            weight_decay: 1e-4,
            seed: 42,
            mask_pad: false,
            freeze_embeddings: true,
            patience: 5,
            activation: Activation::Identity,
            center: true,
            init_scale: 0.1,
            review_cap: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and >= 0");
        }
        if self.n_factors == 0 {
            return bad("n_factors must be at least 1");
        }
        if self.window == 0 || self.window > self.review_len {
            return bad("window must be in 1..=review_len");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return bad("step_size must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0");
        }
        if self.review_cap == Some(0) {
            return bad("review_cap must be at least 1");
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            n_factors: self.n_factors,
            window: self.window,
            activation: self.activation,
            freeze_embeddings: self.freeze_embeddings,
            center: self.center,
            init_scale: self.init_scale,
        }
    }
}

/// Adaptive-moment optimizer over flat parameter blocks. Rows of sparse
/// blocks only advance when touched.
#[derive(Debug, Clone)]
pub struct Adam {
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    moments: BTreeMap<&'static str, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(step_size: f64, weight_decay: f64) -> Self {
        Self {
            step_size,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Advances the shared step counter; call once per mini-batch.
    pub fn tick(&mut self) {
        self.t += 1;
    }

    /// Updates `params[offset..offset + grad.len()]` of block `name`.
    pub fn update(&mut self, name: &'static str, params: &mut [f64], offset: usize, grad: &[f64]) {
        let n = params.len();
        let (m, v) = self
            .moments
            .entry(name)
            .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        let t = self.t.max(1) as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, &g0) in grad.iter().enumerate() {
            let j = offset + k;
            let g = g0 + self.weight_decay * params[j];
            m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
            v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
            params[j] -= self.step_size * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
        }
    }
}

fn apply_gradients(opt: &mut Adam, params: &mut ModelParams, grads: &Gradients) {
    opt.tick();
    let k = params.n_factors;
    for (&u, g) in &grads.user_factors {
        opt.update("user_factors", &mut params.user_factors, u * k, g);
    }
    let filters = params.filters_mut();
    opt.update(
        "filter_weights",
        &mut filters.weights,
        0,
        &grads.filter_weights,
    );
    opt.update("filter_bias", &mut filters.bias, 0, &grads.filter_bias);
    if let Some(rows) = &grads.embeddings {
        let dim = filters.dim;
        if let Some(table) = params.tuned_embeddings_mut() {
            for (&tok, g) in rows {
                opt.update("embeddings", table, tok as usize * dim, g);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over the epoch's mini-batches of each loss component.
    pub train_total: f64,
    pub train_rmse: f64,
    pub train_entropy_bits: f64,
    pub val_rmse: f64,
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub lambda: f64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl RunHistory {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch]
    }

    pub fn last(&self) -> &EpochRecord {
        self.epochs.last().expect("history holds epoch 0")
    }

    /// Deterministic columns only; wall time goes to [`RunHistory::write_timing_csv`].
    pub fn write_metrics_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(
            w,
            "epoch,train_total,train_rmse,train_entropy_bits,val_rmse,best"
        )?;
        for e in &self.epochs {
            writeln!(
                w,
                "{},{:?},{:?},{:?},{:?},{}",
                e.epoch,
                e.train_total,
                e.train_rmse,
                e.train_entropy_bits,
                e.val_rmse,
                u8::from(e.epoch == self.best_epoch)
            )?;
        }
        Ok(())
    }

    pub fn write_timing_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "epoch,seconds")?;
        for e in &self.epochs {
            writeln!(w, "{},{:.6}", e.epoch, e.seconds)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Parameters at the best validation epoch.
    pub params: ModelParams,
    pub history: RunHistory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    Train,
    Validation,
    Test,
}

impl std::fmt::Display for EvalSplit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EvalSplit::Train => "train",
            EvalSplit::Validation => "validation",
            EvalSplit::Test => "test",
        })
    }
}

impl std::str::FromStr for EvalSplit {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Self::Train),
            "validation" | "val" => Ok(Self::Validation),
            "test" => Ok(Self::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

pub fn split_reviews(corpus: &Corpus, split: EvalSplit) -> &[TokenizedReview] {
    match split {
        EvalSplit::Train => &corpus.train,
        EvalSplit::Validation => &corpus.validation,
        EvalSplit::Test => &corpus.test,
    }
}

pub fn split_ratings(corpus: &Corpus, split: EvalSplit) -> Vec<Rating> {
    split_reviews(corpus, split)
        .iter()
        .map(|r| Rating {
            user: r.user,
            item: r.item,
            value: r.rating,
        })
        .collect()
}

fn clamped_rmse(
    pairs: impl Iterator<Item = Result<(f64, f64), ModelError>>,
) -> Result<Option<f64>, ModelError> {
    let mut sse = 0.0;
    let mut n = 0usize;
    for p in pairs {
        let (pred, y) = p?;
        let e = clamp_rating(pred) - y;
        sse += e * e;
        n += 1;
    }
    Ok((n > 0).then(|| (sse / n as f64).sqrt()))
}

/// RMSE of clamped ConvMF predictions over `ratings`.
pub fn convmf_rmse(
    ratings: &[TokenizedReview],
    params: &ModelParams,
    cache: &ItemEmbeddingCache,
) -> Result<Option<f64>, ModelError> {
    clamped_rmse(ratings.iter().map(|r| {
        predict_rating(r.user as usize, r.item as usize, params, cache).map(|p| (p, r.rating))
    }))
}

/// `sqrt(mean((clamp(pred) − r)²))` over a split.
pub fn evaluate_rmse(
    model: &ModelState,
    corpus: &Corpus,
    table: Option<&EmbeddingTable>,
    split: EvalSplit,
) -> Result<f64, TrainError> {
    let reviews = split_reviews(corpus, split);
    if reviews.is_empty() {
        return Err(TrainError::EmptySplit(split));
    }
    let value = match model {
        ModelState::Offset(m) => clamped_rmse(reviews.iter().map(|r| Ok((m.predict(), r.rating))))?,
        ModelState::Pmf(p) => clamped_rmse(
            reviews
                .iter()
                .map(|r| Ok((pmf_predict(p, r.user as usize, r.item as usize), r.rating))),
        )?,
        ModelState::Convmf(params) => {
            let table = table
                .ok_or_else(|| TrainError::Config("convmf evaluation needs word vectors".into()))?;
            let train = TrainReviews::from_corpus(corpus);
            let cache = ItemEmbeddingCache::build(params, &train, table)?;
            convmf_rmse(reviews, params, &cache)?
        }
    };
    Ok(value.expect("split is non-empty"))
}

fn mean_breakdown(parts: &[LossBreakdown]) -> (f64, f64, f64) {
    let n = parts.len().max(1) as f64;
    let total = parts.iter().map(|b| b.total).sum::<f64>() / n;
    let rmse = parts.iter().map(|b| b.rmse_term).sum::<f64>() / n;
    let ent = parts.iter().map(|b| b.entropy_term_bits).sum::<f64>() / n;
    (total, rmse, ent)
}

/// Trains from fresh parameters seeded by `config.seed`.
pub fn train_convmf(
    config: &TrainConfig,
    corpus: &Corpus,
    table: &EmbeddingTable,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if corpus.train.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    if config.review_len != corpus.review_len {
        return Err(TrainError::Config(format!(
            "review_len {} differs from corpus length {}",
            config.review_len, corpus.review_len
        )));
    }
    let mu = corpus
        .train_mean_rating()
        .ok_or(TrainError::EmptyTrainingSet)?;
    let mut params = ModelParams::init(
        corpus.n_users(),
        table.dim(),
        mu,
        &config.model_config(),
        config.seed,
    );
    if !config.freeze_embeddings {
        params.unfreeze_embeddings(table);
    }
    train_from(params, config, corpus, table)
}

/// Trains starting from `params`.
pub fn train_from(
    mut params: ModelParams,
    config: &TrainConfig,
    corpus: &Corpus,
    table: &EmbeddingTable,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let train = TrainReviews::from_corpus(corpus);
    let mut items = train.items_with_reviews();
    if items.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    // separate streams so the review cap does not shift the item order
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut cap_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2));
    let opts = LossOptions {
        lambda: config.lambda,
        mask_pad: config.mask_pad,
    };
    let mut opt = Adam::new(config.step_size, config.weight_decay);
    let validate = |p: &ModelParams| -> Result<f64, ModelError> {
        let cache = ItemEmbeddingCache::build(p, &train, table)?;
        Ok(convmf_rmse(&corpus.validation, p, &cache)?.unwrap_or(f64::NAN))
    };

    let mut history = RunHistory {
        lambda: config.lambda,
        epochs: Vec::new(),
        best_epoch: 0,
    };
    let mut best = params.clone();
    let mut best_val = f64::INFINITY;
    let mut since_best = 0usize;

    for epoch in 0..=config.epochs {
        let started = Instant::now();
        items.shuffle(&mut order_rng);
        let mut parts = Vec::with_capacity(items.len().div_ceil(config.batch_size));
        for chunk in items.chunks(config.batch_size) {
            let plan = match config.review_cap {
                Some(cap) => BatchPlan::capped(chunk, &train, cap, &mut cap_rng),
                None => BatchPlan::all_reviews(chunk, &train),
            };
            let (loss, grads) = match model_batch_loss(&plan, &train, table, &params, opts) {
                Ok(r) => r,
                Err(ModelError::Numerics(e)) => {
                    return Err(non_finite(epoch, best, history, Some(e)));
                }
                Err(e) => return Err(e.into()),
            };
            if !loss.total.is_finite() {
                return Err(non_finite(epoch, best, history, None));
            }
            parts.push(loss);
            // epoch 0 only measures the initial parameters
            if epoch > 0 {
                apply_gradients(&mut opt, &mut params, &grads);
            }
        }
        if !params.is_finite() {
            return Err(non_finite(epoch, best, history, None));
        }
        let val_rmse = validate(&params)?;
        let (train_total, train_rmse, train_entropy_bits) = mean_breakdown(&parts);
        history.epochs.push(EpochRecord {
            epoch,
            train_total,
            train_rmse,
            train_entropy_bits,
            val_rmse,
            seconds: started.elapsed().as_secs_f64(),
        });
        // without a validation split the latest epoch counts as best
        if val_rmse < best_val
            || (val_rmse.is_nan() && best_val.is_infinite())
            || corpus.validation.is_empty()
        {
            best_val = if val_rmse.is_nan() {
                f64::INFINITY
            } else {
                val_rmse
            };
            best = params.clone();
            history.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if config.patience > 0 && since_best >= config.patience {
                log::info!("early stop at epoch {epoch}, best {}", history.best_epoch);
                break;
            }
        }
    }
    Ok(TrainOutcome {
        params: best,
        history,
    })
}

fn non_finite(
    epoch: usize,
    last_good: ModelParams,
    history: RunHistory,
    source: Option<NumericsError>,
) -> TrainError {
    TrainError::NonFinite {
        epoch,
        last_good: Box::new(last_good),
        history,
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub lambda: f64,
    pub n_factors: usize,
    /// Test RMSE at the best validation epoch.
    pub rmse: Option<f64>,
    pub val_rmse: Option<f64>,
    pub coherence: Option<f64>,
    pub final_entropy_bits: Option<f64>,
    pub best_epoch: Option<usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct GridRun {
    pub cell: GridCell,
    pub outcome: Option<TrainOutcome>,
}

/// One training run per (λ, F) cell with the template's seed. A failing
/// cell records its error and the grid moves on.
pub fn run_grid(
    template: &TrainConfig,
    lambdas: &[f64],
    factors: &[usize],
    corpus: &Corpus,
    table: &EmbeddingTable,
    keywords: &KeywordOptions,
) -> Result<Vec<GridRun>, TrainError> {
    if lambdas.is_empty() || factors.is_empty() {
        return Err(TrainError::Config(
            "grid needs at least one lambda and one factor count".into(),
        ));
    }
    let mut runs = Vec::with_capacity(lambdas.len() * factors.len());
    for &n_factors in factors {
        for &lambda in lambdas {
            let config = TrainConfig {
                lambda,
                n_factors,
                ..*template
            };
            let mut cell = GridCell {
                lambda,
                n_factors,
                rmse: None,
                val_rmse: None,
                coherence: None,
                final_entropy_bits: None,
                best_epoch: None,
                error: None,
            };
            let result = (|| -> Result<TrainOutcome, TrainError> {
                let outcome = train_convmf(&config, corpus, table)?;
                cell.best_epoch = Some(outcome.history.best_epoch);
                cell.val_rmse = Some(outcome.history.best().val_rmse);
                cell.final_entropy_bits = Some(outcome.history.last().train_entropy_bits);
                let state = ModelState::Convmf(outcome.params.clone());
                cell.rmse = Some(evaluate_rmse(&state, corpus, Some(table), EvalSplit::Test)?);
                let stats = accumulate_with_params(&outcome.params, corpus, table)?;
                let report = export_topic_report(
                    &stats,
                    &corpus.vocab,
                    table,
                    keywords,
                    serde_json::Value::Null,
                );
                cell.coherence = report.overall_coherence;
                Ok(outcome)
            })();
            let outcome = match result {
                Ok(o) => Some(o),
                Err(e) => {
                    log::warn!("grid cell lambda={lambda} F={n_factors} failed: {e}");
                    cell.error = Some(e.to_string());
                    None
                }
            };
            runs.push(GridRun { cell, outcome });
        }
    }
    Ok(runs)
}

pub fn grid_table_json(runs: &[GridRun]) -> String {
    let cells: Vec<&GridCell> = runs.iter().map(|r| &r.cell).collect();
    serde_json::to_string_pretty(&serde_json::json!({ "cells": cells })).expect("grid serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_is_signed_step_size() {
        let mut opt = Adam::new(0.01, 0.0);
        let mut p = vec![1.0, -2.0, 0.5];
        opt.tick();
        opt.update("x", &mut p, 0, &[3.0, -0.2, 0.0]);
        // bias-corrected first step is step_size * g / (|g| + eps)
        assert!((p[0] - 0.99).abs() < 1e-9);
        assert!((p[1] + 1.99).abs() < 1e-9);
        assert_eq!(p[2], 0.5);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut opt = Adam::new(0.05, 0.0);
        let mut p = vec![3.0, -4.0];
        for _ in 0..2000 {
            let g: Vec<f64> = p.iter().map(|x| 2.0 * (x - 1.0)).collect();
            opt.tick();
            opt.update("x", &mut p, 0, &g);
        }
        assert!(p.iter().all(|x| (x - 1.0).abs() < 1e-3), "{p:?}");
    }

    #[test]
    fn lazy_rows_leave_untouched_entries() {
        let mut opt = Adam::new(0.1, 0.5);
        let mut p = vec![1.0; 6];
        opt.tick();
        opt.update("rows", &mut p, 3, &[1.0, 1.0, 1.0]);
        assert_eq!(&p[..3], &[1.0; 3]);
        assert!(p[3..].iter().all(|&x| x < 1.0));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig {
                lambda: -0.1,
                ..Default::default()
            },
            TrainConfig {
                n_factors: 0,
                ..Default::default()
            },
            TrainConfig {
                window: 65,
                ..Default::default()
            },
            TrainConfig {
                batch_size: 0,
                ..Default::default()
            },
        ] {
            assert!(matches!(bad.validate(), Err(TrainError::Config(_))));
        }
    }

    #[test]
    fn metrics_csv_shape() {
        let h = RunHistory {
            lambda: 0.8,
            epochs: vec![
                EpochRecord {
                    epoch: 0,
                    train_total: 1.5,
                    train_rmse: 1.0,
                    train_entropy_bits: 0.625,
                    val_rmse: 1.2,
                    seconds: 0.3,
                },
                EpochRecord {
                    epoch: 1,
                    train_total: 1.25,
                    train_rmse: 0.75,
                    train_entropy_bits: 0.625,
                    val_rmse: 1.1,
                    seconds: 0.2,
                },
            ],
            best_epoch: 1,
        };
        let mut out = Vec::new();
        h.write_metrics_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(
            text,
            "epoch,train_total,train_rmse,train_entropy_bits,val_rmse,best\n0,1.5,1.0,0.625,1.2,0\n1,1.25,0.75,0.625,1.1,1\n"
        );
    }
}
