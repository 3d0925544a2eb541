//! Forward and reverse pass of the full batch loss:
//!
//! review tokens → word vectors → conv → (activation) → max-pool per filter
//! → mean over an item's reviews → `μ + u·v` → RMSE, plus `λ` times the mean
//! softmax-entropy of every (review, filter) activation row.

use std::collections::BTreeMap;

use super::{
    conv1d_valid, masked_width, max_pool, softmax_entropy_with_grad, Activation, ActivationMap,
    FilterBank, LossBreakdown, NumericsError, ReviewMatrix, RMSE_EPS,
};

#[derive(Debug, Clone, Copy)]
pub struct ReviewRef<'a> {
    pub tokens: &'a [u32],
    pub true_length: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub user: usize,
    /// Index into [`Batch::groups`].
    pub group: usize,
    pub rating: f64,
}

/// One mini-batch. Each group is an item slot listing the reviews whose
/// pooled embeddings are averaged into that item's vector.
#[derive(Debug, Clone, Default)]
pub struct Batch<'a> {
    pub reviews: Vec<ReviewRef<'a>>,
    pub groups: Vec<Vec<usize>>,
    pub observations: Vec<Observation>,
}

#[derive(Debug, Clone, Copy)]
pub struct GraphParams<'a> {
    /// Flat `|V| × dim` word-vector table.
    pub embeddings: &'a [f64],
    pub dim: usize,
    /// Flat `n_users × n_factors`.
    pub user_factors: &'a [f64],
    pub n_factors: usize,
    pub filters: &'a FilterBank,
    pub global_mean: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphOptions {
    pub lambda: f64,
    pub mask_pad: bool,
    pub activation: Activation,
    /// Produce gradients for word vectors (PAD row excluded).
    pub embedding_grad: bool,
}

impl Default for GraphOptions {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            mask_pad: false,
            activation: Activation::Identity,
            embedding_grad: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    /// Only users that appear in the batch.
    pub user_factors: BTreeMap<usize, Vec<f64>>,
    pub filter_weights: Vec<f64>,
    pub filter_bias: Vec<f64>,
    /// Only tokens that appear in the batch; `None` when embeddings are frozen.
    pub embeddings: Option<BTreeMap<u32, Vec<f64>>>,
}

struct ReviewForward {
    map: ActivationMap,
    pooled: Vec<f64>,
    argmax: Vec<usize>,
    row_width: usize,
}

struct Forward {
    reviews: Vec<ReviewForward>,
    item_vectors: Vec<Vec<f64>>,
    predictions: Vec<f64>,
    breakdown: LossBreakdown,
    /// Per review, per filter: dH/da over the (possibly masked) row.
    entropy_grads: Vec<Vec<Vec<f64>>>,
}

fn check_shapes(batch: &Batch<'_>, params: &GraphParams<'_>) -> Result<(), NumericsError> {
    let f = params.filters;
    if f.n_filters != params.n_factors {
        return Err(NumericsError::DimensionMismatch(format!(
            "{} filters for {} latent factors",
            f.n_filters, params.n_factors
        )));
    }
    if f.dim != params.dim || !params.embeddings.len().is_multiple_of(params.dim.max(1)) {
        return Err(NumericsError::DimensionMismatch(
            "embedding dim vs filter dim".into(),
        ));
    }
    if batch.observations.is_empty() {
        return Err(NumericsError::DimensionMismatch(
            "batch has no ratings".into(),
        ));
    }
    let n_users = params.user_factors.len() / params.n_factors.max(1);
    for o in &batch.observations {
        if o.user >= n_users || o.group >= batch.groups.len() {
            return Err(NumericsError::DimensionMismatch(
                "observation index out of range".into(),
            ));
        }
    }
    Ok(())
}

fn forward(
    batch: &Batch<'_>,
    params: &GraphParams<'_>,
    opts: &GraphOptions,
    want_grads: bool,
) -> Result<Forward, NumericsError> {
    check_shapes(batch, params)?;
    let nf = params.n_factors;
    let window = params.filters.window;

    let mut reviews = Vec::with_capacity(batch.reviews.len());
    let mut entropy_grads = Vec::with_capacity(if want_grads { batch.reviews.len() } else { 0 });
    let mut entropy_sum = 0.0;
    for r in &batch.reviews {
        let x = ReviewMatrix::gather(r.tokens, r.true_length, params.embeddings, params.dim);
        let mut map = conv1d_valid(&x, params.filters)?;
        opts.activation.apply(&mut map);
        let row_width = if opts.mask_pad {
            masked_width(r.true_length, window, map.width)
        } else {
            map.width
        };
        let mut pooled = Vec::with_capacity(nf);
        let mut argmax = Vec::with_capacity(nf);
        let mut grads = Vec::new();
        for f in 0..nf {
            let row = map.row(f);
            let (v, i) = max_pool(row);
            pooled.push(v);
            argmax.push(i);
            let (h, g) = softmax_entropy_with_grad(&row[..row_width]);
            entropy_sum += h;
            if want_grads {
                grads.push(g);
            }
        }
        if want_grads {
            entropy_grads.push(grads);
        }
        reviews.push(ReviewForward {
            map,
            pooled,
            argmax,
            row_width,
        });
    }

    let item_vectors: Vec<Vec<f64>> = batch
        .groups
        .iter()
        .map(|members| {
            let mut v = vec![0.0; nf];
            if members.is_empty() {
                return v;
            }
            for &r in members {
                for (acc, x) in v.iter_mut().zip(&reviews[r].pooled) {
                    *acc += x;
                }
            }
            let n = members.len() as f64;
            v.iter_mut().for_each(|x| *x /= n);
            v
        })
        .collect();

    let predictions: Vec<f64> = batch
        .observations
        .iter()
        .map(|o| {
            let u = &params.user_factors[o.user * nf..(o.user + 1) * nf];
            params.global_mean
                + u.iter()
                    .zip(&item_vectors[o.group])
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
        })
        .collect();
    let targets: Vec<f64> = batch.observations.iter().map(|o| o.rating).collect();

    let n_rows = batch.reviews.len() * nf;
    let entropy = if n_rows == 0 {
        0.0
    } else {
        entropy_sum / n_rows as f64
    };
    let mut breakdown = super::composite_loss(&predictions, &targets, entropy, opts.lambda);
    breakdown.n_reviews = batch.reviews.len();
    breakdown.n_factors = nf;
    if !breakdown.total.is_finite() {
        return Err(NumericsError::NonFiniteLoss);
    }
    Ok(Forward {
        reviews,
        item_vectors,
        predictions,
        breakdown,
        entropy_grads,
    })
}

/// Forward pass only.
pub fn loss(
    batch: &Batch<'_>,
    params: &GraphParams<'_>,
    opts: &GraphOptions,
) -> Result<LossBreakdown, NumericsError> {
    forward(batch, params, opts, false).map(|f| f.breakdown)
}

/// Forward pass plus exact reverse-mode gradients.
pub fn loss_and_gradients(
    batch: &Batch<'_>,
    params: &GraphParams<'_>,
    opts: &GraphOptions,
) -> Result<(LossBreakdown, Gradients), NumericsError> {
    let fwd = forward(batch, params, opts, true)?;
    let nf = params.n_factors;
    let filters = params.filters;
    let dim = params.dim;
    let span = filters.window * dim;
    let n_obs = batch.observations.len() as f64;

    // d RMSE / d pred = (pred - y) / (n · rmse)
    let denom = n_obs * fwd.breakdown.rmse_term.max(RMSE_EPS);
    let mut user_grads: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut item_grads = vec![vec![0.0; nf]; batch.groups.len()];
    for (o, pred) in batch.observations.iter().zip(&fwd.predictions) {
        let d = (pred - o.rating) / denom;
        let u = &params.user_factors[o.user * nf..(o.user + 1) * nf];
        let gu = user_grads.entry(o.user).or_insert_with(|| vec![0.0; nf]);
        for k in 0..nf {
            gu[k] += d * fwd.item_vectors[o.group][k];
            item_grads[o.group][k] += d * u[k];
        }
    }

    // Pooled-embedding gradient per review (mean over the group's reviews).
    let mut pooled_grads = vec![vec![0.0; nf]; batch.reviews.len()];
    for (g, members) in batch.groups.iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let n = members.len() as f64;
        for &r in members {
            for k in 0..nf {
                pooled_grads[r][k] += item_grads[g][k] / n;
            }
        }
    }

    let n_rows = (batch.reviews.len() * nf).max(1) as f64;
    let entropy_scale = opts.lambda / n_rows;
    let mut d_weights = vec![0.0; filters.weights.len()];
    let mut d_bias = vec![0.0; nf];
    let mut emb_grads: Option<BTreeMap<u32, Vec<f64>>> = opts.embedding_grad.then(BTreeMap::new);

    for (r, rf) in fwd.reviews.iter().enumerate() {
        let width = rf.map.width;
        // dL/dz for this review's activation map
        let mut dz = vec![0.0; nf * width];
        for f in 0..nf {
            dz[f * width + rf.argmax[f]] += pooled_grads[r][f];
            if entropy_scale != 0.0 {
                for (t, g) in fwd.entropy_grads[r][f]
                    .iter()
                    .enumerate()
                    .take(rf.row_width)
                {
                    dz[f * width + t] += entropy_scale * g;
                }
            }
        }
        if opts.activation != Activation::Identity {
            for (d, z) in dz.iter_mut().zip(&rf.map.values) {
                *d *= opts.activation.derivative_from_output(*z);
            }
        }
        if dz.iter().all(|&d| d == 0.0) {
            continue;
        }
        let review = &batch.reviews[r];
        let x = ReviewMatrix::gather(review.tokens, review.true_length, params.embeddings, dim);
        let mut dx = emb_grads.as_ref().map(|_| vec![0.0; x.data.len()]);
        for f in 0..nf {
            let w = filters.filter(f);
            let dw = &mut d_weights[f * span..(f + 1) * span];
            for t in 0..width {
                let d = dz[f * width + t];
                if d == 0.0 {
                    continue;
                }
                d_bias[f] += d;
                let xs = &x.data[t * dim..t * dim + span];
                for (g, xv) in dw.iter_mut().zip(xs) {
                    *g += d * xv;
                }
                if let Some(dx) = dx.as_mut() {
                    for (g, wv) in dx[t * dim..t * dim + span].iter_mut().zip(w) {
                        *g += d * wv;
                    }
                }
            }
        }
        if let (Some(dx), Some(acc)) = (dx, emb_grads.as_mut()) {
            for (p, &tok) in review.tokens.iter().enumerate() {
                if tok == crate::corpus::PAD {
                    continue;
                }
                let row = acc.entry(tok).or_insert_with(|| vec![0.0; dim]);
                for (g, v) in row.iter_mut().zip(&dx[p * dim..(p + 1) * dim]) {
                    *g += v;
                }
            }
        }
    }

    let grads = Gradients {
        user_factors: user_grads,
        filter_weights: d_weights,
        filter_bias: d_bias,
        embeddings: emb_grads,
    };
    grads.ensure_finite()?;
    Ok((fwd.breakdown, grads))
}

impl Gradients {
    fn ensure_finite(&self) -> Result<(), NumericsError> {
        if self.user_factors.values().flatten().any(|v| !v.is_finite()) {
            return Err(NumericsError::NonFiniteGradient("user_factors"));
        }
        if self.filter_weights.iter().any(|v| !v.is_finite()) {
            return Err(NumericsError::NonFiniteGradient("filter_weights"));
        }
        if self.filter_bias.iter().any(|v| !v.is_finite()) {
            return Err(NumericsError::NonFiniteGradient("filter_bias"));
        }
        if let Some(e) = &self.embeddings {
            if e.values().flatten().any(|v| !v.is_finite()) {
                return Err(NumericsError::NonFiniteGradient("embeddings"));
            }
        }
        Ok(())
    }
}
