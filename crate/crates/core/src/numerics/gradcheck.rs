//! Central finite-difference check of [`loss_and_gradients`] on random
//! small instances.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{
    loss, loss_and_gradients, Activation, Batch, FilterBank, GraphOptions, GraphParams,
    Observation, ReviewRef,
};
use crate::corpus::PAD;

pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckSpec {
    pub n_factors: usize,
    pub dim: usize,
    pub review_len: usize,
    pub window: usize,
    pub n_users: usize,
    pub n_items: usize,
    pub max_reviews_per_item: usize,
    pub vocab_size: usize,
    pub lambda: f64,
    pub mask_pad: bool,
    pub activation: Activation,
    pub freeze_embeddings: bool,
}

impl Default for GradCheckSpec {
    fn default() -> Self {
        Self {
            n_factors: 2,
            dim: 3,
            review_len: 8,
            window: 2,
            n_users: 2,
            n_items: 2,
            max_reviews_per_item: 3,
            vocab_size: 12,
            lambda: 0.0,
            mask_pad: false,
            activation: Activation::Identity,
            freeze_embeddings: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    /// Max relative error per parameter block.
    pub blocks: BTreeMap<String, f64>,
    pub n_checked: usize,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.blocks.values().copied().fold(0.0, f64::max)
    }
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

struct Instance {
    table: Vec<f64>,
    tokens: Vec<Vec<u32>>,
    true_lengths: Vec<usize>,
    groups: Vec<Vec<usize>>,
    observations: Vec<Observation>,
    users: Vec<f64>,
    filters: FilterBank,
    global_mean: f64,
}

impl Instance {
    fn random(spec: &GradCheckSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut table: Vec<f64> = (0..spec.vocab_size * spec.dim)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        table[..spec.dim].iter_mut().for_each(|v| *v = 0.0);
        let mut tokens = Vec::new();
        let mut true_lengths = Vec::new();
        let mut groups = Vec::new();
        let mut observations = Vec::new();
        for item in 0..spec.n_items {
            let n = rng.gen_range(1..=spec.max_reviews_per_item.max(1));
            let mut members = Vec::new();
            for _ in 0..n {
                let len = rng.gen_range(spec.window..=spec.review_len);
                let mut t: Vec<u32> = (0..len)
                    .map(|_| rng.gen_range(1..spec.vocab_size as u32))
                    .collect();
                t.resize(spec.review_len, PAD);
                members.push(tokens.len());
                tokens.push(t);
                true_lengths.push(len);
                observations.push(Observation {
                    user: rng.gen_range(0..spec.n_users),
                    group: item,
                    rating: rng.gen_range(1.0..=5.0),
                });
            }
            groups.push(members);
        }
        let users = (0..spec.n_users * spec.n_factors)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let mut filters = FilterBank::uniform(spec.n_factors, spec.window, spec.dim, 1.0, &mut rng);
        filters
            .bias
            .iter_mut()
            .for_each(|b| *b = rng.gen_range(-0.5..0.5));
        let global_mean =
            observations.iter().map(|o| o.rating).sum::<f64>() / observations.len() as f64;
        Self {
            table,
            tokens,
            true_lengths,
            groups,
            observations,
            users,
            filters,
            global_mean,
        }
    }

    fn batch(&self) -> Batch<'_> {
        Batch {
            reviews: self
                .tokens
                .iter()
                .zip(&self.true_lengths)
                .map(|(t, &n)| ReviewRef {
                    tokens: t,
                    true_length: n,
                })
                .collect(),
            groups: self.groups.clone(),
            observations: self.observations.clone(),
        }
    }

    fn total(&self, spec: &GradCheckSpec, opts: &GraphOptions) -> f64 {
        let params = GraphParams {
            embeddings: &self.table,
            dim: spec.dim,
            user_factors: &self.users,
            n_factors: spec.n_factors,
            filters: &self.filters,
            global_mean: self.global_mean,
        };
        loss(&self.batch(), &params, opts)
            .expect("finite loss")
            .total
    }
}

fn central_difference<F>(
    inst: &mut Instance,
    spec: &GradCheckSpec,
    opts: &GraphOptions,
    slot: F,
) -> f64
where
    F: Fn(&mut Instance) -> &mut f64,
{
    let orig = *slot(inst);
    *slot(inst) = orig + FD_STEP;
    let up = inst.total(spec, opts);
    *slot(inst) = orig - FD_STEP;
    let down = inst.total(spec, opts);
    *slot(inst) = orig;
    (up - down) / (2.0 * FD_STEP)
}

/// Compares every analytic gradient entry against a central difference
/// with step `FD_STEP`; reports `|g − ĝ| / max(1, |g|, |ĝ|)` maxima per block.
pub fn gradient_check(spec: &GradCheckSpec, seed: u64) -> GradCheckReport {
    let mut inst = Instance::random(spec, seed);
    let opts = GraphOptions {
        lambda: spec.lambda,
        mask_pad: spec.mask_pad,
        activation: spec.activation,
        embedding_grad: !spec.freeze_embeddings,
    };
    let grads = {
        let params = GraphParams {
            embeddings: &inst.table,
            dim: spec.dim,
            user_factors: &inst.users,
            n_factors: spec.n_factors,
            filters: &inst.filters,
            global_mean: inst.global_mean,
        };
        loss_and_gradients(&inst.batch(), &params, &opts)
            .expect("finite gradients")
            .1
    };

    let mut blocks = BTreeMap::new();
    let mut n_checked = 0;
    let mut record = |name: &str, err: f64| {
        let e = blocks.entry(name.to_string()).or_insert(0.0f64);
        *e = e.max(err);
        n_checked += 1;
    };

    let nf = spec.n_factors;
    for u in 0..spec.n_users {
        for k in 0..nf {
            let g = grads.user_factors.get(&u).map_or(0.0, |v| v[k]);
            let fd = central_difference(&mut inst, spec, &opts, |i| &mut i.users[u * nf + k]);
            record("user_factors", rel_error(g, fd));
        }
    }
    for j in 0..inst.filters.weights.len() {
        let fd = central_difference(&mut inst, spec, &opts, |i| &mut i.filters.weights[j]);
        record("filter_weights", rel_error(grads.filter_weights[j], fd));
    }
    for f in 0..nf {
        let fd = central_difference(&mut inst, spec, &opts, |i| &mut i.filters.bias[f]);
        record("filter_bias", rel_error(grads.filter_bias[f], fd));
    }
    if let Some(emb) = &grads.embeddings {
        for tok in 1..spec.vocab_size as u32 {
            for j in 0..spec.dim {
                let g = emb.get(&tok).map_or(0.0, |v| v[j]);
                let fd = central_difference(&mut inst, spec, &opts, |i| {
                    &mut i.table[tok as usize * spec.dim + j]
                });
                record("embeddings", rel_error(g, fd));
            }
        }
    }
    GradCheckReport { blocks, n_checked }
}
