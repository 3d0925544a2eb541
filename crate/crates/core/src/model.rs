//! The ConvMF rating model.
//!
//! An item's vector is the mean, over its *training* reviews, of the
//! per-filter max-pooled convolution activations. Users get a learned factor
//! matrix. A rating is predicted as `μ + u·v`.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, TokenizedReview};
use crate::embeddings::EmbeddingTable;
use crate::numerics::{
    self, conv1d_valid, max_pool, Activation, ActivationMap, Batch, FilterBank, Gradients,
    GraphOptions, GraphParams, LossBreakdown, NumericsError, Observation, ReviewMatrix, ReviewRef,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("item embedding cache is stale for the current filters")]
    StaleCache,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("model shape mismatch: {0}")]
    Shape(String),
}

static NEXT_STAMP: AtomicU64 = AtomicU64::new(1);

fn fresh_stamp() -> u64 {
    NEXT_STAMP.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_factors: usize,
    pub window: usize,
    pub activation: Activation,
    pub freeze_embeddings: bool,
    /// Predict `μ + u·v` with μ the training mean; otherwise μ = 0.
    pub center: bool,
    /// Half-width of the uniform initializer for users and filters.
    pub init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_factors: 8,
            window: 5,
            activation: Activation::Identity,
            freeze_embeddings: true,
            center: true,
            init_scale: 0.1,
        }
    }
}

/// Learned state of a ConvMF model.
///
/// Filters and fine-tuned word vectors sit behind accessors: every mutable
/// borrow gets a new stamp so [`ItemEmbeddingCache`] can detect staleness.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelParams {
    pub n_users: usize,
    pub n_factors: usize,
    pub user_factors: Vec<f64>,
    filters: FilterBank,
    pub global_mean: f64,
    pub activation: Activation,
    tuned_embeddings: Option<Vec<f64>>,
    #[serde(skip, default = "fresh_stamp")]
    stamp: u64,
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.n_users == other.n_users
            && self.n_factors == other.n_factors
            && self.user_factors == other.user_factors
            && self.filters == other.filters
            && self.global_mean == other.global_mean
            && self.activation == other.activation
            && self.tuned_embeddings == other.tuned_embeddings
    }
}

impl ModelParams {
    /// Users and filter weights uniform in `±init_scale`, zero biases.
    pub fn init(
        n_users: usize,
        dim: usize,
        global_mean: f64,
        config: &ModelConfig,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = config.init_scale;
        let user_factors = (0..n_users * config.n_factors)
            .map(|_| rng.gen_range(-s..=s))
            .collect();
        let filters = FilterBank::uniform(config.n_factors, config.window, dim, s, &mut rng);
        Self::from_parts(
            user_factors,
            filters,
            if config.center { global_mean } else { 0.0 },
            config.activation,
            None,
        )
    }

    pub fn from_parts(
        user_factors: Vec<f64>,
        filters: FilterBank,
        global_mean: f64,
        activation: Activation,
        tuned_embeddings: Option<Vec<f64>>,
    ) -> Self {
        let n_factors = filters.n_filters;
        assert!(n_factors >= 1, "at least one latent factor");
        assert_eq!(user_factors.len() % n_factors, 0, "user factor shape");
        Self {
            n_users: user_factors.len() / n_factors,
            n_factors,
            user_factors,
            filters,
            global_mean,
            activation,
            tuned_embeddings,
            stamp: fresh_stamp(),
        }
    }

    pub fn filters(&self) -> &FilterBank {
        &self.filters
    }

    pub fn filters_mut(&mut self) -> &mut FilterBank {
        self.stamp = fresh_stamp();
        &mut self.filters
    }

    pub fn tuned_embeddings(&self) -> Option<&[f64]> {
        self.tuned_embeddings.as_deref()
    }

    pub fn tuned_embeddings_mut(&mut self) -> Option<&mut Vec<f64>> {
        self.stamp = fresh_stamp();
        self.tuned_embeddings.as_mut()
    }

    /// Starts fine-tuning word vectors from `table`.
    pub fn unfreeze_embeddings(&mut self, table: &EmbeddingTable) {
        self.stamp = fresh_stamp();
        self.tuned_embeddings = Some(table.as_slice().to_vec());
    }

    pub fn stamp(&self) -> u64 {
        self.stamp
    }

    /// Word vectors the model reads: fine-tuned copy if present, else `table`.
    pub fn word_vectors<'a>(&'a self, table: &'a EmbeddingTable) -> &'a [f64] {
        self.tuned_embeddings.as_deref().unwrap_or(table.as_slice())
    }

    pub fn user(&self, user: usize) -> Option<&[f64]> {
        (user < self.n_users)
            .then(|| &self.user_factors[user * self.n_factors..(user + 1) * self.n_factors])
    }

    pub fn is_finite(&self) -> bool {
        self.global_mean.is_finite()
            && self.user_factors.iter().all(|v| v.is_finite())
            && self.filters.is_finite()
            && self
                .tuned_embeddings
                .iter()
                .flatten()
                .all(|v| v.is_finite())
    }
}

/// Training-split reviews grouped by item. This is the only review source
/// for item vectors and topic extraction.
#[derive(Debug, Clone)]
pub struct TrainReviews<'a> {
    reviews: &'a [TokenizedReview],
    by_item: Vec<Vec<usize>>,
}

impl<'a> TrainReviews<'a> {
    pub fn from_corpus(corpus: &'a Corpus) -> Self {
        Self::new(&corpus.train, corpus.n_items())
    }

    pub fn new(reviews: &'a [TokenizedReview], n_items: usize) -> Self {
        let mut by_item = vec![Vec::new(); n_items];
        for (i, r) in reviews.iter().enumerate() {
            by_item[r.item as usize].push(i);
        }
        Self { reviews, by_item }
    }

    pub fn reviews(&self) -> &'a [TokenizedReview] {
        self.reviews
    }

    pub fn n_items(&self) -> usize {
        self.by_item.len()
    }

    pub fn for_item(&self, item: usize) -> &[usize] {
        self.by_item.get(item).map_or(&[], Vec::as_slice)
    }

    pub fn review(&self, index: usize) -> &'a TokenizedReview {
        &self.reviews[index]
    }

    /// Items with at least one training review, ascending.
    pub fn items_with_reviews(&self) -> Vec<u32> {
        (0..self.by_item.len())
            .filter(|&i| !self.by_item[i].is_empty())
            .map(|i| i as u32)
            .collect()
    }
}

/// Pooled per-filter embedding of one review, plus its activation map.
pub fn review_embedding(
    review: &TokenizedReview,
    word_vectors: &[f64],
    params: &ModelParams,
) -> Result<(Vec<f64>, ActivationMap), ModelError> {
    let filters = params.filters();
    let x = ReviewMatrix::gather(
        &review.tokens,
        review.true_length,
        word_vectors,
        filters.dim,
    );
    let mut map = conv1d_valid(&x, filters)?;
    params.activation.apply(&mut map);
    let pooled = (0..filters.n_filters)
        .map(|f| max_pool(map.row(f)).0)
        .collect();
    Ok((pooled, map))
}

/// Mean pooled embedding over the item's training reviews; zero when it has none.
pub fn item_embedding(
    item: usize,
    train: &TrainReviews<'_>,
    word_vectors: &[f64],
    params: &ModelParams,
) -> Result<Vec<f64>, ModelError> {
    let members = train.for_item(item);
    let mut acc = vec![0.0; params.n_factors];
    for &r in members {
        let (e, _) = review_embedding(train.review(r), word_vectors, params)?;
        acc.iter_mut().zip(&e).for_each(|(a, x)| *a += x);
    }
    if !members.is_empty() {
        let n = members.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
    }
    Ok(acc)
}

/// Item vectors for every item, tied to the filter state they were built from.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemEmbeddingCache {
    vectors: Vec<Option<Vec<f64>>>,
    review_counts: Vec<usize>,
    stamp: u64,
}

impl ItemEmbeddingCache {
    pub fn build(
        params: &ModelParams,
        train: &TrainReviews<'_>,
        table: &EmbeddingTable,
    ) -> Result<Self, ModelError> {
        let words = params.word_vectors(table);
        let mut vectors = Vec::with_capacity(train.n_items());
        let mut review_counts = Vec::with_capacity(train.n_items());
        for item in 0..train.n_items() {
            let n = train.for_item(item).len();
            review_counts.push(n);
            vectors.push(if n == 0 {
                None
            } else {
                Some(item_embedding(item, train, words, params)?)
            });
        }
        Ok(Self {
            vectors,
            review_counts,
            stamp: params.stamp(),
        })
    }

    pub fn get(&self, item: usize) -> Option<&[f64]> {
        self.vectors.get(item).and_then(|v| v.as_deref())
    }

    pub fn review_count(&self, item: usize) -> usize {
        self.review_counts.get(item).copied().unwrap_or(0)
    }

    pub fn is_fresh_for(&self, params: &ModelParams) -> bool {
        self.stamp == params.stamp()
    }
}

/// `μ + u·v`, unclamped. Unknown users and cold items contribute zero.
pub fn predict_rating(
    user: usize,
    item: usize,
    params: &ModelParams,
    cache: &ItemEmbeddingCache,
) -> Result<f64, ModelError> {
    if !cache.is_fresh_for(params) {
        return Err(ModelError::StaleCache);
    }
    let dot = match (params.user(user), cache.get(item)) {
        (Some(u), Some(v)) => u.iter().zip(v).map(|(a, b)| a * b).sum(),
        _ => 0.0,
    };
    Ok(params.global_mean + dot)
}

/// Items of one mini-batch and the training reviews each contributes to
/// its item vector and to the entropy term.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan {
    pub items: Vec<u32>,
    pub reviews: Vec<Vec<usize>>,
}

impl BatchPlan {
    /// Every training review of each item.
    pub fn all_reviews(items: &[u32], train: &TrainReviews<'_>) -> Self {
        Self {
            items: items.to_vec(),
            reviews: items
                .iter()
                .map(|&i| train.for_item(i as usize).to_vec())
                .collect(),
        }
    }

    /// At most `cap` reviews per item, drawn without replacement.
    pub fn capped<R: Rng>(
        items: &[u32],
        train: &TrainReviews<'_>,
        cap: usize,
        rng: &mut R,
    ) -> Self {
        let reviews = items
            .iter()
            .map(|&i| {
                let all = train.for_item(i as usize);
                if all.len() <= cap {
                    all.to_vec()
                } else {
                    let mut picked = rand::seq::index::sample(rng, all.len(), cap).into_vec();
                    picked.sort_unstable();
                    picked.into_iter().map(|k| all[k]).collect()
                }
            })
            .collect();
        Self {
            items: items.to_vec(),
            reviews,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossOptions {
    pub lambda: f64,
    pub mask_pad: bool,
}

/// Batch loss over the items' training ratings with item vectors computed
/// fresh from the planned reviews, and gradients for every parameter block.
/// `N` in the entropy mean counts all planned reviews of all batch items.
pub fn model_batch_loss(
    plan: &BatchPlan,
    train: &TrainReviews<'_>,
    table: &EmbeddingTable,
    params: &ModelParams,
    opts: LossOptions,
) -> Result<(LossBreakdown, Gradients), ModelError> {
    let mut batch = Batch::default();
    for (slot, (&item, members)) in plan.items.iter().zip(&plan.reviews).enumerate() {
        let mut group = Vec::with_capacity(members.len());
        for &r in members {
            let review = train.review(r);
            group.push(batch.reviews.len());
            batch.reviews.push(ReviewRef {
                tokens: &review.tokens,
                true_length: review.true_length,
            });
        }
        batch.groups.push(group);
        for &r in train.for_item(item as usize) {
            let review = train.review(r);
            batch.observations.push(Observation {
                user: review.user as usize,
                group: slot,
                rating: review.rating,
            });
        }
    }
    let graph = GraphParams {
        embeddings: params.word_vectors(table),
        dim: table.dim(),
        user_factors: &params.user_factors,
        n_factors: params.n_factors,
        filters: params.filters(),
        global_mean: params.global_mean,
    };
    let options = GraphOptions {
        lambda: opts.lambda,
        mask_pad: opts.mask_pad,
        activation: params.activation,
        embedding_grad: params.tuned_embeddings().is_some(),
    };
    Ok(numerics::loss_and_gradients(&batch, &graph, &options)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Vocabulary, PAD};
    use crate::embeddings::RowOrigin;

    fn table_1d(values: &[f64]) -> EmbeddingTable {
        // row 0 PAD, row 1 UNK, then one row per value
        let mut data = vec![0.0, 0.0];
        data.extend_from_slice(values);
        let origin = vec![RowOrigin::Pretrained; data.len()];
        EmbeddingTable::from_rows(1, data, origin, "test")
    }

    fn review(user: u32, item: u32, rating: f64, tokens: &[u32], len: usize) -> TokenizedReview {
        let mut t = tokens.to_vec();
        t.resize(len, PAD);
        TokenizedReview {
            user,
            item,
            rating,
            tokens: t,
            true_length: tokens.len(),
        }
    }

    fn sum_filter(n_users: usize, mu: f64) -> ModelParams {
        let bank = FilterBank {
            n_filters: 1,
            window: 2,
            dim: 1,
            weights: vec![1.0, 1.0],
            bias: vec![0.0],
        };
        ModelParams::from_parts(vec![1.0; n_users], bank, mu, Activation::Identity, None)
    }

    #[test]
    fn review_embedding_matches_conv_example() {
        // word values 1, 2, 3 → windows (3, 5) → pooled 5
        let table = table_1d(&[1.0, 2.0, 3.0]);
        let params = sum_filter(1, 0.0);
        let r = review(0, 0, 4.0, &[2, 3, 4], 3);
        let (e, map) = review_embedding(&r, table.as_slice(), &params).unwrap();
        assert_eq!(e, vec![5.0]);
        assert_eq!(map.values, vec![3.0, 5.0]);
    }

    #[test]
    fn zero_filters_give_zero_embedding() {
        let table = table_1d(&[1.0, 2.0, 3.0]);
        let params = ModelParams::from_parts(
            vec![0.0],
            FilterBank::zeros(1, 2, 1),
            0.0,
            Activation::Identity,
            None,
        );
        let r = review(0, 0, 4.0, &[2, 3, 4], 3);
        assert_eq!(
            review_embedding(&r, table.as_slice(), &params).unwrap().0,
            vec![0.0]
        );
    }

    #[test]
    fn item_embedding_is_mean_and_cold_items_fall_back() {
        let table = table_1d(&[0.5, 1.0, 1.5, 2.0, 2.5]);
        let params = sum_filter(2, 4.2);
        // single windows: 0.5 + 1.0 = 1.5 and 2.0 + 2.5 = 4.5
        let reviews = vec![
            review(0, 0, 4.0, &[2, 3], 2),
            review(1, 0, 5.0, &[5, 6], 2),
            review(0, 1, 3.0, &[4, 4], 2),
        ];
        let train = TrainReviews::new(&reviews, 3);
        let v0 = item_embedding(0, &train, table.as_slice(), &params).unwrap();
        assert_eq!(v0, vec![3.0]);
        let v1 = item_embedding(1, &train, table.as_slice(), &params).unwrap();
        assert_eq!(v1, vec![3.0]); // single review: itself
        assert_eq!(
            item_embedding(2, &train, table.as_slice(), &params).unwrap(),
            vec![0.0]
        );

        let cache = ItemEmbeddingCache::build(&params, &train, &table).unwrap();
        for user in 0..3 {
            assert_eq!(predict_rating(user, 2, &params, &cache).unwrap(), 4.2);
        }
        assert_eq!(predict_rating(0, 0, &params, &cache).unwrap(), 4.2 + 3.0);
        // unknown user
        assert_eq!(predict_rating(99, 0, &params, &cache).unwrap(), 4.2);
    }

    #[test]
    fn dot_product_prediction_and_zero_users() {
        let table = table_1d(&[3.0, 7.0]);
        let bank = FilterBank {
            n_filters: 2,
            window: 1,
            dim: 1,
            weights: vec![1.0, 0.0],
            bias: vec![0.0, 7.0],
        };
        // filter 0 picks word value (3), filter 1 is the constant 7
        let params = ModelParams::from_parts(vec![1.0, 0.0], bank, 0.0, Activation::Identity, None);
        let reviews = vec![review(0, 0, 3.0, &[2], 1)];
        let train = TrainReviews::new(&reviews, 1);
        let cache = ItemEmbeddingCache::build(&params, &train, &table).unwrap();
        assert_eq!(cache.get(0).unwrap(), &[3.0, 7.0]);
        assert_eq!(predict_rating(0, 0, &params, &cache).unwrap(), 3.0);

        let zero_users = ModelParams::from_parts(
            vec![0.0, 0.0],
            params.filters().clone(),
            3.9,
            Activation::Identity,
            None,
        );
        let cache = ItemEmbeddingCache::build(&zero_users, &train, &table).unwrap();
        assert_eq!(predict_rating(0, 0, &zero_users, &cache).unwrap(), 3.9);
    }

    #[test]
    fn stale_cache_is_refused() {
        let table = table_1d(&[1.0, 2.0]);
        let mut params = sum_filter(1, 0.0);
        let reviews = vec![review(0, 0, 3.0, &[2, 3], 2)];
        let train = TrainReviews::new(&reviews, 1);
        let cache = ItemEmbeddingCache::build(&params, &train, &table).unwrap();
        params.filters_mut().bias[0] = 1.0;
        assert!(matches!(
            predict_rating(0, 0, &params, &cache),
            Err(ModelError::StaleCache)
        ));
        // user factors are not part of the cached state
        let cache = ItemEmbeddingCache::build(&params, &train, &table).unwrap();
        params.user_factors[0] = 2.0;
        assert!(predict_rating(0, 0, &params, &cache).is_ok());
    }

    #[test]
    fn rebuilt_cache_is_bit_identical() {
        let table = table_1d(&[0.1, -0.7, 0.3]);
        let params = ModelParams::init(
            3,
            1,
            3.5,
            &ModelConfig {
                window: 2,
                n_factors: 3,
                ..Default::default()
            },
            9,
        );
        let reviews = vec![
            review(0, 0, 3.0, &[2, 3, 4], 6),
            review(1, 0, 4.0, &[4, 2], 6),
            review(2, 1, 5.0, &[3], 6),
        ];
        let train = TrainReviews::new(&reviews, 2);
        let a = ItemEmbeddingCache::build(&params, &train, &table).unwrap();
        let b = ItemEmbeddingCache::build(&params, &train, &table).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn batch_loss_counts_all_reviews_for_entropy() {
        let vocab = Vocabulary::from_ordered(["a", "b", "c"].map(String::from), 1);
        let data: Vec<f64> = (0..vocab.len() * 2)
            .map(|i| (i as f64 * 0.37).sin())
            .collect();
        let table =
            EmbeddingTable::from_rows(2, data, vec![RowOrigin::Pretrained; vocab.len()], "t");
        let cfg = ModelConfig {
            n_factors: 4,
            window: 2,
            ..Default::default()
        };
        let params = ModelParams::init(3, 2, 3.0, &cfg, 1);
        let reviews = vec![
            review(0, 0, 4.0, &[2, 3, 4], 8),
            review(1, 0, 5.0, &[3, 3], 8),
            review(2, 0, 2.0, &[4, 2, 2, 3], 8),
            review(0, 1, 1.0, &[2, 4], 8),
        ];
        let train = TrainReviews::new(&reviews, 2);
        let plan = BatchPlan::all_reviews(&[0, 1], &train);
        let (l0, _) = model_batch_loss(
            &plan,
            &train,
            &table,
            &params,
            LossOptions {
                lambda: 0.0,
                mask_pad: false,
            },
        )
        .unwrap();
        assert_eq!(l0.total, l0.rmse_term);
        assert_eq!((l0.n_reviews, l0.n_factors), (4, 4));
        let (l2, _) = model_batch_loss(
            &plan,
            &train,
            &table,
            &params,
            LossOptions {
                lambda: 2.0,
                mask_pad: false,
            },
        )
        .unwrap();
        assert!(l2.total >= l0.total);
        assert_eq!(l2.entropy_term_bits, l0.entropy_term_bits);
    }

    #[test]
    fn batch_loss_gradients_match_finite_differences() {
        let data: Vec<f64> = (0..6 * 3)
            .map(|i| ((i * 7 % 11) as f64 / 5.0 - 1.0) * if i < 3 { 0.0 } else { 1.0 })
            .collect();
        let table = EmbeddingTable::from_rows(3, data, vec![RowOrigin::Pretrained; 6], "t");
        let cfg = ModelConfig {
            n_factors: 2,
            window: 2,
            init_scale: 0.8,
            ..Default::default()
        };
        let params = ModelParams::init(2, 3, 3.0, &cfg, 5);
        let reviews = vec![
            review(0, 0, 4.0, &[2, 3, 4, 5], 6),
            review(1, 0, 2.0, &[5, 1, 2], 6),
            review(1, 1, 5.0, &[3, 3, 4, 2, 5], 6),
        ];
        let train = TrainReviews::new(&reviews, 2);
        let plan = BatchPlan::all_reviews(&[0, 1], &train);
        let opts = LossOptions {
            lambda: 0.8,
            mask_pad: false,
        };
        let (_, g) = model_batch_loss(&plan, &train, &table, &params, opts).unwrap();
        let h = 1e-5;
        let total = |p: &ModelParams| {
            model_batch_loss(&plan, &train, &table, p, opts)
                .unwrap()
                .0
                .total
        };
        let mut worst = 0.0f64;
        for j in 0..params.filters().weights.len() {
            let mut up = params.clone();
            up.filters_mut().weights[j] += h;
            let mut dn = params.clone();
            dn.filters_mut().weights[j] -= h;
            let fd = (total(&up) - total(&dn)) / (2.0 * h);
            worst = worst.max(
                (fd - g.filter_weights[j]).abs()
                    / 1f64.max(fd.abs()).max(g.filter_weights[j].abs()),
            );
        }
        for u in 0..2 {
            for k in 0..2 {
                let mut up = params.clone();
                up.user_factors[u * 2 + k] += h;
                let mut dn = params.clone();
                dn.user_factors[u * 2 + k] -= h;
                let fd = (total(&up) - total(&dn)) / (2.0 * h);
                let an = g.user_factors.get(&u).map_or(0.0, |v| v[k]);
                worst = worst.max((fd - an).abs() / 1f64.max(fd.abs()).max(an.abs()));
            }
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn item_embedding_permutation_invariant() {
        let table = table_1d(&[0.3, -1.2, 0.8, 2.2]);
        let params = ModelParams::init(
            1,
            1,
            0.0,
            &ModelConfig {
                n_factors: 2,
                window: 2,
                ..Default::default()
            },
            3,
        );
        let a = vec![
            review(0, 0, 3.0, &[2, 3, 4], 5),
            review(0, 0, 3.0, &[5, 2], 5),
            review(0, 0, 3.0, &[4, 4, 5], 5),
        ];
        let mut b = a.clone();
        b.reverse();
        let va = item_embedding(0, &TrainReviews::new(&a, 1), table.as_slice(), &params).unwrap();
        let vb = item_embedding(0, &TrainReviews::new(&b, 1), table.as_slice(), &params).unwrap();
        for (x, y) in va.iter().zip(&vb) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
