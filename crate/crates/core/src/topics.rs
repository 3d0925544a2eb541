//! Topic keywords per latent factor and their embedding coherence.
//!
//! After training, every training review is run through the filters. Each
//! window activation is split evenly across the words of its window; a
//! word's score for a factor is the mean share it received. The top-k words
//! of a factor form its topic, and the topic's coherence is the mean
//! pairwise cosine similarity of the keywords' pre-trained vectors.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError, ModelState};
use crate::corpus::{Corpus, Vocabulary, PAD};
use crate::embeddings::{cosine_similarity, EmbeddingTable};
use crate::model::{review_embedding, ModelError, ModelParams, TrainReviews};
use crate::numerics::ActivationMap;

#[derive(Debug, Error)]
pub enum TopicError {
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("checkpoint holds a {0} model; topics need a convmf model")]
    WrongModel(&'static str),
    #[error("coherence undefined: {usable} usable keywords (need 2)")]
    UndefinedCoherence { usable: usize },
}

/// Per factor and token: summed activation share and number of windows.
#[derive(Debug, Clone, PartialEq)]
pub struct WordActivationStats {
    n_factors: usize,
    window: usize,
    sums: Vec<f64>,
    counts: Vec<u64>,
}

impl WordActivationStats {
    pub fn new(vocab_size: usize, n_factors: usize, window: usize) -> Self {
        Self {
            n_factors,
            window,
            sums: vec![0.0; vocab_size * n_factors],
            counts: vec![0; vocab_size],
        }
    }

    pub fn n_factors(&self) -> usize {
        self.n_factors
    }

    /// Adds one review: window `t` of factor `f` gives `a[f][t] / w` to each
    /// non-PAD word inside it.
    pub fn add_review(&mut self, tokens: &[u32], true_length: usize, map: &ActivationMap) {
        let w = self.window;
        let share = 1.0 / w as f64;
        for t in 0..map.width {
            for &tok in tokens.iter().take(true_length).skip(t).take(w) {
                if tok == PAD {
                    continue;
                }
                self.counts[tok as usize] += 1;
                for f in 0..self.n_factors {
                    self.sums[tok as usize * self.n_factors + f] +=
                        map.values[f * map.width + t] * share;
                }
            }
        }
    }

    pub fn count(&self, token: u32) -> u64 {
        self.counts.get(token as usize).copied().unwrap_or(0)
    }

    pub fn sum(&self, token: u32, factor: usize) -> f64 {
        self.sums[token as usize * self.n_factors + factor]
    }

    /// Mean activation share, `None` for tokens never seen in a window.
    pub fn mean(&self, token: u32, factor: usize) -> Option<f64> {
        let c = self.count(token);
        (c > 0).then(|| self.sum(token, factor) / c as f64)
    }

    /// Total mass received by all tokens for `factor`.
    pub fn total_mass(&self, factor: usize) -> f64 {
        (0..self.counts.len())
            .map(|t| self.sums[t * self.n_factors + factor])
            .sum()
    }

    pub fn merge(&mut self, other: &Self) {
        assert_eq!(self.sums.len(), other.sums.len());
        self.sums
            .iter_mut()
            .zip(&other.sums)
            .for_each(|(a, b)| *a += b);
        self.counts
            .iter_mut()
            .zip(&other.counts)
            .for_each(|(a, b)| *a += b);
    }
}

/// Sweeps the training reviews with the model's filters.
pub fn accumulate_with_params(
    params: &ModelParams,
    corpus: &Corpus,
    table: &EmbeddingTable,
) -> Result<WordActivationStats, TopicError> {
    let train = TrainReviews::from_corpus(corpus);
    let words = params.word_vectors(table);
    let mut stats = WordActivationStats::new(
        corpus.vocab.len(),
        params.n_factors,
        params.filters().window,
    );
    for review in train.reviews() {
        let (_, map) = review_embedding(review, words, params)?;
        stats.add_review(&review.tokens, review.true_length, &map);
    }
    Ok(stats)
}

pub fn accumulate_word_activations(
    checkpoint: &Checkpoint,
    corpus: &Corpus,
    table: &EmbeddingTable,
) -> Result<WordActivationStats, TopicError> {
    checkpoint.verify_vocab(&corpus.vocab.hash())?;
    match &checkpoint.model {
        ModelState::Convmf(params) => accumulate_with_params(params, corpus, table),
        other => Err(TopicError::WrongModel(other.kind())),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keyword {
    pub token: String,
    pub mean_activation: f64,
    pub count: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeywordOptions {
    pub k: usize,
    pub min_count: u64,
    /// Rank by |mean activation| instead of the signed value.
    pub absolute: bool,
}

impl Default for KeywordOptions {
    fn default() -> Self {
        Self {
            k: 10,
            min_count: 5,
            absolute: false,
        }
    }
}

/// Top-k tokens of a factor by mean activation, ties broken
/// lexicographically. Tokens seen fewer than `min_count` times, PAD and UNK
/// never qualify. May return fewer than k.
pub fn top_k_keywords(
    stats: &WordActivationStats,
    vocab: &Vocabulary,
    factor: usize,
    opts: &KeywordOptions,
) -> Vec<Keyword> {
    let key = |m: f64| if opts.absolute { m.abs() } else { m };
    let mut eligible: Vec<(f64, &str, u32)> = vocab
        .corpus_tokens()
        .filter(|&(ix, _)| stats.count(ix) >= opts.min_count.max(1))
        .filter_map(|(ix, tok)| stats.mean(ix, factor).map(|m| (m, tok, ix)))
        .collect();
    eligible.sort_by(|a, b| key(b.0).total_cmp(&key(a.0)).then_with(|| a.1.cmp(b.1)));
    let picked: Vec<Keyword> = eligible
        .into_iter()
        .take(opts.k)
        .map(|(m, tok, ix)| Keyword {
            token: tok.to_string(),
            mean_activation: m,
            count: stats.count(ix),
        })
        .collect();
    if picked.len() < opts.k {
        log::warn!(
            "factor {factor}: only {} eligible keywords (k = {})",
            picked.len(),
            opts.k
        );
    }
    picked
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coherence {
    pub value: f64,
    pub pairs_used: usize,
    pub pairs_skipped: usize,
}

/// Mean cosine similarity over unordered keyword pairs whose rows are both
/// pre-trained. Keywords missing from the vocabulary count as unusable.
pub fn topic_coherence<S: AsRef<str>>(
    keywords: &[S],
    vocab: &Vocabulary,
    table: &EmbeddingTable,
) -> Result<Coherence, TopicError> {
    let rows: Vec<Option<u32>> = keywords
        .iter()
        .map(|k| vocab.get(k.as_ref()).filter(|&ix| table.is_pretrained(ix)))
        .collect();
    let usable = rows.iter().flatten().count();
    let mut sum = 0.0;
    let mut used = 0usize;
    let mut skipped = 0usize;
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            match (rows[i], rows[j]) {
                (Some(a), Some(b)) => match cosine_similarity(table.row(a), table.row(b)) {
                    Ok(c) => {
                        sum += c;
                        used += 1;
                    }
                    Err(_) => skipped += 1,
                },
                _ => skipped += 1,
            }
        }
    }
    if used == 0 {
        return Err(TopicError::UndefinedCoherence { usable });
    }
    Ok(Coherence {
        value: sum / used as f64,
        pairs_used: used,
        pairs_skipped: skipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorTopic {
    pub index: usize,
    /// `None` when fewer than two keywords have pre-trained vectors.
    pub coherence: Option<f64>,
    pub skipped_pairs: usize,
    pub keywords: Vec<Keyword>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicReport {
    /// Sorted by coherence, descending; excluded factors last by index.
    pub factors: Vec<FactorTopic>,
    /// Mean over factors with defined coherence.
    pub overall_coherence: Option<f64>,
    pub skipped_pairs: usize,
    pub excluded_factors: Vec<usize>,
    pub config: serde_json::Value,
}

impl TopicReport {
    pub fn from_topics(
        topics: Vec<(usize, Vec<Keyword>)>,
        vocab: &Vocabulary,
        table: &EmbeddingTable,
        config: serde_json::Value,
    ) -> Self {
        let mut factors: Vec<FactorTopic> = topics
            .into_iter()
            .map(|(index, keywords)| {
                let tokens: Vec<&str> = keywords.iter().map(|k| k.token.as_str()).collect();
                let (coherence, skipped_pairs) = match topic_coherence(&tokens, vocab, table) {
                    Ok(c) => (Some(c.value), c.pairs_skipped),
                    Err(_) => (None, tokens.len() * tokens.len().saturating_sub(1) / 2),
                };
                FactorTopic {
                    index,
                    coherence,
                    skipped_pairs,
                    keywords,
                }
            })
            .collect();
        factors.sort_by(|a, b| match (a.coherence, b.coherence) {
            (Some(x), Some(y)) => y.total_cmp(&x).then(a.index.cmp(&b.index)),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => a.index.cmp(&b.index),
        });
        let defined: Vec<f64> = factors.iter().filter_map(|f| f.coherence).collect();
        let overall_coherence =
            (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        let excluded_factors = factors
            .iter()
            .filter(|f| f.coherence.is_none())
            .map(|f| f.index)
            .collect();
        Self {
            skipped_pairs: factors.iter().map(|f| f.skipped_pairs).sum(),
            factors,
            overall_coherence,
            excluded_factors,
            config,
        }
    }

    /// Recomputes every coherence against another vector table.
    pub fn rescored(&self, vocab: &Vocabulary, table: &EmbeddingTable) -> Self {
        let topics = self
            .factors
            .iter()
            .map(|f| (f.index, f.keywords.clone()))
            .collect();
        Self::from_topics(topics, vocab, table, self.config.clone())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Keywords for every factor and their coherence.
pub fn export_topic_report(
    stats: &WordActivationStats,
    vocab: &Vocabulary,
    table: &EmbeddingTable,
    opts: &KeywordOptions,
    config: serde_json::Value,
) -> TopicReport {
    let topics = (0..stats.n_factors())
        .map(|f| (f, top_k_keywords(stats, vocab, f, opts)))
        .collect();
    TopicReport::from_topics(topics, vocab, table, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::RowOrigin;

    fn map(rows: &[&[f64]]) -> ActivationMap {
        ActivationMap {
            n_filters: rows.len(),
            width: rows[0].len(),
            values: rows.concat(),
        }
    }

    #[test]
    fn redistribution_hand_trace() {
        // words x y z (ids 2 3 4), w = 2, activations (3, 5)
        let mut s = WordActivationStats::new(5, 1, 2);
        s.add_review(&[2, 3, 4], 3, &map(&[&[3.0, 5.0]]));
        assert_eq!((s.sum(2, 0), s.count(2)), (1.5, 1));
        assert_eq!((s.sum(3, 0), s.count(3)), (4.0, 2));
        assert_eq!((s.sum(4, 0), s.count(4)), (2.5, 1));
        assert_eq!(s.mean(3, 0), Some(2.0));
        assert_eq!(s.total_mass(0), 8.0);
    }

    #[test]
    fn all_pad_review_adds_nothing() {
        let mut s = WordActivationStats::new(4, 1, 2);
        s.add_review(&[0, 0, 0], 0, &map(&[&[1.0, 1.0]]));
        assert!((0..4).all(|t| s.count(t) == 0 && s.mean(t, 0).is_none()));
    }

    #[test]
    fn duplicate_reviews_double_sums_keep_means() {
        let mut one = WordActivationStats::new(5, 2, 2);
        let m = map(&[&[3.0, 5.0], &[-1.0, 2.0]]);
        one.add_review(&[2, 3, 4], 3, &m);
        let mut two = one.clone();
        two.add_review(&[2, 3, 4], 3, &m);
        for t in 2..5 {
            for f in 0..2 {
                assert_eq!(two.sum(t, f), 2.0 * one.sum(t, f));
                assert_eq!(two.mean(t, f), one.mean(t, f));
            }
        }
    }

    fn stats_with_means(vocab: &Vocabulary, means: &[(&str, f64, u64)]) -> WordActivationStats {
        let mut s = WordActivationStats::new(vocab.len(), 1, 1);
        for &(tok, m, c) in means {
            let ix = vocab.get(tok).unwrap() as usize;
            s.counts[ix] = c;
            s.sums[ix] = m * c as f64;
        }
        s
    }

    #[test]
    fn top_k_orders_and_breaks_ties() {
        let vocab = Vocabulary::from_ordered(["a", "b", "c"].map(String::from), 1);
        let s = stats_with_means(&vocab, &[("a", 2.0, 5), ("b", 1.0, 5), ("c", 3.0, 5)]);
        let opts = KeywordOptions {
            k: 2,
            ..Default::default()
        };
        let top: Vec<String> = top_k_keywords(&s, &vocab, 0, &opts)
            .into_iter()
            .map(|k| k.token)
            .collect();
        assert_eq!(top, vec!["c", "a"]);

        let tie = stats_with_means(&vocab, &[("b", 1.0, 5), ("a", 1.0, 5)]);
        let opts = KeywordOptions {
            k: 1,
            ..Default::default()
        };
        assert_eq!(top_k_keywords(&tie, &vocab, 0, &opts)[0].token, "a");
    }

    #[test]
    fn count_floor_excludes_rare_tokens() {
        let vocab = Vocabulary::from_ordered(["a", "b"].map(String::from), 1);
        let s = stats_with_means(&vocab, &[("a", 100.0, 3), ("b", 1.0, 5)]);
        let top = top_k_keywords(&s, &vocab, 0, &KeywordOptions::default());
        assert_eq!(top.len(), 1);
        assert_eq!(top[0].token, "b");
    }

    #[test]
    fn absolute_ranking_flag() {
        let vocab = Vocabulary::from_ordered(["a", "b"].map(String::from), 1);
        let s = stats_with_means(&vocab, &[("a", -4.0, 5), ("b", 1.0, 5)]);
        let abs = KeywordOptions {
            k: 1,
            absolute: true,
            ..Default::default()
        };
        assert_eq!(top_k_keywords(&s, &vocab, 0, &abs)[0].token, "a");
        let signed = KeywordOptions {
            k: 1,
            ..Default::default()
        };
        assert_eq!(top_k_keywords(&s, &vocab, 0, &signed)[0].token, "b");
    }

    fn table_for(vocab: &Vocabulary, rows: &[(&str, Vec<f64>)], dim: usize) -> EmbeddingTable {
        let mut data = vec![0.0; vocab.len() * dim];
        let mut origin = vec![RowOrigin::Initialized; vocab.len()];
        for (tok, v) in rows {
            let ix = vocab.get(tok).unwrap() as usize;
            data[ix * dim..(ix + 1) * dim].copy_from_slice(v);
            origin[ix] = RowOrigin::Pretrained;
        }
        EmbeddingTable::from_rows(dim, data, origin, "t")
    }

    #[test]
    fn coherence_cases() {
        let vocab = Vocabulary::from_ordered(["a", "b", "c", "d"].map(String::from), 1);
        let table = table_for(
            &vocab,
            &[
                ("a", vec![1.0, 2.0]),
                ("b", vec![2.0, 4.0]),
                ("c", vec![1.0, 0.0]),
            ],
            2,
        );
        assert!((topic_coherence(&["a", "b"], &vocab, &table).unwrap().value - 1.0).abs() < 1e-12);
        let two = topic_coherence(&["a", "c"], &vocab, &table).unwrap();
        assert!((two.value - 1.0 / 5f64.sqrt()).abs() < 1e-12);
        // "d" is not pre-trained: its pairs are skipped
        let with_d = topic_coherence(&["a", "b", "d"], &vocab, &table).unwrap();
        assert_eq!((with_d.pairs_used, with_d.pairs_skipped), (1, 2));
        assert!(matches!(
            topic_coherence(&["a", "d"], &vocab, &table),
            Err(TopicError::UndefinedCoherence { usable: 1 })
        ));
    }

    #[test]
    fn coherence_of_three_known_cosines() {
        // unit vectors with pairwise cosines 0.2, 0.4, 0.6 (Cholesky of the Gram matrix)
        let g = [[1.0, 0.2, 0.4], [0.2, 1.0, 0.6], [0.4, 0.6, 1.0]];
        let mut l = [[0.0f64; 3]; 3];
        for i in 0..3 {
            for j in 0..=i {
                let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
                l[i][j] = if i == j {
                    (g[i][i] - s).sqrt()
                } else {
                    (g[i][j] - s) / l[j][j]
                };
            }
        }
        let vocab = Vocabulary::from_ordered(["a", "b", "c"].map(String::from), 1);
        let table = table_for(
            &vocab,
            &[
                ("a", l[0].to_vec()),
                ("b", l[1].to_vec()),
                ("c", l[2].to_vec()),
            ],
            3,
        );
        let c = topic_coherence(&["a", "b", "c"], &vocab, &table).unwrap();
        assert!((c.value - 0.4).abs() < 1e-12);
    }

    #[test]
    fn report_sorting_and_exclusion() {
        let vocab = Vocabulary::from_ordered(["a", "b", "c", "d"].map(String::from), 1);
        let table = table_for(
            &vocab,
            &[
                ("a", vec![1.0, 0.0]),
                ("b", vec![1.0, 0.1]),
                ("c", vec![0.0, 1.0]),
            ],
            2,
        );
        let kw = |t: &str| Keyword {
            token: t.into(),
            mean_activation: 1.0,
            count: 5,
        };
        let report = TopicReport::from_topics(
            vec![
                (0, vec![kw("a"), kw("c")]),
                (1, vec![kw("a"), kw("b")]),
                (2, vec![kw("d"), kw("a")]),
            ],
            &vocab,
            &table,
            serde_json::Value::Null,
        );
        let order: Vec<usize> = report.factors.iter().map(|f| f.index).collect();
        assert_eq!(order, vec![1, 0, 2]);
        assert_eq!(report.excluded_factors, vec![2]);
        let expected = (report.factors[0].coherence.unwrap() + 0.0) / 2.0;
        assert!((report.overall_coherence.unwrap() - expected).abs() < 1e-12);

        let single = TopicReport::from_topics(
            vec![(0, vec![kw("a"), kw("b")])],
            &vocab,
            &table,
            serde_json::Value::Null,
        );
        assert_eq!(single.factors.len(), 1);
        assert_eq!(single.overall_coherence, single.factors[0].coherence);
    }
}
