//! Review corpora with planted structure, written in the same formats as
//! the real inputs (Amazon review JSON lines and GloVe text vectors).
//!
//! Words are grouped into topics whose vectors cluster around a topic
//! center; filler words point in random directions. Each item has a main
//! and a secondary topic, each user a preference per topic, and a rating is
//! `base + scale·(pref·aspect) + noise`, rounded and clipped to 1..=5.
//! Review text for an item mixes filler with words of its topics, so the
//! text carries the information that ratings alone only reveal slowly.

use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, CorpusConfig, CorpusError, RawReview, StopWords};
use crate::embeddings::{read_embedding_table, write_glove, EmbeddingError, EmbeddingTable};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_users: usize,
    pub n_items: usize,
    pub n_topics: usize,
    pub words_per_topic: usize,
    pub n_filler: usize,
    pub dim: usize,
    /// Average ratings per user.
    pub ratings_per_user: usize,
    /// Share of review words drawn from the item's topics.
    pub topic_rate: f64,
    /// Spread of topic words around their center (center has unit norm).
    pub word_noise: f64,
    pub min_words: usize,
    pub max_words: usize,
    pub base_rating: f64,
    pub signal_scale: f64,
    pub rating_noise: f64,
    /// Share of filler words left out of the vectors file.
    pub oov_rate: f64,
    /// Zipf exponent of filler word frequencies (0 for uniform).
    pub filler_zipf: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_users: 400,
            n_items: 600,
            n_topics: 6,
            words_per_topic: 30,
            n_filler: 300,
            dim: 16,
            ratings_per_user: 12,
            topic_rate: 0.12,
            word_noise: 0.15,
            min_words: 20,
            max_words: 80,
            base_rating: 3.0,
            signal_scale: 0.8,
            rating_noise: 0.3,
            oov_rate: 0.05,
            filler_zipf: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub records: Vec<RawReview>,
    /// (word, vector) rows for the vectors file.
    pub vectors: Vec<(String, Vec<f64>)>,
    /// Words of each planted topic.
    pub topics: Vec<Vec<String>>,
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

/// Distinct lowercase pseudo-word for `index` (three or more syllables).
pub fn pseudo_word(mut index: usize) -> String {
    let base = CONSONANTS.len() * VOWELS.len();
    let mut out = String::new();
    for _ in 0..3 {
        let s = index % base;
        index /= base;
        out.push(CONSONANTS[s / VOWELS.len()] as char);
        out.push(VOWELS[s % VOWELS.len()] as char);
    }
    while index > 0 {
        let s = index % base;
        index /= base;
        out.push(CONSONANTS[s / VOWELS.len()] as char);
        out.push(VOWELS[s % VOWELS.len()] as char);
    }
    out
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let n = Normal::new(0.0, 1.0).expect("valid normal");
    let v: Vec<f64> = (0..dim).map(|_| n.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

pub fn generate(spec: &SyntheticSpec, seed: u64) -> SyntheticData {
    assert!(spec.n_topics >= 2 && spec.words_per_topic >= 1 && spec.n_filler >= 1);
    assert!(spec.min_words >= 1 && spec.min_words <= spec.max_words);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = Normal::new(0.0, 1.0).expect("valid normal");

    let mut next_word = 0usize;
    let mut fresh = || {
        next_word += 1;
        pseudo_word(next_word * 7919 % 1_000_003)
    };
    let mut vectors = Vec::new();
    let mut topics = Vec::with_capacity(spec.n_topics);
    for _ in 0..spec.n_topics {
        let center = unit_gaussian(&mut rng, spec.dim);
        let mut words = Vec::with_capacity(spec.words_per_topic);
        for _ in 0..spec.words_per_topic {
            let w = fresh();
            let v: Vec<f64> = center
                .iter()
                .map(|c| c + spec.word_noise * std.sample(&mut rng))
                .collect();
            vectors.push((w.clone(), v));
            words.push(w);
        }
        topics.push(words);
    }
    let mut filler = Vec::with_capacity(spec.n_filler);
    for _ in 0..spec.n_filler {
        let w = fresh();
        let v = unit_gaussian(&mut rng, spec.dim);
        if !rng.gen_bool(spec.oov_rate) {
            vectors.push((w.clone(), v));
        }
        filler.push(w);
    }

    let filler_weights: Vec<f64> = (0..filler.len())
        .map(|j| (1.0 + j as f64).powf(-spec.filler_zipf))
        .collect();
    let filler_dist =
        rand::distributions::WeightedIndex::new(&filler_weights).expect("positive weights");

    // items: main and secondary topic
    let aspects: Vec<Vec<f64>> = (0..spec.n_items)
        .map(|_| {
            let mut a = vec![0.0; spec.n_topics];
            let main = rng.gen_range(0..spec.n_topics);
            let mut second = rng.gen_range(0..spec.n_topics - 1);
            if second >= main {
                second += 1;
            }
            a[main] = 1.0;
            a[second] = 0.4;
            a
        })
        .collect();
    let prefs: Vec<Vec<f64>> = (0..spec.n_users)
        .map(|_| (0..spec.n_topics).map(|_| std.sample(&mut rng)).collect())
        .collect();
    // Zipf-like item popularity so some items are rating-poor
    let weights: Vec<f64> = (0..spec.n_items)
        .map(|i| 1.0 / (1.0 + i as f64).powf(0.6))
        .collect();
    let popularity = rand::distributions::WeightedIndex::new(&weights).expect("positive weights");
    let noise = Normal::new(0.0, spec.rating_noise.max(1e-12)).expect("valid normal");

    let user_id = |u: usize| format!("U{u:05}");
    let item_id = |i: usize| format!("B{i:07}");
    let mut records = Vec::new();
    for (u, pref) in prefs.iter().enumerate() {
        let n = rng
            .gen_range(spec.ratings_per_user / 2..=spec.ratings_per_user * 3 / 2)
            .max(1);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..n {
            let i = popularity.sample(&mut rng);
            if !seen.insert(i) {
                continue;
            }
            let a = &aspects[i];
            let score: f64 = pref.iter().zip(a).map(|(p, x)| p * x).sum();
            let raw = spec.base_rating + spec.signal_scale * score + noise.sample(&mut rng);
            let rating = raw.round().clamp(1.0, 5.0);

            let len = rng.gen_range(spec.min_words..=spec.max_words);
            let total: f64 = a.iter().sum();
            let mut text = Vec::with_capacity(len);
            for k in 0..len {
                let word = if rng.gen_bool(spec.topic_rate) {
                    let mut pick = rng.gen_range(0.0..total);
                    let mut t = 0;
                    while pick >= a[t] {
                        pick -= a[t];
                        t += 1;
                    }
                    &topics[t][rng.gen_range(0..spec.words_per_topic)]
                } else {
                    &filler[filler_dist.sample(&mut rng)]
                };
                text.push(if k % 9 == 8 {
                    format!("{word}.")
                } else {
                    word.clone()
                });
            }
            records.push(RawReview {
                user_id: user_id(u),
                item_id: item_id(i),
                rating,
                text: text.join(" "),
            });
        }
    }
    SyntheticData {
        records,
        vectors,
        topics,
    }
}

impl SyntheticData {
    /// Preprocessed corpus and its vector table, as the file pipeline would build them.
    pub fn build(
        &self,
        config: &CorpusConfig,
        embedding_seed: u64,
    ) -> Result<(Corpus, EmbeddingTable), SyntheticError> {
        let corpus = Corpus::build(&self.records, &StopWords::english(), config)?;
        let mut buf = Vec::new();
        write_vectors(self, &mut buf)?;
        let table =
            read_embedding_table(buf.as_slice(), &corpus.vocab, embedding_seed, "synthetic")?;
        Ok((corpus, table))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SyntheticError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Embeddings(#[from] EmbeddingError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Amazon review JSON lines.
pub fn write_reviews_jsonl<W: Write>(records: &[RawReview], mut w: W) -> io::Result<()> {
    for r in records {
        let line = serde_json::json!({
            "reviewerID": r.user_id,
            "asin": r.item_id,
            "overall": r.rating,
            "reviewText": r.text,
        });
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn write_vectors<W: Write>(data: &SyntheticData, w: W) -> io::Result<()> {
    write_glove(
        w,
        data.vectors.iter().map(|(t, v)| (t.as_str(), v.as_slice())),
    )
}
