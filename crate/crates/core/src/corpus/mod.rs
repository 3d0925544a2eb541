//! Review ingestion, text normalization, vocabulary and dataset splits.

mod store;
mod text;
mod vocab;

use std::collections::{HashMap, HashSet};
use std::io::BufRead;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use store::{read_corpus, write_corpus, CORPUS_FORMAT_VERSION};
pub use text::{normalize_and_tokenize, unescape_html, StopWords};
pub use vocab::{Vocabulary, PAD, UNK};

/// Fixed review length used throughout the model.
pub const REVIEW_LEN: usize = 64;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("training corpus is empty")]
    EmptyTrainingCorpus,
    #[error("invalid split ratios: {0}")]
    InvalidRatios(String),
    #[error("malformed corpus data: {0}")]
    Format(String),
    #[error("vocabulary hash mismatch: corpus expects {expected}, vocabulary file has {found}")]
    VocabHashMismatch { expected: String, found: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawReview {
    pub user_id: String,
    pub item_id: String,
    pub rating: f64,
    pub text: String,
}

/// A JSON line that could not be turned into a [`RawReview`].
#[derive(Debug, Clone, PartialEq, Error)]
#[error("line {line}: {message}")]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Default)]
pub struct ParsedRecords {
    pub records: Vec<RawReview>,
    pub errors: Vec<LineError>,
}

fn parse_line(line: &str) -> Result<RawReview, String> {
    let value: serde_json::Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let obj = value.as_object().ok_or("record is not a JSON object")?;
    let string_field = |name: &str| -> Result<String, String> {
        match obj.get(name) {
            Some(serde_json::Value::String(s)) if !s.is_empty() => Ok(s.clone()),
            Some(serde_json::Value::String(_)) => Err(format!("field `{name}` is empty")),
            Some(_) => Err(format!("field `{name}` is not a string")),
            None => Err(format!("missing field `{name}`")),
        }
    };
    let user_id = string_field("reviewerID")?;
    let item_id = string_field("asin")?;
    let rating = match obj.get("overall") {
        Some(v) => v.as_f64().ok_or("field `overall` is not a number")?,
        None => return Err("missing field `overall`".into()),
    };
    if !rating.is_finite() || !(1.0..=5.0).contains(&rating) {
        return Err(format!("rating {rating} outside [1, 5]"));
    }
    let text = match obj.get("reviewText") {
        Some(serde_json::Value::String(s)) => s.clone(),
        Some(serde_json::Value::Null) | None => String::new(),
        Some(_) => return Err("field `reviewText` is not a string".into()),
    };
    Ok(RawReview {
        user_id,
        item_id,
        rating,
        text,
    })
}

/// Parses a JSON-lines review stream. Bad lines are collected as
/// [`LineError`]s (1-based line numbers); only I/O failure aborts.
pub fn parse_review_records<R: BufRead>(input: R) -> Result<ParsedRecords, CorpusError> {
    let mut out = ParsedRecords::default();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(&line) {
            Ok(r) => out.records.push(r),
            Err(message) => out.errors.push(LineError {
                line: i + 1,
                message,
            }),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizedReview {
    pub user: u32,
    pub item: u32,
    pub rating: f64,
    pub tokens: Vec<u32>,
    pub true_length: usize,
}

/// Pads with PAD or keeps the first `target_len` tokens.
pub fn pad_or_truncate(tokens: &[u32], target_len: usize) -> (Vec<u32>, usize) {
    assert!(target_len >= 1, "target length must be positive");
    let true_length = tokens.len().min(target_len);
    let mut out = Vec::with_capacity(target_len);
    out.extend_from_slice(&tokens[..true_length]);
    out.resize(target_len, PAD);
    (out, true_length)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            validation: 0.1,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<(), CorpusError> {
        for (name, r) in [
            ("train", self.train),
            ("validation", self.validation),
            ("test", self.test),
        ] {
            if !(r > 0.0) || !r.is_finite() {
                return Err(CorpusError::InvalidRatios(format!(
                    "{name} ratio {r} must be positive"
                )));
            }
        }
        let sum = self.train + self.validation + self.test;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(CorpusError::InvalidRatios(format!(
                "ratios sum to {sum}, not 1"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub validation: Vec<T>,
    pub test: Vec<T>,
}

/// Seeded shuffle, then cut by ratio. Each part keeps input order.
pub fn split_dataset<T: Clone>(
    records: &[T],
    ratios: SplitRatios,
    seed: u64,
) -> Result<Split<T>, CorpusError> {
    ratios.validate()?;
    let n = records.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64 * ratios.train).round() as usize).min(n);
    let n_val = ((n as f64 * ratios.validation).round() as usize).min(n - n_train);
    let take = |idx: &[usize]| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        idx.into_iter()
            .map(|i| records[i].clone())
            .collect::<Vec<_>>()
    };
    Ok(Split {
        train: take(&order[..n_train]),
        validation: take(&order[n_train..n_train + n_val]),
        test: take(&order[n_train + n_val..]),
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_users: usize,
    pub n_items: usize,
    pub n_reviews: usize,
    pub avg_reviews_per_item: f64,
    pub total_words: u64,
    pub avg_words_per_review: f64,
}

impl CorpusStats {
    /// Two-column table with averages rounded for display.
    pub fn to_table(&self) -> String {
        format!(
            "statistic                       value\n\
             # users                         {}\n\
             # items                         {}\n\
             total # reviews                 {}\n\
             avg. # reviews per item         {:.0}\n\
             total # words                   {}\n\
             avg. number of words per review {:.0}\n",
            self.n_users,
            self.n_items,
            self.n_reviews,
            self.avg_reviews_per_item,
            self.total_words,
            self.avg_words_per_review
        )
    }
}

/// Words are counted on the raw review text, split on whitespace.
pub fn corpus_statistics(records: &[RawReview]) -> CorpusStats {
    let users: HashSet<&str> = records.iter().map(|r| r.user_id.as_str()).collect();
    let items: HashSet<&str> = records.iter().map(|r| r.item_id.as_str()).collect();
    let total_words: u64 = records
        .iter()
        .map(|r| r.text.split_whitespace().count() as u64)
        .sum();
    let n_reviews = records.len();
    let ratio = |num: f64, den: usize| if den == 0 { 0.0 } else { num / den as f64 };
    CorpusStats {
        n_users: users.len(),
        n_items: items.len(),
        n_reviews,
        avg_reviews_per_item: ratio(n_reviews as f64, items.len()),
        total_words,
        avg_words_per_review: ratio(total_words as f64, n_reviews),
    }
}

/// Keeps records of the `max_items` most-reviewed items (ties by item id).
pub fn subsample_top_items(records: &[RawReview], max_items: usize) -> Vec<RawReview> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for r in records {
        *counts.entry(r.item_id.as_str()).or_insert(0) += 1;
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let keep: HashSet<&str> = ranked
        .into_iter()
        .take(max_items)
        .map(|(id, _)| id)
        .collect();
    records
        .iter()
        .filter(|r| keep.contains(r.item_id.as_str()))
        .cloned()
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub review_len: usize,
    pub min_count: usize,
    pub ratios: SplitRatios,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            review_len: REVIEW_LEN,
            min_count: 5,
            ratios: SplitRatios::default(),
            seed: 42,
        }
    }
}

/// Preprocessed dataset. User and item indices cover every record in every
/// split; the vocabulary is built from the training split only.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub review_len: usize,
    pub vocab: Vocabulary,
    pub users: Vec<String>,
    pub items: Vec<String>,
    pub train: Vec<TokenizedReview>,
    pub validation: Vec<TokenizedReview>,
    pub test: Vec<TokenizedReview>,
}

impl Corpus {
    pub fn build(
        records: &[RawReview],
        stopwords: &StopWords,
        config: &CorpusConfig,
    ) -> Result<Self, CorpusError> {
        if config.review_len == 0 {
            return Err(CorpusError::Format("review length must be positive".into()));
        }
        let mut users = Vec::new();
        let mut items = Vec::new();
        let mut user_ix: HashMap<&str, u32> = HashMap::new();
        let mut item_ix: HashMap<&str, u32> = HashMap::new();
        let mut keyed = Vec::with_capacity(records.len());
        for r in records {
            let u = *user_ix.entry(r.user_id.as_str()).or_insert_with(|| {
                users.push(r.user_id.clone());
                (users.len() - 1) as u32
            });
            let i = *item_ix.entry(r.item_id.as_str()).or_insert_with(|| {
                items.push(r.item_id.clone());
                (items.len() - 1) as u32
            });
            keyed.push((u, i, r.rating, normalize_and_tokenize(&r.text, stopwords)));
        }

        let split = split_dataset(&keyed, config.ratios, config.seed)?;
        let vocab =
            Vocabulary::build(split.train.iter().map(|k| k.3.as_slice()), config.min_count)?;
        let encode = |part: Vec<(u32, u32, f64, Vec<String>)>| -> Vec<TokenizedReview> {
            part.into_iter()
                .map(|(user, item, rating, words)| {
                    let (tokens, true_length) =
                        pad_or_truncate(&vocab.encode(&words), config.review_len);
                    TokenizedReview {
                        user,
                        item,
                        rating,
                        tokens,
                        true_length,
                    }
                })
                .collect()
        };
        let train = encode(split.train);
        let validation = encode(split.validation);
        let test = encode(split.test);
        Ok(Self {
            review_len: config.review_len,
            vocab,
            users,
            items,
            train,
            validation,
            test,
        })
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn train_mean_rating(&self) -> Option<f64> {
        if self.train.is_empty() {
            return None;
        }
        Some(self.train.iter().map(|r| r.rating).sum::<f64>() / self.train.len() as f64)
    }

    /// Same corpus with every validation and test review text replaced by PAD.
    pub fn without_heldout_text(&self) -> Self {
        let blank = |part: &[TokenizedReview]| {
            part.iter()
                .map(|r| TokenizedReview {
                    tokens: vec![PAD; self.review_len],
                    true_length: 0,
                    ..r.clone()
                })
                .collect()
        };
        Self {
            validation: blank(&self.validation),
            test: blank(&self.test),
            ..self.clone()
        }
    }
}
