use std::collections::HashMap;
use std::io::{BufRead, Write};

use sha2::{Digest, Sha256};

use super::CorpusError;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
const RESERVED: [&str; 2] = ["<pad>", "<unk>"];

/// Token ↔ index map. Indices 0 and 1 are PAD and UNK; corpus tokens start
/// at 2 and are never looked up through the reserved display names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    min_count: usize,
}

impl Vocabulary {
    /// Builds from training token streams. Tokens with frequency ≥ `min_count`
    /// are indexed by descending frequency, then lexicographically.
    pub fn build<'a, I, S>(reviews: I, min_count: usize) -> Result<Self, CorpusError>
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut n_reviews = 0usize;
        for review in reviews {
            n_reviews += 1;
            for tok in review {
                *counts.entry(tok.as_ref()).or_insert(0) += 1;
            }
        }
        if n_reviews == 0 {
            return Err(CorpusError::EmptyTrainingCorpus);
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(_, c)| c >= min_count.max(1))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Ok(Self::from_ordered(
            kept.into_iter().map(|(t, _)| t.to_string()),
            min_count,
        ))
    }

    /// Vocabulary whose non-reserved entries are `tokens` in the given order.
    /// Duplicates keep their first position.
    pub fn from_ordered<I: IntoIterator<Item = String>>(tokens: I, min_count: usize) -> Self {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut index = HashMap::new();
        for tok in tokens {
            if index.contains_key(&tok) {
                continue;
            }
            index.insert(tok.clone(), all.len() as u32);
            all.push(tok);
        }
        Self {
            tokens: all,
            index,
            min_count,
        }
    }

    /// Total size including the two reserved entries.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= RESERVED.len()
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn index_of(&self, token: &str) -> u32 {
        self.get(token).unwrap_or(UNK)
    }

    pub fn token(&self, index: u32) -> Option<&str> {
        self.tokens.get(index as usize).map(String::as_str)
    }

    pub fn is_reserved(index: u32) -> bool {
        index == PAD || index == UNK
    }

    /// Non-reserved tokens in index order.
    pub fn corpus_tokens(&self) -> impl Iterator<Item = (u32, &str)> {
        self.tokens
            .iter()
            .enumerate()
            .skip(RESERVED.len())
            .map(|(i, t)| (i as u32, t.as_str()))
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<u32> {
        tokens.iter().map(|t| self.index_of(t.as_ref())).collect()
    }

    /// Writes one token per line; line `n` holds index `n + 2`.
    pub fn write_to<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for (_, tok) in self.corpus_tokens() {
            out.write_all(tok.as_bytes())?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(input: R, min_count: usize) -> Result<Self, CorpusError> {
        let mut tokens = Vec::new();
        for (n, line) in input.lines().enumerate() {
            let line = line?;
            if line.is_empty() || line.chars().any(char::is_whitespace) {
                return Err(CorpusError::Format(format!(
                    "vocabulary line {} is not a single token",
                    n + 1
                )));
            }
            tokens.push(line);
        }
        let vocab = Self::from_ordered(tokens.iter().cloned(), min_count);
        if vocab.len() != tokens.len() + RESERVED.len() {
            return Err(CorpusError::Format(
                "vocabulary file has duplicate tokens".into(),
            ));
        }
        Ok(vocab)
    }

    /// SHA-256 (hex) of the vocabulary file bytes.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        for (_, tok) in self.corpus_tokens() {
            hasher.update(tok.as_bytes());
            hasher.update(b"\n");
        }
        hex::encode(hasher.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn min_count_one() {
        let docs = [toks("a a b")];
        let v = Vocabulary::build(docs.iter().map(Vec::as_slice), 1).unwrap();
        assert_eq!(v.get("a"), Some(2));
        assert_eq!(v.get("b"), Some(3));
        assert_eq!(v.len(), 4);
        assert_eq!(v.token(PAD), Some("<pad>"));
        assert_eq!(v.token(UNK), Some("<unk>"));
    }

    #[test]
    fn min_count_two_sends_tail_to_unk() {
        let docs = [toks("a a b")];
        let v = Vocabulary::build(docs.iter().map(Vec::as_slice), 2).unwrap();
        assert_eq!(v.get("a"), Some(2));
        assert_eq!(v.get("b"), None);
        assert_eq!(v.index_of("b"), UNK);
    }

    #[test]
    fn ties_break_lexicographically() {
        let docs = [toks("b a"), toks("a b")];
        let v = Vocabulary::build(docs.iter().map(Vec::as_slice), 1).unwrap();
        assert_eq!(v.get("a"), Some(2));
        assert_eq!(v.get("b"), Some(3));
    }

    #[test]
    fn empty_corpus_is_fatal() {
        let docs: Vec<Vec<String>> = vec![];
        assert!(matches!(
            Vocabulary::build(docs.iter().map(Vec::as_slice), 1),
            Err(CorpusError::EmptyTrainingCorpus)
        ));
    }

    #[test]
    fn reserved_names_do_not_collide() {
        let docs = [toks("<pad> <unk> x")];
        let v = Vocabulary::build(docs.iter().map(Vec::as_slice), 1).unwrap();
        assert!(v.get("<pad>").unwrap() >= 2);
        assert!(v.get("<unk>").unwrap() >= 2);
    }

    #[test]
    fn file_round_trip_preserves_hash() {
        let docs = [toks("z y y x x x")];
        let v = Vocabulary::build(docs.iter().map(Vec::as_slice), 1).unwrap();
        let mut buf = Vec::new();
        v.write_to(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "x\ny\nz\n");
        let back = Vocabulary::read_from(buf.as_slice(), 1).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.hash(), v.hash());
    }
}
