//! Pre-trained word vectors aligned to a [`Vocabulary`], and cosine similarity.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{Vocabulary, PAD};

/// Half-width of the uniform range for tokens missing from the vector file.
pub const INIT_RANGE: f64 = 0.25;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("cannot read embedding file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: expected {expected} components, found {found}")]
    InconsistentDimension {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("embedding file has no vectors")]
    Empty,
    #[error("cosine similarity undefined for a zero vector")]
    ZeroVector,
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowOrigin {
    Pretrained,
    Initialized,
}

/// `|V| × D` matrix, row `i` belonging to vocabulary index `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    data: Vec<f64>,
    origin: Vec<RowOrigin>,
    source: String,
}

impl EmbeddingTable {
    /// Builds a table directly from rows. Used for synthetic instances and tests.
    pub fn from_rows(
        dim: usize,
        data: Vec<f64>,
        origin: Vec<RowOrigin>,
        source: impl Into<String>,
    ) -> Self {
        assert_eq!(
            data.len(),
            dim * origin.len(),
            "row data does not match row count"
        );
        Self {
            dim,
            data,
            origin,
            source: source.into(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_rows(&self) -> usize {
        self.origin.len()
    }

    pub fn row(&self, index: u32) -> &[f64] {
        let i = index as usize * self.dim;
        &self.data[i..i + self.dim]
    }

    pub fn origin(&self, index: u32) -> RowOrigin {
        self.origin[index as usize]
    }

    pub fn is_pretrained(&self, index: u32) -> bool {
        self.origin[index as usize] == RowOrigin::Pretrained
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn n_pretrained(&self) -> usize {
        self.origin
            .iter()
            .filter(|o| **o == RowOrigin::Pretrained)
            .count()
    }
}

/// Loads a GloVe-format text file (`token v1 ... vD`, no header).
///
/// Tokens missing from the file get rows drawn uniformly from
/// `[-INIT_RANGE, INIT_RANGE]` with `seed`; the PAD row is zero. The source
/// id records the file name and its SHA-256.
pub fn load_embedding_table(
    path: &Path,
    vocab: &Vocabulary,
    seed: u64,
) -> Result<EmbeddingTable, EmbeddingError> {
    let io_err = |source| EmbeddingError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::open(path).map_err(io_err)?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_embedding_table(BufReader::new(file), vocab, seed, &name).map_err(|e| match e {
        EmbeddingError::Io { source, .. } => io_err(source),
        other => other,
    })
}

pub fn read_embedding_table<R: BufRead>(
    mut input: R,
    vocab: &Vocabulary,
    seed: u64,
    name: &str,
) -> Result<EmbeddingTable, EmbeddingError> {
    let mut hasher = Sha256::new();
    let mut dim: Option<usize> = None;
    let mut found: Vec<Option<Vec<f64>>> = vec![None; vocab.len()];
    let mut line = String::new();
    let mut line_no = 0usize;
    loop {
        line.clear();
        let n = input
            .read_line(&mut line)
            .map_err(|source| EmbeddingError::Io {
                path: name.to_string(),
                source,
            })?;
        if n == 0 {
            break;
        }
        line_no += 1;
        hasher.update(line.as_bytes());
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else { continue };
        let values: Vec<&str> = fields.collect();
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(EmbeddingError::InconsistentDimension {
                    line: line_no,
                    expected: d,
                    found: values.len(),
                })
            }
            _ => {}
        }
        if let Some(ix) = vocab.get(token) {
            let slot = &mut found[ix as usize];
            if slot.is_none() {
                let parsed = values
                    .iter()
                    .map(|v| v.parse::<f64>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| EmbeddingError::Parse {
                        line: line_no,
                        message: e.to_string(),
                    })?;
                if parsed.iter().any(|v| !v.is_finite()) {
                    return Err(EmbeddingError::Parse {
                        line: line_no,
                        message: "non-finite component".into(),
                    });
                }
                *slot = Some(parsed);
            }
        }
    }
    let dim = match dim {
        Some(d) if d > 0 => d,
        _ => return Err(EmbeddingError::Empty),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(vocab.len() * dim);
    let mut origin = Vec::with_capacity(vocab.len());
    for (ix, row) in found.into_iter().enumerate() {
        match row {
            _ if ix as u32 == PAD => {
                data.extend(std::iter::repeat_n(0.0, dim));
                origin.push(RowOrigin::Initialized);
            }
            Some(v) => {
                data.extend(v);
                origin.push(RowOrigin::Pretrained);
            }
            None => {
                data.extend((0..dim).map(|_| rng.gen_range(-INIT_RANGE..=INIT_RANGE)));
                origin.push(RowOrigin::Initialized);
            }
        }
    }
    let digest = hex::encode(hasher.finalize());
    Ok(EmbeddingTable {
        dim,
        data,
        origin,
        source: format!("{name}:sha256:{digest}"),
    })
}

/// Writes `token v1 ... vD` lines.
pub fn write_glove<'a, W, I>(mut out: W, rows: I) -> std::io::Result<()>
where
    W: Write,
    I: IntoIterator<Item = (&'a str, &'a [f64])>,
{
    for (token, vec) in rows {
        write!(out, "{token}")?;
        for v in vec {
            write!(out, " {v}")?;
        }
        writeln!(out)?;
    }
    out.flush()
}

/// `u·v / (‖u‖‖v‖)`, clamped to `[-1, 1]`.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64, EmbeddingError> {
    if u.len() != v.len() {
        return Err(EmbeddingError::DimensionMismatch(u.len(), v.len()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(EmbeddingError::ZeroVector);
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab(words: &[&str]) -> Vocabulary {
        Vocabulary::from_ordered(words.iter().map(|w| w.to_string()), 1)
    }

    #[test]
    fn copies_pretrained_rows() {
        let v = vocab(&["good"]);
        let t =
            read_embedding_table("good 0.1 0.2\nbad 0.3 0.4\n".as_bytes(), &v, 7, "mini").unwrap();
        assert_eq!(t.dim(), 2);
        let good = v.get("good").unwrap();
        assert_eq!(t.row(good), &[0.1, 0.2]);
        assert!(t.is_pretrained(good));
        assert!(t.source().starts_with("mini:sha256:"));
    }

    #[test]
    fn missing_tokens_are_initialized_in_range() {
        let v = vocab(&["good", "zzzq"]);
        let t = read_embedding_table("good 0.1 0.2\n".as_bytes(), &v, 7, "mini").unwrap();
        let z = v.get("zzzq").unwrap();
        assert_eq!(t.origin(z), RowOrigin::Initialized);
        assert!(t.row(z).iter().all(|x| x.abs() <= INIT_RANGE));
        assert!(t.row(z).iter().any(|x| *x != 0.0));
    }

    #[test]
    fn pad_row_is_zero() {
        let v = vocab(&["<pad>"]);
        let t = read_embedding_table("<pad> 9 9\n".as_bytes(), &v, 1, "x").unwrap();
        assert_eq!(t.row(PAD), &[0.0, 0.0]);
        assert!(!t.is_pretrained(PAD));
    }

    #[test]
    fn inconsistent_dimension_is_fatal() {
        let v = vocab(&["a"]);
        let err = read_embedding_table("a 1 2\nb 1 2 3\n".as_bytes(), &v, 1, "x").unwrap_err();
        assert!(matches!(
            err,
            EmbeddingError::InconsistentDimension { line: 2, .. }
        ));
    }

    #[test]
    fn missing_file_is_fatal() {
        let v = vocab(&["a"]);
        assert!(matches!(
            load_embedding_table(Path::new("/nonexistent/vectors.txt"), &v, 1),
            Err(EmbeddingError::Io { .. })
        ));
    }

    #[test]
    fn same_seed_same_table() {
        let v = vocab(&["a", "b", "c"]);
        let a = read_embedding_table("a 1 2\n".as_bytes(), &v, 3, "x").unwrap();
        let b = read_embedding_table("a 1 2\n".as_bytes(), &v, 3, "x").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cosine_known_values() {
        assert_eq!(cosine_similarity(&[0.3, -2.0], &[0.3, -2.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 1.0]),
            Err(EmbeddingError::ZeroVector)
        ));
    }

    fn nonzero_vec() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-10.0f64..10.0, 5)
            .prop_filter("nonzero", |v| v.iter().any(|x| x.abs() > 1e-3))
    }

    proptest! {
        #[test]
        fn cosine_symmetric_bounded_scale_invariant(u in nonzero_vec(), v in nonzero_vec(), alpha in 0.01f64..100.0) {
            let c = cosine_similarity(&u, &v).unwrap();
            prop_assert_eq!(c, cosine_similarity(&v, &u).unwrap());
            prop_assert!((-1.0..=1.0).contains(&c));
            let scaled: Vec<f64> = u.iter().map(|x| alpha * x).collect();
            prop_assert!((cosine_similarity(&scaled, &v).unwrap() - c).abs() < 1e-12);
        }
    }
}
