//! Binary tokenized-corpus file.
//!
//! Layout (little endian):
//! `b"CMFCORP\0"`, version u32, review length u32, vocabulary SHA-256
//! (32 raw bytes), vocabulary size u32, min_count u32, user table, item
//! table (u32 count then u32-length-prefixed UTF-8 ids), then the train,
//! validation and test parts, each a u32 count followed by records of
//! `user u32, item u32, rating f64, true_length u32, tokens [u32; L]`.

use std::io::{BufRead, Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{Corpus, CorpusError, TokenizedReview, Vocabulary};

const MAGIC: &[u8; 8] = b"CMFCORP\0";
pub const CORPUS_FORMAT_VERSION: u32 = 1;

fn write_ids<W: Write>(out: &mut W, ids: &[String]) -> std::io::Result<()> {
    out.write_u32::<LittleEndian>(ids.len() as u32)?;
    for id in ids {
        out.write_u32::<LittleEndian>(id.len() as u32)?;
        out.write_all(id.as_bytes())?;
    }
    Ok(())
}

fn read_ids<R: Read>(input: &mut R) -> Result<Vec<String>, CorpusError> {
    let n = input.read_u32::<LittleEndian>()? as usize;
    let mut ids = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let len = input.read_u32::<LittleEndian>()? as usize;
        let mut buf = vec![0u8; len];
        input.read_exact(&mut buf)?;
        ids.push(String::from_utf8(buf).map_err(|e| CorpusError::Format(e.to_string()))?);
    }
    Ok(ids)
}

fn write_part<W: Write>(out: &mut W, part: &[TokenizedReview]) -> std::io::Result<()> {
    out.write_u32::<LittleEndian>(part.len() as u32)?;
    for r in part {
        out.write_u32::<LittleEndian>(r.user)?;
        out.write_u32::<LittleEndian>(r.item)?;
        out.write_f64::<LittleEndian>(r.rating)?;
        out.write_u32::<LittleEndian>(r.true_length as u32)?;
        for &t in &r.tokens {
            out.write_u32::<LittleEndian>(t)?;
        }
    }
    Ok(())
}

fn read_part<R: Read>(
    input: &mut R,
    review_len: usize,
    header: &Header,
) -> Result<Vec<TokenizedReview>, CorpusError> {
    let n = input.read_u32::<LittleEndian>()? as usize;
    let mut part = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let user = input.read_u32::<LittleEndian>()?;
        let item = input.read_u32::<LittleEndian>()?;
        let rating = input.read_f64::<LittleEndian>()?;
        let true_length = input.read_u32::<LittleEndian>()? as usize;
        let mut tokens = vec![0u32; review_len];
        input.read_u32_into::<LittleEndian>(&mut tokens)?;
        if user as usize >= header.n_users || item as usize >= header.n_items {
            return Err(CorpusError::Format(
                "record references unknown user or item".into(),
            ));
        }
        if true_length > review_len || tokens.iter().any(|&t| t as usize >= header.vocab_size) {
            return Err(CorpusError::Format("record tokens out of range".into()));
        }
        part.push(TokenizedReview {
            user,
            item,
            rating,
            tokens,
            true_length,
        });
    }
    Ok(part)
}

struct Header {
    n_users: usize,
    n_items: usize,
    vocab_size: usize,
}

pub fn write_corpus<W: Write>(corpus: &Corpus, mut out: W) -> std::io::Result<()> {
    out.write_all(MAGIC)?;
    out.write_u32::<LittleEndian>(CORPUS_FORMAT_VERSION)?;
    out.write_u32::<LittleEndian>(corpus.review_len as u32)?;
    let hash = hex::decode(corpus.vocab.hash()).expect("hex digest");
    out.write_all(&hash)?;
    out.write_u32::<LittleEndian>(corpus.vocab.len() as u32)?;
    out.write_u32::<LittleEndian>(corpus.vocab.min_count() as u32)?;
    write_ids(&mut out, &corpus.users)?;
    write_ids(&mut out, &corpus.items)?;
    write_part(&mut out, &corpus.train)?;
    write_part(&mut out, &corpus.validation)?;
    write_part(&mut out, &corpus.test)?;
    out.flush()
}

/// Reads a corpus file together with its vocabulary file, refusing a
/// vocabulary whose hash differs from the one recorded in the header.
pub fn read_corpus<R: Read, V: BufRead>(
    mut input: R,
    vocab_file: V,
) -> Result<Corpus, CorpusError> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CorpusError::Format("not a tokenized corpus file".into()));
    }
    let version = input.read_u32::<LittleEndian>()?;
    if version != CORPUS_FORMAT_VERSION {
        return Err(CorpusError::Format(format!(
            "unsupported corpus version {version}"
        )));
    }
    let review_len = input.read_u32::<LittleEndian>()? as usize;
    let mut hash = [0u8; 32];
    input.read_exact(&mut hash)?;
    let vocab_size = input.read_u32::<LittleEndian>()? as usize;
    let min_count = input.read_u32::<LittleEndian>()? as usize;

    let vocab = Vocabulary::read_from(vocab_file, min_count)?;
    let expected = hex::encode(hash);
    let found = vocab.hash();
    if expected != found {
        return Err(CorpusError::VocabHashMismatch { expected, found });
    }
    if vocab.len() != vocab_size {
        return Err(CorpusError::Format(
            "vocabulary size disagrees with corpus header".into(),
        ));
    }
    let users = read_ids(&mut input)?;
    let items = read_ids(&mut input)?;
    let header = Header {
        n_users: users.len(),
        n_items: items.len(),
        vocab_size,
    };
    let train = read_part(&mut input, review_len, &header)?;
    let validation = read_part(&mut input, review_len, &header)?;
    let test = read_part(&mut input, review_len, &header)?;
    Ok(Corpus {
        review_len,
        vocab,
        users,
        items,
        train,
        validation,
        test,
    })
}
