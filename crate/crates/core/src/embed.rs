//! Signed feature-hashing text embedders.
//!
//! Every text is lowercased and split on whitespace. Each word contributes
//! its unigram, boundary-marked character n-grams and (with its right
//! neighbour) a joined bigram. Feature strings are hashed with 64-bit FNV-1a,
//! xored with the spec seed, and accumulated as signed counts into a
//! `dim`-bucket vector which is then L2-normalized.
//!
//! The raw integer counts are exposed so that callers can apply small edits
//! to a text and re-normalize without re-tokenizing the whole thing; the
//! result is bit-identical to a full re-embedding because the counts are
//! exact.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_DIM: usize = 256;
pub const DEFAULT_HASH_SEED: u64 = 0x5EED;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = FNV_OFFSET;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureSpec {
    pub dim: usize,
    pub char_ngram_orders: Vec<usize>,
    pub use_word_unigrams: bool,
    pub use_word_bigrams: bool,
    pub hash_seed: u64,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        Self {
            dim: DEFAULT_DIM,
            char_ngram_orders: vec![3],
            use_word_unigrams: true,
            use_word_bigrams: true,
            hash_seed: DEFAULT_HASH_SEED,
        }
    }
}

impl FeatureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 8 {
            return Err(Error::Config(format!(
                "embedding dimension must be at least 8, got {}",
                self.dim
            )));
        }
        if let Some(bad) = self
            .char_ngram_orders
            .iter()
            .find(|n| !(2..=4).contains(*n))
        {
            return Err(Error::Config(format!(
                "char n-gram orders must be within 2..=4, got {bad}"
            )));
        }
        Ok(())
    }
}

/// A dense real vector in the shared embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("embedding has non-finite entries".into()));
        }
        Ok(Self(values))
    }

    /// Scales `values` to unit L2 norm.
    pub fn normalized(values: Vec<f64>) -> Result<Self> {
        let norm = l2_norm(&values);
        if norm == 0.0 {
            return Err(Error::ZeroVector);
        }
        Self::new(values.into_iter().map(|v| v / norm).collect())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.0)
    }

    pub fn dot(&self, other: &Embedding) -> Result<f64> {
        check_dims(self.dim(), other.dim())?;
        Ok(dot(&self.0, &other.0))
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn check_dims(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch { expected, actual });
    }
    Ok(())
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine(a: &Embedding, b: &Embedding) -> Result<f64> {
    check_dims(a.dim(), b.dim())?;
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((dot(&a.0, &b.0) / (na * nb)).clamp(-1.0, 1.0))
}

/// Anything that maps text into the shared space.
pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Embedding>;
}

/// Un-normalized signed feature counts of a text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawFeatures {
    counts: Vec<i32>,
}

impl RawFeatures {
    pub fn zeros(dim: usize) -> Self {
        Self {
            counts: vec![0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[i32] {
        &self.counts
    }

    /// Adds `sign * count` for every `(bucket, count)` pair.
    pub fn apply(&mut self, features: &[(usize, i32)], sign: i32) {
        for &(bucket, count) in features {
            self.counts[bucket] += sign * count;
        }
    }

    pub fn norm_sq(&self) -> i64 {
        self.counts.iter().map(|&c| i64::from(c) * i64::from(c)).sum()
    }

    pub fn to_sparse(&self) -> BTreeMap<usize, i32> {
        self.counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c != 0)
            .map(|(i, &c)| (i, c))
            .collect()
    }

    pub fn to_dense(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| f64::from(c)).collect()
    }

    /// L2-normalizes the counts. `None` when every bucket cancelled to zero.
    ///
    /// The norm comes from an exact integer sum, so equal counts always
    /// produce bit-identical embeddings.
    pub fn normalize(&self) -> Option<Embedding> {
        let norm_sq = self.norm_sq();
        if norm_sq == 0 {
            return None;
        }
        let norm = (norm_sq as f64).sqrt();
        Some(Embedding(
            self.counts.iter().map(|&c| f64::from(c) / norm).collect(),
        ))
    }
}

/// The reference embedder family.
#[derive(Debug, Clone, PartialEq)]
pub struct HashEmbedder {
    spec: FeatureSpec,
}

impl HashEmbedder {
    pub fn new(spec: FeatureSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec })
    }

    pub fn spec(&self) -> &FeatureSpec {
        &self.spec
    }

    /// Lowercased whitespace tokens.
    pub fn tokenize(text: &str) -> Vec<String> {
        text.split_whitespace().map(str::to_lowercase).collect()
    }

    /// Bucket and sign of a single feature string.
    pub fn hash_feature(&self, feature: &str) -> (usize, i32) {
        let hash = fnv1a64(feature.as_bytes()) ^ self.spec.hash_seed;
        let bucket = (hash % self.spec.dim as u64) as usize;
        let sign = if hash >> 63 == 0 { 1 } else { -1 };
        (bucket, sign)
    }

    /// Feature strings contributed by one word independent of its neighbours.
    pub fn word_feature_strings(&self, word: &str) -> Vec<String> {
        let mut out = Vec::new();
        if self.spec.use_word_unigrams {
            out.push(word.to_string());
        }
        let chars: Vec<char> = word.chars().collect();
        for &n in &self.spec.char_ngram_orders {
            if chars.len() <= n {
                out.push(format!("^{word}$"));
                continue;
            }
            let last = chars.len() - n;
            for start in 0..=last {
                let gram: String = chars[start..start + n].iter().collect();
                let marked = match (start == 0, start == last) {
                    (true, _) => format!("^{gram}"),
                    (_, true) => format!("{gram}$"),
                    _ => gram,
                };
                out.push(marked);
            }
        }
        out
    }

    pub fn bigram_feature_string(left: &str, right: &str) -> String {
        format!("{left} {right}")
    }

    /// Sparse signed features of one (already lowercased) word, merged by bucket.
    pub fn word_features(&self, word: &str) -> Vec<(usize, i32)> {
        merge(
            self.word_feature_strings(word)
                .iter()
                .map(|f| self.hash_feature(f)),
        )
    }

    /// The bigram feature of two adjacent (lowercased) words; empty when
    /// bigrams are disabled.
    pub fn bigram_features(&self, left: &str, right: &str) -> Vec<(usize, i32)> {
        if !self.spec.use_word_bigrams {
            return Vec::new();
        }
        vec![self.hash_feature(&Self::bigram_feature_string(left, right))]
    }

    /// Raw counts for an already tokenized word sequence.
    pub fn raw_from_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> RawFeatures {
        let mut raw = RawFeatures::zeros(self.spec.dim);
        for word in tokens {
            raw.apply(&self.word_features(word.as_ref()), 1);
        }
        for pair in tokens.windows(2) {
            raw.apply(
                &self.bigram_features(pair[0].as_ref(), pair[1].as_ref()),
                1,
            );
        }
        raw
    }

    pub fn raw_features(&self, text: &str) -> Result<RawFeatures> {
        let tokens = Self::tokenize(text);
        if tokens.is_empty() {
            return Err(Error::EmptyText);
        }
        Ok(self.raw_from_tokens(&tokens))
    }
}

fn merge(features: impl Iterator<Item = (usize, i32)>) -> Vec<(usize, i32)> {
    let mut acc: BTreeMap<usize, i32> = BTreeMap::new();
    for (bucket, sign) in features {
        *acc.entry(bucket).or_default() += sign;
    }
    acc.into_iter().filter(|&(_, c)| c != 0).collect()
}

impl Embedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.spec.dim
    }

    fn embed(&self, text: &str) -> Result<Embedding> {
        self.raw_features(text)?
            .normalize()
            .ok_or_else(|| Error::ZeroEmbedding(text.to_string()))
    }
}

/// Wraps an embedder and keeps only the first `max_words` words of each
/// input. Used for the passage side.
#[derive(Debug, Clone)]
pub struct HeadTruncated<E> {
    pub inner: E,
    pub max_words: usize,
}

impl<E: Embedder> Embedder for HeadTruncated<E> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn embed(&self, text: &str) -> Result<Embedding> {
        self.inner
            .embed(&crate::text::truncate_head(text, self.max_words))
    }
}

const MATRIX_MAGIC: &[u8; 4] = b"CVNV";
const MATRIX_VERSION: u32 = 1;

/// Path of the id sidecar written next to a matrix file.
pub fn ids_sidecar(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".ids");
    PathBuf::from(name)
}

/// Writes `rows` as a little-endian `CVNV` matrix plus an `.ids` sidecar.
pub fn write_matrix(path: &Path, ids: &[String], rows: &[Embedding]) -> Result<()> {
    if ids.len() != rows.len() {
        return Err(Error::Invalid(format!(
            "{} ids for {} rows",
            ids.len(),
            rows.len()
        )));
    }
    let dim = rows.first().map_or(0, Embedding::dim);
    if let Some(bad) = rows.iter().find(|r| r.dim() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: bad.dim(),
        });
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    put(MATRIX_MAGIC)?;
    put(&MATRIX_VERSION.to_le_bytes())?;
    put(&(dim as u32).to_le_bytes())?;
    put(&(rows.len() as u64).to_le_bytes())?;
    for row in rows {
        for &v in row.values() {
            put(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;

    let sidecar = ids_sidecar(path);
    let mut ids_out = String::new();
    for id in ids {
        if id.contains('\n') {
            return Err(Error::Invalid(format!("id `{id}` contains a newline")));
        }
        ids_out.push_str(id);
        ids_out.push('\n');
    }
    std::fs::write(&sidecar, ids_out).map_err(|e| Error::io(&sidecar, e))
}

/// Reads a `CVNV` matrix and its sidecar. Rows come back as `f32` widened to `f64`.
pub fn read_matrix(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let format = |message: &str| Error::Format {
        path: path.to_path_buf(),
        message: message.to_string(),
    };
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 20 || &bytes[..4] != MATRIX_MAGIC {
        return Err(format("missing CVNV header"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != MATRIX_VERSION {
        return Err(format(&format!("unsupported version {version}")));
    }
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = &bytes[20..];
    if body.len() != count * dim * 4 {
        return Err(format("payload length does not match header"));
    }
    let rows = body
        .chunks_exact(4 * dim.max(1))
        .take(count)
        .map(|row| {
            row.chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
                .collect()
        })
        .collect::<Vec<Vec<f64>>>();

    let sidecar = ids_sidecar(path);
    let file = File::open(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    let ids = BufReader::new(file)
        .lines()
        .collect::<std::io::Result<Vec<String>>>()
        .map_err(|e| Error::io(&sidecar, e))?;
    if ids.len() != count {
        return Err(format("id sidecar length does not match row count"));
    }
    Ok((ids, rows))
}
