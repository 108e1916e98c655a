//! Exact maximum-inner-product search over encoded passages, plus a TF-IDF
//! lexical index.

mod lexical;

use std::cmp::Ordering;
use std::path::Path;

use rayon::prelude::*;

use crate::data::{CorpusTokens, PassageStore, Vocabulary};
use crate::encoder::{DualEncoder, EncoderParams};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::linalg::dot;

pub use lexical::{build_lexical_index, lexical_search, LexicalIndex};

/// One search result.
#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseIndex {
    dim: usize,
    /// Passage ids in ascending order; row `i` belongs to `ids[i]`.
    ids: Vec<String>,
    /// Store position of each row.
    positions: Vec<usize>,
    data: Vec<f64>,
    /// Bumped on every refresh.
    pub params_version: u64,
    /// `DualEncoder::version` of the parameters that produced the rows.
    pub encoder_version: u64,
}

impl DenseIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_of(&self, id: &str) -> Option<&[f64]> {
        self.ids
            .binary_search_by(|x| x.as_str().cmp(id))
            .ok()
            .map(|i| self.row(i))
    }

    /// Store position of row `i`.
    pub fn position(&self, i: usize) -> usize {
        self.positions[i]
    }

    pub fn check_current<E: DualEncoder + ?Sized>(&self, encoder: &E) -> Result<()> {
        if self.encoder_version != encoder.version() {
            return Err(Error::StaleIndex {
                index: self.encoder_version,
                params: encoder.version(),
            });
        }
        if self.dim != encoder.dim() {
            return Err(Error::Dimension {
                expected: self.dim,
                got: encoder.dim(),
            });
        }
        Ok(())
    }

    /// Top `k` rows as `(row, score)`, descending, ties by ascending id.
    pub fn search_rows(&self, qv: &[f64], k: usize) -> Result<Vec<(usize, f64)>> {
        if qv.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                got: qv.len(),
            });
        }
        let k = k.min(self.len());
        if k == 0 {
            return Ok(Vec::new());
        }
        let mut scored: Vec<(usize, f64)> = (0..self.len()).map(|i| (i, dot(self.row(i), qv))).collect();
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, rank_order);
            scored.truncate(k);
        }
        scored.sort_by(rank_order);
        Ok(scored)
    }
}

/// Descending score, then ascending row (rows are in id order).
pub(crate) fn rank_order(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(Ordering::Equal)
        .then(a.0.cmp(&b.0))
}

/// Encodes every passage with the passage tower, rows ordered by id.
pub fn build_dense_index(params: &EncoderParams, vocab: &Vocabulary, store: &PassageStore) -> Result<DenseIndex> {
    params.check_vocab(vocab)?;
    let corpus = CorpusTokens::new(vocab, store);
    build_dense_index_with(params, &corpus, store)
}

pub fn build_dense_index_with<E: DualEncoder + ?Sized>(
    encoder: &E,
    corpus: &CorpusTokens,
    store: &PassageStore,
) -> Result<DenseIndex> {
    if store.is_empty() {
        return Err(Error::InvalidData("cannot index an empty corpus".into()));
    }
    let mut positions: Vec<usize> = (0..store.len()).collect();
    positions.sort_by(|&a, &b| store.at(a).id.cmp(&store.at(b).id));
    let rows: Vec<Vec<f64>> = positions
        .par_iter()
        .map(|&p| encoder.passage_vector(corpus.get(p)))
        .collect();
    let dim = encoder.dim();
    let mut data = Vec::with_capacity(rows.len() * dim);
    for r in &rows {
        data.extend_from_slice(r);
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("dense index rows".into()));
    }
    Ok(DenseIndex {
        dim,
        ids: positions.iter().map(|&p| store.at(p).id.clone()).collect(),
        positions,
        data,
        params_version: 0,
        encoder_version: encoder.version(),
    })
}

/// Exact top-`k` by inner product.
pub fn dense_search(index: &DenseIndex, qv: &[f64], k: usize) -> Result<Vec<Hit>> {
    Ok(index
        .search_rows(qv, k)?
        .into_iter()
        .map(|(i, score)| Hit {
            id: index.ids[i].clone(),
            score,
        })
        .collect())
}

/// Re-encodes everything with the current parameters.
pub fn refresh_index(
    index: &DenseIndex,
    params: &EncoderParams,
    vocab: &Vocabulary,
    store: &PassageStore,
) -> Result<DenseIndex> {
    let mut fresh = build_dense_index(params, vocab, store)?;
    fresh.params_version = index.params_version + 1;
    Ok(fresh)
}

pub fn refresh_index_with<E: DualEncoder + ?Sized>(
    index: &DenseIndex,
    encoder: &E,
    corpus: &CorpusTokens,
    store: &PassageStore,
) -> Result<DenseIndex> {
    let mut fresh = build_dense_index_with(encoder, corpus, store)?;
    fresh.params_version = index.params_version + 1;
    Ok(fresh)
}

const CACHE_VERSION: u32 = 1;
const CACHE_HEADER: usize = 4 + 8 + 8 + 8;

/// Header `{version u32, |D| u64, d u64, params_version u64}` then row-major
/// little-endian `f64`s. Ids are not stored; they come from the store.
pub fn save_index_cache(path: &Path, index: &DenseIndex) -> Result<()> {
    let mut buf = Vec::with_capacity(CACHE_HEADER + index.data.len() * 8);
    buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(index.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(index.dim as u64).to_le_bytes());
    buf.extend_from_slice(&index.params_version.to_le_bytes());
    for v in &index.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(path, &buf)
}

/// Loads a cache written for `store`. The caller vouches that the rows were
/// produced by an encoder at `encoder_version`.
pub fn load_index_cache(path: &Path, store: &PassageStore, encoder_version: u64) -> Result<DenseIndex> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::InvalidData(format!("{}: {m}", path.display()));
    if bytes.len() < CACHE_HEADER {
        return Err(bad("truncated index header"));
    }
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let version = u32::from_le_bytes(bytes[0..4].try_into().unwrap());
    if version != CACHE_VERSION {
        return Err(bad(&format!("unsupported index cache version {version}")));
    }
    let n = u64_at(4) as usize;
    let dim = u64_at(12) as usize;
    let params_version = u64_at(20);
    if n != store.len() {
        return Err(bad(&format!("cache has {n} rows, corpus has {}", store.len())));
    }
    if bytes.len() != CACHE_HEADER + n * dim * 8 {
        return Err(bad("index cache size does not match its header"));
    }
    let data = bytes[CACHE_HEADER..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut positions: Vec<usize> = (0..store.len()).collect();
    positions.sort_by(|&a, &b| store.at(a).id.cmp(&store.at(b).id));
    Ok(DenseIndex {
        dim,
        ids: positions.iter().map(|&p| store.at(p).id.clone()).collect(),
        positions,
        data,
        params_version,
        encoder_version,
    })
}
