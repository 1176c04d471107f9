//! Exact top-k cosine search over document embeddings.
//!
//! # Snapshot layout
//!
//! All integers and floats are little-endian.
//!
//! | field      | type            |
//! |------------|-----------------|
//! | magic      | `b"RFVS"`       |
//! | version    | `u32` (= 1)     |
//! | dimension  | `u64`           |
//! | count      | `u64`           |
//!
//! followed by `count` entries of `id_len: u32`, `id: [u8; id_len]` (UTF-8),
//! `vector: [f64; dimension]`.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::encoder::{Embedder, EncodeError};
use crate::io::{self, IoError};

const SNAPSHOT_MAGIC: &[u8; 4] = b"RFVS";
const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("zero-norm embedding")]
    ZeroNorm,
    #[error("embedding contains a non-finite value")]
    NonFinite,
    #[error("duplicate document id {0:?}")]
    DuplicateId(String),
    #[error("cannot build a store from zero documents")]
    Empty,
    #[error("top_k must be positive")]
    ZeroTopK,
    #[error("embedding document {id:?}: {source}")]
    Embed {
        id: String,
        #[source]
        source: EncodeError,
    },
    #[error("snapshot: {0}")]
    Snapshot(String),
    #[error(transparent)]
    Io(#[from] IoError),
}

/// A finite real vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, StoreError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(StoreError::NonFinite);
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.0)
    }

    pub fn scaled(&self, factor: f64) -> Result<Self, StoreError> {
        Self::new(self.0.iter().map(|v| v * factor).collect())
    }
}

impl AsRef<[f64]> for EmbeddingVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `a·b / (‖a‖‖b‖)`. Zero-norm inputs are an error, not 0.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, StoreError> {
    if a.dim() != b.dim() {
        return Err(StoreError::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(StoreError::ZeroNorm);
    }
    Ok(dot(a.as_slice(), b.as_slice()) / (na * nb))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub doc_id: String,
    pub score: f64,
}

/// Score descending, then id ascending.
fn rank_order(a: &RetrievalResult, b: &RetrievalResult) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.doc_id.cmp(&b.doc_id))
}

#[derive(Debug, Clone)]
pub struct VectorStore {
    dimension: usize,
    ids: Vec<String>,
    vectors: Vec<EmbeddingVector>,
    norms: Vec<f64>,
    index: HashMap<String, usize>,
}

impl VectorStore {
    pub fn new(dimension: usize) -> Self {
        Self {
            dimension,
            ids: Vec::new(),
            vectors: Vec::new(),
            norms: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Embeds every document and stores one entry per document.
    pub fn ingest<E: Embedder + ?Sized>(
        docs: &[Document],
        embedder: &E,
    ) -> Result<Self, StoreError> {
        if docs.is_empty() {
            return Err(StoreError::Empty);
        }
        let mut store = Self::new(embedder.dimension());
        for doc in docs {
            let vector = embedder
                .embed(&doc.text)
                .map_err(|source| StoreError::Embed {
                    id: doc.id.clone(),
                    source,
                })?;
            store.insert(doc.id.clone(), vector)?;
        }
        Ok(store)
    }

    pub fn insert(&mut self, id: String, vector: EmbeddingVector) -> Result<(), StoreError> {
        if vector.dim() != self.dimension {
            return Err(StoreError::DimensionMismatch {
                expected: self.dimension,
                got: vector.dim(),
            });
        }
        let norm = vector.norm();
        if norm == 0.0 {
            return Err(StoreError::ZeroNorm);
        }
        if self.index.contains_key(&id) {
            return Err(StoreError::DuplicateId(id));
        }
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.vectors.push(vector);
        self.norms.push(norm);
        Ok(())
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn get(&self, id: &str) -> Option<&EmbeddingVector> {
        self.index.get(id).map(|&i| &self.vectors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &EmbeddingVector)> {
        self.ids.iter().map(String::as_str).zip(&self.vectors)
    }

    /// Cosine of the query against every entry, in insertion order.
    pub fn score_all(&self, query: &EmbeddingVector) -> Result<Vec<RetrievalResult>, StoreError> {
        if query.dim() != self.dimension {
            return Err(StoreError::DimensionMismatch {
                expected: self.dimension,
                got: query.dim(),
            });
        }
        let qn = query.norm();
        if qn == 0.0 {
            return Err(StoreError::ZeroNorm);
        }
        Ok(self
            .ids
            .iter()
            .zip(&self.vectors)
            .zip(&self.norms)
            .map(|((id, v), &n)| RetrievalResult {
                doc_id: id.clone(),
                // `+ 0.0` folds -0.0 into 0.0 so orthogonal entries tie on id.
                score: dot(query.as_slice(), v.as_slice()) / (qn * n) + 0.0,
            })
            .collect())
    }

    /// Exact top-k: sorted by score descending, ties by ascending doc id.
    pub fn search(
        &self,
        query: &EmbeddingVector,
        top_k: usize,
    ) -> Result<Vec<RetrievalResult>, StoreError> {
        if top_k == 0 {
            return Err(StoreError::ZeroTopK);
        }
        let mut scored = self.score_all(query)?;
        let k = top_k.min(scored.len());
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, rank_order);
            scored.truncate(k);
        }
        scored.sort_by(rank_order);
        Ok(scored)
    }

    pub fn to_snapshot_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(24 + self.len() * (self.dimension * 8 + 16));
        buf.extend_from_slice(SNAPSHOT_MAGIC);
        buf.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.dimension as u64).to_le_bytes());
        buf.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for (id, v) in self.iter() {
            buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
            buf.extend_from_slice(id.as_bytes());
            for x in v.as_slice() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_snapshot_bytes(bytes: &[u8]) -> Result<Self, StoreError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != SNAPSHOT_MAGIC {
            return Err(StoreError::Snapshot("bad magic".into()));
        }
        let version = u32::from_le_bytes(r.array()?);
        if version != SNAPSHOT_VERSION {
            return Err(StoreError::Snapshot(format!(
                "unsupported version {version}"
            )));
        }
        let dimension = u64::from_le_bytes(r.array()?) as usize;
        let count = u64::from_le_bytes(r.array()?) as usize;
        let mut store = Self::new(dimension);
        for _ in 0..count {
            let len = u32::from_le_bytes(r.array()?) as usize;
            let id = std::str::from_utf8(r.take(len)?)
                .map_err(|e| StoreError::Snapshot(e.to_string()))?
                .to_owned();
            let mut values = Vec::with_capacity(dimension);
            for _ in 0..dimension {
                values.push(f64::from_le_bytes(r.array()?));
            }
            store.insert(id, EmbeddingVector::new(values)?)?;
        }
        if r.pos != bytes.len() {
            return Err(StoreError::Snapshot("trailing bytes".into()));
        }
        Ok(store)
    }

    pub fn save_snapshot(&self, path: &Path) -> Result<(), StoreError> {
        Ok(io::write_atomic(path, &self.to_snapshot_bytes())?)
    }

    pub fn load_snapshot(path: &Path) -> Result<Self, StoreError> {
        let bytes = std::fs::read(path).map_err(|source| {
            StoreError::Io(IoError::Io {
                path: path.display().to_string(),
                source,
            })
        })?;
        Self::from_snapshot_bytes(&bytes)
    }

    /// Human-readable dump: `{"dimension", "entries": [{"id", "vector"}]}`.
    pub fn save_json_dump(&self, path: &Path) -> Result<(), StoreError> {
        #[derive(Serialize)]
        struct Entry<'a> {
            id: &'a str,
            vector: &'a EmbeddingVector,
        }
        #[derive(Serialize)]
        struct Dump<'a> {
            dimension: usize,
            entries: Vec<Entry<'a>>,
        }
        let dump = Dump {
            dimension: self.dimension,
            entries: self
                .iter()
                .map(|(id, vector)| Entry { id, vector })
                .collect(),
        };
        Ok(io::write_json_pretty(path, &dump)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], StoreError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| StoreError::Snapshot("truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], StoreError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::FrozenFeaturizer;
    use proptest::prelude::*;

    fn v(values: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(values.to_vec()).unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&v(&[1.0, 0.0]), &v(&[1.0, 0.0])).unwrap(), 1.0);
        assert_eq!(cosine(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
        let c = cosine(&v(&[1.0, 1.0]), &v(&[1.0, 0.0])).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
    }

    #[test]
    fn cosine_errors() {
        assert!(matches!(
            cosine(&v(&[0.0, 0.0]), &v(&[1.0, 0.0])),
            Err(StoreError::ZeroNorm)
        ));
        assert!(matches!(
            cosine(&v(&[1.0]), &v(&[1.0, 0.0])),
            Err(StoreError::DimensionMismatch { .. })
        ));
        assert!(EmbeddingVector::new(vec![f64::NAN]).is_err());
    }

    #[test]
    fn ingest_cardinality_and_errors() {
        let f = FrozenFeaturizer::new(8, 1);
        let docs = vec![
            Document::new("a", "one"),
            Document::new("b", "two"),
            Document::new("c", "three"),
        ];
        let store = VectorStore::ingest(&docs, &f).unwrap();
        assert_eq!((store.len(), store.dimension()), (3, 8));

        let dup = vec![Document::new("a", "one"), Document::new("a", "again")];
        let err = VectorStore::ingest(&dup, &f).unwrap_err();
        assert!(err.to_string().contains("\"a\""));
        assert!(matches!(
            VectorStore::ingest(&[], &f),
            Err(StoreError::Empty)
        ));
    }

    #[test]
    fn insert_rejects_wrong_dimension() {
        let mut store = VectorStore::new(2);
        assert!(store.insert("x".into(), v(&[1.0, 2.0, 3.0])).is_err());
    }

    #[test]
    fn search_truncates_to_store_size() {
        let mut store = VectorStore::new(2);
        store.insert("a".into(), v(&[1.0, 0.0])).unwrap();
        store.insert("b".into(), v(&[0.0, 1.0])).unwrap();
        assert_eq!(store.search(&v(&[1.0, 0.5]), 3).unwrap().len(), 2);
    }

    #[test]
    fn ties_break_by_id() {
        let mut store = VectorStore::new(2);
        store.insert("b".into(), v(&[1.0, 1.0])).unwrap();
        store.insert("a".into(), v(&[1.0, 1.0])).unwrap();
        let hits = store.search(&v(&[1.0, 0.0]), 2).unwrap();
        assert_eq!(hits[0].doc_id, "a");
        assert_eq!(hits[1].doc_id, "b");
    }

    #[test]
    fn snapshot_round_trip_and_corruption() {
        let mut store = VectorStore::new(3);
        store.insert("α".into(), v(&[1.0, -2.5, 3.25])).unwrap();
        store.insert("b".into(), v(&[0.1, 0.2, 0.3])).unwrap();
        let bytes = store.to_snapshot_bytes();
        assert_eq!(&bytes[..4], b"RFVS");
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 3);
        assert_eq!(u64::from_le_bytes(bytes[16..24].try_into().unwrap()), 2);
        let back = VectorStore::from_snapshot_bytes(&bytes).unwrap();
        assert_eq!(
            back.iter().collect::<Vec<_>>(),
            store.iter().collect::<Vec<_>>()
        );
        assert!(VectorStore::from_snapshot_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(VectorStore::from_snapshot_bytes(&bad).is_err());
    }

    fn arb_store() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>)> {
        (2usize..6).prop_flat_map(|d| {
            (
                prop::collection::vec(prop::collection::vec(-1.0f64..1.0, d), 1..40),
                prop::collection::vec(-1.0f64..1.0, d),
            )
        })
    }

    fn build(vectors: &[Vec<f64>]) -> Option<VectorStore> {
        let mut store = VectorStore::new(vectors[0].len());
        for (i, x) in vectors.iter().enumerate() {
            if l2_norm(x) == 0.0 {
                return None;
            }
            store.insert(format!("d{i:03}"), v(x)).unwrap();
        }
        Some(store)
    }

    proptest! {
        #[test]
        fn search_is_prefix_monotone((vectors, q) in arb_store(), k in 1usize..10) {
            prop_assume!(l2_norm(&q) > 0.0);
            let Some(store) = build(&vectors) else { return Ok(()) };
            let q = v(&q);
            let a = store.search(&q, k).unwrap();
            let b = store.search(&q, k + 1).unwrap();
            prop_assert_eq!(&b[..a.len()], &a[..]);
        }

        #[test]
        fn ranking_is_scale_invariant((vectors, q) in arb_store(), k in 1usize..10, c in 0.01f64..100.0) {
            prop_assume!(l2_norm(&q) > 0.0);
            let Some(store) = build(&vectors) else { return Ok(()) };
            let q = v(&q);
            let ids = |hits: Vec<RetrievalResult>| hits.into_iter().map(|h| h.doc_id).collect::<Vec<_>>();
            let base = store.search(&q, k).unwrap();
            let scaled = store.search(&q.scaled(c).unwrap(), k).unwrap();
            // Rescaling may move scores by an ulp, so compare rankings only
            // where neighbouring scores are separated.
            let full = store.search(&q, store.len()).unwrap();
            let separated = full.windows(2).take(k).all(|w| w[0].score - w[1].score > 1e-12);
            prop_assume!(separated);
            prop_assert_eq!(ids(base), ids(scaled));
        }
    }
}
