//! Documents, queries, training triples and their line-delimited JSON files.
//!
//! File layouts, one JSON object per line:
//!
//! * `documents.jsonl`: `{"id", "text"}`
//! * `queries.jsonl`: `{"id", "text", "source_doc_id"?, "gold_doc_ids"}`
//! * `triples.jsonl`: `{"query_id", "query_text", "positive_doc_id", "negative_doc_ids"}`

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::io::{self, IoError};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("duplicate id {id:?} at line {line}")]
    DuplicateId { id: String, line: usize },
    #[error("record {id:?} at line {line} has empty text")]
    EmptyText { id: String, line: usize },
    #[error("{what} {id:?} references unknown document {doc_id:?}")]
    UnknownDocument {
        what: &'static str,
        id: String,
        doc_id: String,
    },
    #[error("triple for query {query_id:?} is malformed: {reason}")]
    MalformedTriple { query_id: String, reason: String },
    #[error("validation fraction must lie in [0, 1), got {0}")]
    BadFraction(f64),
    #[error("cannot split an empty triple list")]
    EmptySplit,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
}

impl Document {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub text: String,
    /// Set when the query was generated from a document.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_doc_id: Option<String>,
    /// Relevance labels for evaluation.
    #[serde(default)]
    pub gold_doc_ids: Vec<String>,
}

/// A query, the document it should retrieve, and documents it should not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "TripleRecord", from = "TripleRecord")]
pub struct TrainingTriple {
    pub query: Query,
    pub positive_doc_id: String,
    pub negative_doc_ids: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TripleRecord {
    query_id: String,
    query_text: String,
    positive_doc_id: String,
    negative_doc_ids: Vec<String>,
}

impl From<TrainingTriple> for TripleRecord {
    fn from(t: TrainingTriple) -> Self {
        Self {
            query_id: t.query.id,
            query_text: t.query.text,
            positive_doc_id: t.positive_doc_id,
            negative_doc_ids: t.negative_doc_ids,
        }
    }
}

impl From<TripleRecord> for TrainingTriple {
    fn from(r: TripleRecord) -> Self {
        Self {
            query: Query {
                id: r.query_id,
                text: r.query_text,
                source_doc_id: Some(r.positive_doc_id.clone()),
                gold_doc_ids: vec![r.positive_doc_id.clone()],
            },
            positive_doc_id: r.positive_doc_id,
            negative_doc_ids: r.negative_doc_ids,
        }
    }
}

impl TrainingTriple {
    /// Document the triple's query was generated from; splits group on this.
    pub fn source_doc_id(&self) -> &str {
        self.query
            .source_doc_id
            .as_deref()
            .unwrap_or(&self.positive_doc_id)
    }

    pub fn validate(&self, corpus: &Corpus) -> Result<(), CorpusError> {
        let malformed = |reason: String| CorpusError::MalformedTriple {
            query_id: self.query.id.clone(),
            reason,
        };
        if self.negative_doc_ids.contains(&self.positive_doc_id) {
            return Err(malformed(format!(
                "positive {:?} listed as a negative",
                self.positive_doc_id
            )));
        }
        let mut seen = HashSet::new();
        for id in &self.negative_doc_ids {
            if !seen.insert(id) {
                return Err(malformed(format!("duplicate negative {id:?}")));
            }
        }
        for id in std::iter::once(&self.positive_doc_id).chain(&self.negative_doc_ids) {
            if !corpus.contains(id) {
                return Err(CorpusError::UnknownDocument {
                    what: "triple",
                    id: self.query.id.clone(),
                    doc_id: id.clone(),
                });
            }
        }
        Ok(())
    }
}

/// Validated document collection with id lookup.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    documents: Vec<Document>,
    index: HashMap<String, usize>,
}

impl Corpus {
    pub fn new(documents: Vec<Document>) -> Result<Self, CorpusError> {
        let mut index = HashMap::with_capacity(documents.len());
        for (i, doc) in documents.iter().enumerate() {
            if doc.text.is_empty() {
                return Err(CorpusError::EmptyText {
                    id: doc.id.clone(),
                    line: i + 1,
                });
            }
            if index.insert(doc.id.clone(), i).is_some() {
                return Err(CorpusError::DuplicateId {
                    id: doc.id.clone(),
                    line: i + 1,
                });
            }
        }
        Ok(Self { documents, index })
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn get(&self, id: &str) -> Option<&Document> {
        self.index.get(id).map(|&i| &self.documents[i])
    }

    pub fn into_documents(self) -> Vec<Document> {
        self.documents
    }

    /// Checks provenance and gold labels of every query against this corpus.
    pub fn validate_queries(&self, queries: &[Query]) -> Result<(), CorpusError> {
        let mut seen = HashSet::new();
        for (i, q) in queries.iter().enumerate() {
            if q.text.is_empty() {
                return Err(CorpusError::EmptyText {
                    id: q.id.clone(),
                    line: i + 1,
                });
            }
            if !seen.insert(q.id.as_str()) {
                return Err(CorpusError::DuplicateId {
                    id: q.id.clone(),
                    line: i + 1,
                });
            }
            for doc_id in q.source_doc_id.iter().chain(&q.gold_doc_ids) {
                if !self.contains(doc_id) {
                    return Err(CorpusError::UnknownDocument {
                        what: "query",
                        id: q.id.clone(),
                        doc_id: doc_id.clone(),
                    });
                }
            }
        }
        Ok(())
    }
}

pub fn load_corpus(path: &Path) -> Result<Vec<Document>, CorpusError> {
    let records: Vec<(usize, Document)> = io::read_jsonl(path)?;
    let mut seen = HashSet::with_capacity(records.len());
    let mut docs = Vec::with_capacity(records.len());
    for (line, doc) in records {
        if doc.text.is_empty() {
            return Err(CorpusError::EmptyText { id: doc.id, line });
        }
        if !seen.insert(doc.id.clone()) {
            return Err(CorpusError::DuplicateId { id: doc.id, line });
        }
        docs.push(doc);
    }
    Ok(docs)
}

pub fn write_corpus(path: &Path, docs: &[Document]) -> Result<(), CorpusError> {
    Ok(io::write_jsonl(path, docs)?)
}

pub fn load_queries(path: &Path) -> Result<Vec<Query>, CorpusError> {
    let records: Vec<(usize, Query)> = io::read_jsonl(path)?;
    let mut seen = HashSet::with_capacity(records.len());
    let mut queries = Vec::with_capacity(records.len());
    for (line, q) in records {
        if q.text.is_empty() {
            return Err(CorpusError::EmptyText { id: q.id, line });
        }
        if !seen.insert(q.id.clone()) {
            return Err(CorpusError::DuplicateId { id: q.id, line });
        }
        queries.push(q);
    }
    Ok(queries)
}

pub fn write_queries(path: &Path, queries: &[Query]) -> Result<(), CorpusError> {
    Ok(io::write_jsonl(path, queries)?)
}

pub fn load_triples(path: &Path) -> Result<Vec<TrainingTriple>, CorpusError> {
    let records: Vec<(usize, TrainingTriple)> = io::read_jsonl(path)?;
    Ok(records.into_iter().map(|(_, t)| t).collect())
}

pub fn write_triples(path: &Path, triples: &[TrainingTriple]) -> Result<(), CorpusError> {
    Ok(io::write_jsonl(path, triples)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            validation_fraction: 0.15,
            seed: 0,
        }
    }
}

/// Splits triples into (train, validation) keeping every source document's
/// triples in one partition.
///
/// Groups are shuffled with the seed, then a subset of groups whose sizes sum
/// to `floor(fraction * n)` is chosen by subset-sum over the shuffled order.
/// When no subset hits the target exactly, the largest reachable size below
/// it is used. Both partitions keep the input order.
pub fn split_triples(
    triples: &[TrainingTriple],
    spec: &SplitSpec,
) -> Result<(Vec<TrainingTriple>, Vec<TrainingTriple>), CorpusError> {
    if !(0.0..1.0).contains(&spec.validation_fraction) {
        return Err(CorpusError::BadFraction(spec.validation_fraction));
    }
    if triples.is_empty() {
        return Err(CorpusError::EmptySplit);
    }
    let target = (spec.validation_fraction * triples.len() as f64).floor() as usize;

    // BTreeMap keeps group enumeration independent of hash seeds.
    let mut groups: BTreeMap<&str, usize> = BTreeMap::new();
    for t in triples {
        *groups.entry(t.source_doc_id()).or_default() += 1;
    }
    let mut order: Vec<(&str, usize)> = groups.into_iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));

    let chosen = choose_groups(&order, target);
    let validation_groups: HashSet<&str> = chosen.into_iter().map(|i| order[i].0).collect();

    let (mut train, mut val) = (Vec::new(), Vec::new());
    for t in triples {
        if validation_groups.contains(t.source_doc_id()) {
            val.push(t.clone());
        } else {
            train.push(t.clone());
        }
    }
    Ok((train, val))
}

/// Subset-sum over group sizes: indices of groups whose sizes add up to the
/// largest reachable total not exceeding `target`.
fn choose_groups(groups: &[(&str, usize)], target: usize) -> Vec<usize> {
    if target == 0 {
        return Vec::new();
    }
    // reach[g][s]: sum s is reachable using the first g groups.
    let width = target + 1;
    let mut reach = vec![false; (groups.len() + 1) * width];
    reach[0] = true;
    for (g, &(_, size)) in groups.iter().enumerate() {
        let (prev, next) = reach.split_at_mut((g + 1) * width);
        let prev = &prev[g * width..];
        let next = &mut next[..width];
        for s in 0..width {
            next[s] = prev[s] || (s >= size && prev[s - size]);
        }
    }
    let last = &reach[groups.len() * width..];
    let mut sum = (0..width).rev().find(|&s| last[s]).unwrap_or(0);
    let mut chosen = Vec::new();
    for g in (1..=groups.len()).rev() {
        if reach[(g - 1) * width + sum] {
            continue;
        }
        chosen.push(g - 1);
        sum -= groups[g - 1].1;
    }
    chosen.reverse();
    chosen
}
