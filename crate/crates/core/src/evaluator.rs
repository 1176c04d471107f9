//! Ranked-retrieval metrics with binary relevance.
//!
//! AP is normalized by the number of relevant documents (TREC convention),
//! so with a single relevant document MAP@k and MRR@k coincide.

use std::collections::{BTreeMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Query;
use crate::encoder::{Embedder, EncodeError};
use crate::vectorstore::{StoreError, VectorStore};

pub const DEFAULT_KS: [usize; 5] = [1, 2, 3, 4, 5];

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("relevant set is empty")]
    EmptyRelevant,
    #[error("cutoff k must be positive")]
    ZeroK,
    #[error("no cutoffs requested")]
    NoCutoffs,
    #[error("queries with missing or unknown gold labels: {}", .0.join(", "))]
    BadGold(Vec<String>),
    #[error("embedding query {id:?}: {source}")]
    Embed {
        id: String,
        #[source]
        source: EncodeError,
    },
    #[error(transparent)]
    Store(#[from] StoreError),
}

fn check(relevant: &HashSet<String>, k: usize) -> Result<(), EvalError> {
    if relevant.is_empty() {
        return Err(EvalError::EmptyRelevant);
    }
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    Ok(())
}

fn is_rel<S: AsRef<str>>(relevant: &HashSet<String>, id: &S) -> bool {
    relevant.contains(id.as_ref())
}

pub fn average_precision_at_k<S: AsRef<str>>(
    ranked: &[S],
    relevant: &HashSet<String>,
    k: usize,
) -> Result<f64, EvalError> {
    check(relevant, k)?;
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, id) in ranked.iter().take(k).enumerate() {
        if is_rel(relevant, id) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(sum / relevant.len() as f64)
}

pub fn ndcg_at_k<S: AsRef<str>>(
    ranked: &[S],
    relevant: &HashSet<String>,
    k: usize,
) -> Result<f64, EvalError> {
    check(relevant, k)?;
    let discount = |i: usize| 1.0 / ((i + 2) as f64).log2();
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, id)| is_rel(relevant, id))
        .map(|(i, _)| discount(i))
        .sum();
    let idcg: f64 = (0..relevant.len().min(k)).map(discount).sum();
    Ok(dcg / idcg)
}

pub fn mrr_at_k<S: AsRef<str>>(
    ranked: &[S],
    relevant: &HashSet<String>,
    k: usize,
) -> Result<f64, EvalError> {
    check(relevant, k)?;
    Ok(ranked
        .iter()
        .take(k)
        .position(|id| is_rel(relevant, id))
        .map_or(0.0, |i| 1.0 / (i + 1) as f64))
}

pub fn recall_at_k<S: AsRef<str>>(
    ranked: &[S],
    relevant: &HashSet<String>,
    k: usize,
) -> Result<f64, EvalError> {
    check(relevant, k)?;
    let hits = ranked
        .iter()
        .take(k)
        .filter(|id| is_rel(relevant, id))
        .count();
    Ok(hits as f64 / relevant.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricValues {
    pub map: f64,
    pub ndcg: f64,
    pub mrr: f64,
    pub recall: f64,
}

impl MetricValues {
    pub fn compute<S: AsRef<str>>(
        ranked: &[S],
        relevant: &HashSet<String>,
        k: usize,
    ) -> Result<Self, EvalError> {
        Ok(Self {
            map: average_precision_at_k(ranked, relevant, k)?,
            ndcg: ndcg_at_k(ranked, relevant, k)?,
            mrr: mrr_at_k(ranked, relevant, k)?,
            recall: recall_at_k(ranked, relevant, k)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: String,
    pub num_queries: usize,
    pub config_hash: String,
    pub per_k: BTreeMap<usize, MetricValues>,
}

impl MetricsReport {
    pub fn at(&self, k: usize) -> Option<&MetricValues> {
        self.per_k.get(&k)
    }
}

/// Per-query ranked ids, exposed so callers can inspect individual rankings.
pub fn rank_queries<E: Embedder + ?Sized>(
    queries: &[Query],
    store: &VectorStore,
    embedder: &E,
    depth: usize,
) -> Result<Vec<Vec<String>>, EvalError> {
    queries
        .par_iter()
        .map(|q| {
            let v = embedder.embed(&q.text).map_err(|source| EvalError::Embed {
                id: q.id.clone(),
                source,
            })?;
            Ok(store
                .search(&v, depth)?
                .into_iter()
                .map(|r| r.doc_id)
                .collect())
        })
        .collect()
}

/// Retrieves `max(ks)` documents once per query and averages every metric at
/// every cutoff over the queries.
pub fn evaluate<E: Embedder + ?Sized>(
    queries: &[Query],
    store: &VectorStore,
    embedder: &E,
    ks: &[usize],
    mode: &str,
    config_hash: &str,
) -> Result<MetricsReport, EvalError> {
    let depth = *ks.iter().max().ok_or(EvalError::NoCutoffs)?;
    if ks.contains(&0) {
        return Err(EvalError::ZeroK);
    }
    let bad: Vec<String> = queries
        .iter()
        .filter(|q| q.gold_doc_ids.is_empty() || q.gold_doc_ids.iter().any(|g| !store.contains(g)))
        .map(|q| q.id.clone())
        .collect();
    if !bad.is_empty() {
        return Err(EvalError::BadGold(bad));
    }

    let rankings = rank_queries(queries, store, embedder, depth)?;
    let mut per_k = BTreeMap::new();
    for &k in ks {
        let mut total = MetricValues::default();
        for (q, ranked) in queries.iter().zip(&rankings) {
            let relevant: HashSet<String> = q.gold_doc_ids.iter().cloned().collect();
            let m = MetricValues::compute(ranked, &relevant, k)?;
            total.map += m.map;
            total.ndcg += m.ndcg;
            total.mrr += m.mrr;
            total.recall += m.recall;
        }
        let n = queries.len().max(1) as f64;
        per_k.insert(
            k,
            MetricValues {
                map: total.map / n,
                ndcg: total.ndcg / n,
                mrr: total.mrr / n,
                recall: total.recall / n,
            },
        );
    }
    Ok(MetricsReport {
        mode: mode.to_owned(),
        num_queries: queries.len(),
        config_hash: config_hash.to_owned(),
        per_k,
    })
}

/// Markdown grid: one row per report, `MAP@k NDCG@k MRR@k Recall@k` columns
/// for every requested k.
pub fn render_markdown(reports: &[MetricsReport], ks: &[usize]) -> String {
    let mut out = String::from("| Mode |");
    let mut rule = String::from("|---|");
    for k in ks {
        for name in ["MAP", "NDCG", "MRR", "Recall"] {
            out.push_str(&format!(" {name}@{k} |"));
            rule.push_str("---|");
        }
    }
    out.push('\n');
    out.push_str(&rule);
    out.push('\n');
    for r in reports {
        out.push_str(&format!("| {} |", r.mode));
        for k in ks {
            match r.at(*k) {
                Some(m) => {
                    for v in [m.map, m.ndcg, m.mrr, m.recall] {
                        out.push_str(&format!(" {v:.3} |"));
                    }
                }
                None => out.push_str(" - | - | - | - |"),
            }
        }
        out.push('\n');
    }
    out
}
