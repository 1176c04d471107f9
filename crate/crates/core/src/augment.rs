//! Training-set construction from unlabeled documents.
//!
//! Every document is embedded with the frozen encoder into a store. Each
//! document's generated queries are searched against that store, and hard
//! negatives are picked from the results: documents scoring inside a
//! similarity band but outside the top few ranks. The source document is the
//! positive.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Document, Query, TrainingTriple};
use crate::encoder::{Embedder, EncodeError};
use crate::querygen::{self, GenConfig, GenError, QueryGenerator};
use crate::vectorstore::{EmbeddingVector, StoreError, VectorStore};

#[derive(Debug, thiserror::Error)]
pub enum AugmentError {
    #[error("invalid mining config: {0}")]
    Config(String),
    #[error("positive document {0:?} is not in the store")]
    UnknownPositive(String),
    #[error("cannot build a dataset from zero documents")]
    NoDocuments,
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("embedding query {id:?}: {source}")]
    Embed {
        id: String,
        #[source]
        source: EncodeError,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NegativeMiningConfig {
    /// How many results to pull from the store per query.
    pub retrieve_depth: usize,
    /// Inclusive cosine band.
    pub band_low: f64,
    pub band_high: f64,
    /// Ranks `1..=exclude_top` are never negatives.
    pub exclude_top: usize,
    pub negatives_per_query: usize,
    /// Inclusive 1-based rank window used when the band is empty.
    pub fallback_rank_window: (usize, usize),
}

impl Default for NegativeMiningConfig {
    fn default() -> Self {
        Self {
            retrieve_depth: 50,
            band_low: 0.5,
            band_high: 0.7,
            exclude_top: 5,
            negatives_per_query: 5,
            fallback_rank_window: (6, 15),
        }
    }
}

impl NegativeMiningConfig {
    pub fn validate(&self) -> Result<(), AugmentError> {
        let bad = |m: String| Err(AugmentError::Config(m));
        if self.band_low.partial_cmp(&self.band_high) != Some(std::cmp::Ordering::Less) {
            return bad(format!(
                "band_low {} must be below band_high {}",
                self.band_low, self.band_high
            ));
        }
        if self.exclude_top >= self.retrieve_depth {
            return bad(format!(
                "exclude_top {} must be below retrieve_depth {}",
                self.exclude_top, self.retrieve_depth
            ));
        }
        if self.negatives_per_query == 0
            || self.negatives_per_query > self.retrieve_depth - self.exclude_top
        {
            return bad(format!(
                "negatives_per_query must lie in 1..={}",
                self.retrieve_depth - self.exclude_top
            ));
        }
        let (lo, hi) = self.fallback_rank_window;
        if lo == 0 || lo > hi {
            return bad(format!("bad fallback rank window {lo}..={hi}"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct NegativeSelection {
    pub doc_ids: Vec<String>,
    /// True when the band was empty and the rank window was used instead.
    pub used_fallback: bool,
}

/// Picks hard negatives for one query.
///
/// Candidates are scanned in retrieval order and kept when their rank is
/// past `exclude_top`, their score lies in `[band_low, band_high]` and they
/// are not the positive. With no such candidate, documents at ranks inside
/// `fallback_rank_window` (still excluding the positive) are used. Both paths
/// return at most `negatives_per_query` ids.
pub fn select_negatives(
    query: &EmbeddingVector,
    store: &VectorStore,
    positive_id: &str,
    cfg: &NegativeMiningConfig,
) -> Result<NegativeSelection, AugmentError> {
    cfg.validate()?;
    if !store.contains(positive_id) {
        return Err(AugmentError::UnknownPositive(positive_id.to_owned()));
    }
    if store.len() <= cfg.exclude_top {
        return Ok(NegativeSelection::default());
    }
    let (win_lo, win_hi) = cfg.fallback_rank_window;
    let results = store.search(query, cfg.retrieve_depth.max(win_hi))?;
    let m = cfg.negatives_per_query;

    let in_band: Vec<String> = results
        .iter()
        .take(cfg.retrieve_depth)
        .enumerate()
        .filter(|(i, r)| {
            i + 1 > cfg.exclude_top
                && r.score >= cfg.band_low
                && r.score <= cfg.band_high
                && r.doc_id != positive_id
        })
        .map(|(_, r)| r.doc_id.clone())
        .take(m)
        .collect();
    if !in_band.is_empty() {
        return Ok(NegativeSelection {
            doc_ids: in_band,
            used_fallback: false,
        });
    }

    let fallback = results
        .iter()
        .enumerate()
        .filter(|(i, r)| (win_lo..=win_hi).contains(&(i + 1)) && r.doc_id != positive_id)
        .map(|(_, r)| r.doc_id.clone())
        .take(m)
        .collect();
    Ok(NegativeSelection {
        doc_ids: fallback,
        used_fallback: true,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailedDocument {
    pub doc_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MiningReport {
    pub documents: usize,
    pub queries_generated: usize,
    pub triples_emitted: usize,
    pub band_fallbacks: usize,
    /// Queries dropped because neither the band nor the fallback had a candidate.
    pub dropped_no_negatives: usize,
    pub failed_documents: Vec<FailedDocument>,
}

/// Runs the full augmentation with the generator described by `gen_cfg`.
pub fn build_dataset<E: Embedder + ?Sized>(
    docs: &[Document],
    gen_cfg: &GenConfig,
    mine_cfg: &NegativeMiningConfig,
    embedder: &E,
) -> Result<(Vec<TrainingTriple>, MiningReport), AugmentError> {
    let generator = querygen::generator_for(gen_cfg)?;
    build_dataset_with(
        docs,
        generator.as_ref(),
        gen_cfg.queries_per_doc,
        gen_cfg.parallelism,
        mine_cfg,
        embedder,
    )
}

/// Same as [`build_dataset`] with an explicit generator.
///
/// Generation failures are recorded per document in the report and do not
/// abort the run. Triples come out in (document, query) order.
pub fn build_dataset_with<E: Embedder + ?Sized>(
    docs: &[Document],
    generator: &dyn QueryGenerator,
    queries_per_doc: usize,
    parallelism: usize,
    mine_cfg: &NegativeMiningConfig,
    embedder: &E,
) -> Result<(Vec<TrainingTriple>, MiningReport), AugmentError> {
    if docs.is_empty() {
        return Err(AugmentError::NoDocuments);
    }
    mine_cfg.validate()?;
    let store = VectorStore::ingest(docs, embedder)?;

    let mut report = MiningReport {
        documents: docs.len(),
        ..Default::default()
    };
    let mut queries: Vec<Query> = Vec::new();
    for (doc, result) in docs.iter().zip(querygen::generate_all(
        generator,
        docs,
        queries_per_doc,
        parallelism,
    )) {
        match result {
            Ok(qs) => queries.extend(qs),
            Err(e) => {
                log::warn!("skipping document {:?}: {e}", doc.id);
                report.failed_documents.push(FailedDocument {
                    doc_id: doc.id.clone(),
                    error: e.to_string(),
                });
            }
        }
    }
    report.queries_generated = queries.len();

    let mined: Vec<NegativeSelection> = queries
        .par_iter()
        .map(|q| {
            let v = embedder
                .embed(&q.text)
                .map_err(|source| AugmentError::Embed {
                    id: q.id.clone(),
                    source,
                })?;
            let positive = q
                .source_doc_id
                .as_deref()
                .expect("generated queries carry provenance");
            select_negatives(&v, &store, positive, mine_cfg)
        })
        .collect::<Result<_, _>>()?;

    let mut triples = Vec::with_capacity(queries.len());
    for (query, selection) in queries.into_iter().zip(mined) {
        if selection.doc_ids.is_empty() {
            report.dropped_no_negatives += 1;
            continue;
        }
        if selection.used_fallback {
            report.band_fallbacks += 1;
        }
        let positive_doc_id = query
            .source_doc_id
            .clone()
            .expect("generated queries carry provenance");
        triples.push(TrainingTriple {
            query,
            positive_doc_id,
            negative_doc_ids: selection.doc_ids,
        });
    }
    report.triples_emitted = triples.len();
    if report.dropped_no_negatives > 0 {
        log::info!(
            "dropped {} queries with no negatives",
            report.dropped_no_negatives
        );
    }
    Ok((triples, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::FrozenFeaturizer;

    /// Store whose cosine with the query `(1, 0)` is exactly the given score.
    fn banded_store(scores: &[f64]) -> (VectorStore, EmbeddingVector) {
        let mut store = VectorStore::new(2);
        for (i, &s) in scores.iter().enumerate() {
            let v = EmbeddingVector::new(vec![s, (1.0 - s * s).sqrt()]).unwrap();
            store.insert(format!("d{i}"), v).unwrap();
        }
        (store, EmbeddingVector::new(vec![1.0, 0.0]).unwrap())
    }

    const FIXTURE: [f64; 10] = [0.9, 0.8, 0.75, 0.72, 0.71, 0.69, 0.65, 0.55, 0.45, 0.2];

    #[test]
    fn fixture_picks_band_outside_top_five() {
        let (store, q) = banded_store(&FIXTURE);
        let sel = select_negatives(&q, &store, "d0", &NegativeMiningConfig::default()).unwrap();
        assert_eq!(sel.doc_ids, vec!["d5", "d6", "d7"]);
        assert!(!sel.used_fallback);
    }

    #[test]
    fn empty_band_uses_rank_window() {
        let scores: Vec<f64> = (0..20).map(|i| 0.45 - i as f64 * 0.02).collect();
        let (store, q) = banded_store(&scores);
        let sel = select_negatives(&q, &store, "d0", &NegativeMiningConfig::default()).unwrap();
        assert!(sel.used_fallback);
        assert_eq!(sel.doc_ids, vec!["d5", "d6", "d7", "d8", "d9"]);
    }

    #[test]
    fn positive_in_band_is_skipped() {
        let scores = [0.95, 0.9, 0.85, 0.8, 0.75, 0.68, 0.66, 0.6];
        let (store, q) = banded_store(&scores);
        // d6 sits at rank 7 with score 0.66.
        let sel = select_negatives(&q, &store, "d6", &NegativeMiningConfig::default()).unwrap();
        assert_eq!(sel.doc_ids, vec!["d5", "d7"]);
    }

    #[test]
    fn band_endpoints_are_inclusive() {
        let scores = [0.99, 0.98, 0.97, 0.96, 0.95, 0.7, 0.6, 0.5, 0.49];
        let (store, q) = banded_store(&scores);
        let actual = store.score_all(&q).unwrap();
        // Use the stored scores themselves as the band edges.
        let cfg = NegativeMiningConfig {
            band_low: actual[7].score,
            band_high: actual[5].score,
            ..Default::default()
        };
        let sel = select_negatives(&q, &store, "d0", &cfg).unwrap();
        assert_eq!(sel.doc_ids, vec!["d5", "d6", "d7"]);
    }

    #[test]
    fn unknown_positive_is_an_error() {
        let (store, q) = banded_store(&FIXTURE);
        assert!(matches!(
            select_negatives(&q, &store, "nope", &NegativeMiningConfig::default()),
            Err(AugmentError::UnknownPositive(_))
        ));
    }

    #[test]
    fn config_validation() {
        assert!(NegativeMiningConfig {
            band_low: 0.7,
            band_high: 0.5,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(NegativeMiningConfig {
            exclude_top: 50,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(NegativeMiningConfig {
            negatives_per_query: 46,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(NegativeMiningConfig {
            fallback_rank_window: (0, 3),
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn single_document_yields_no_triples() {
        let f = FrozenFeaturizer::new(32, 1);
        let docs = vec![Document::new(
            "only",
            "a lonely document about nothing much",
        )];
        let (triples, report) = build_dataset(
            &docs,
            &GenConfig::offline(1),
            &NegativeMiningConfig::default(),
            &f,
        )
        .unwrap();
        assert!(triples.is_empty());
        assert_eq!(report.dropped_no_negatives, report.queries_generated);
        assert!(report.queries_generated > 0);
    }

    #[test]
    fn failed_documents_are_reported_not_fatal() {
        struct Picky;
        impl QueryGenerator for Picky {
            fn candidates(&self, doc: &Document) -> Result<Vec<String>, GenError> {
                if doc.id == "bad" {
                    Err(GenError::Transport {
                        attempts: 1,
                        message: "down".into(),
                    })
                } else {
                    Ok(vec![format!("about {}", doc.text)])
                }
            }
        }
        let f = FrozenFeaturizer::new(32, 1);
        let mut docs: Vec<Document> = (0..12)
            .map(|i| Document::new(format!("d{i}"), format!("text {i}")))
            .collect();
        docs.push(Document::new("bad", "broken"));
        let (_, report) =
            build_dataset_with(&docs, &Picky, 10, 2, &NegativeMiningConfig::default(), &f).unwrap();
        assert_eq!(report.failed_documents.len(), 1);
        assert_eq!(report.failed_documents[0].doc_id, "bad");
        assert_eq!(report.queries_generated, 12);
    }
}
