//! Pipeline stages. Every file is written atomically and depends only on the
//! inputs and the configuration, so repeated runs give identical bytes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use refine_core::corpus::{self, split_triples};
use refine_core::encoder::HeadCheckpoint;
use refine_core::evaluator::render_markdown;
use refine_core::io::{sha256_hex, to_jsonl, write_json_pretty};
use refine_core::trainer::TrainingHistory;
use refine_core::{
    build_dataset, evaluate, generate_corpus, train, Corpus, Document, FusedEncoder, MetricValues,
    MetricsReport, Query, SplitSpec, TrainMode, TrainingTriple, VectorStore,
};
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::CliError;

pub const DOCUMENTS_FILE: &str = "documents.jsonl";
pub const QUERIES_FILE: &str = "queries.jsonl";
pub const TRIPLES_FILE: &str = "triples.jsonl";
pub const TRAIN_TRIPLES_FILE: &str = "train_triples.jsonl";
pub const VAL_TRIPLES_FILE: &str = "val_triples.jsonl";

pub fn head_path(out: &Path, mode: TrainMode) -> PathBuf {
    out.join(format!("head_{mode}.json"))
}

pub fn metrics_path(out: &Path, mode: TrainMode) -> PathBuf {
    out.join(format!("metrics_{mode}.json"))
}

fn create_dir(out: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn load_docs(path: &Path) -> anyhow::Result<Corpus> {
    let docs = corpus::load_corpus(path)?;
    if docs.is_empty() {
        bail!("{} holds no documents", path.display());
    }
    Ok(Corpus::new(docs)?)
}

fn load_labeled_queries(path: &Path, corpus: &Corpus) -> anyhow::Result<Vec<Query>> {
    let queries = corpus::load_queries(path)?;
    corpus.validate_queries(&queries)?;
    if queries.is_empty() {
        bail!("{} holds no queries", path.display());
    }
    Ok(queries)
}

/// Hash over data contents, featurizer and cutoffs; never over file paths.
pub fn eval_config_hash(
    cfg: &PipelineConfig,
    docs: &[Document],
    queries: &[Query],
) -> anyhow::Result<String> {
    let mut bytes = to_jsonl(docs)?;
    bytes.extend(to_jsonl(queries)?);
    bytes.extend(serde_json::to_vec(&cfg.featurizer)?);
    bytes.extend(serde_json::to_vec(&cfg.eval.ks)?);
    Ok(sha256_hex(&bytes))
}

fn train_config_hash(
    cfg: &PipelineConfig,
    mode: TrainMode,
    triples: &[TrainingTriple],
) -> anyhow::Result<String> {
    let mut bytes = to_jsonl(triples)?;
    bytes.extend(serde_json::to_vec(&cfg.featurizer)?);
    bytes.extend(serde_json::to_vec(&cfg.train_config(mode))?);
    Ok(sha256_hex(&bytes))
}

pub fn synth(cfg: &PipelineConfig, out: &Path) -> anyhow::Result<()> {
    create_dir(out)?;
    let (docs, queries) = generate_corpus(&cfg.synth)?;
    corpus::write_corpus(&out.join(DOCUMENTS_FILE), &docs)?;
    corpus::write_queries(&out.join(QUERIES_FILE), &queries)?;
    log::info!(
        "wrote {} documents and {} queries to {}",
        docs.len(),
        queries.len(),
        out.display()
    );
    Ok(())
}

/// Frozen-featurizer store plus its binary snapshot and JSON dump.
pub fn ingest(cfg: &PipelineConfig, docs_path: &Path, out: &Path) -> anyhow::Result<()> {
    create_dir(out)?;
    let corpus = load_docs(docs_path)?;
    let store = VectorStore::ingest(corpus.documents(), &cfg.featurizer)?;
    store.save_snapshot(&out.join("store.bin"))?;
    store.save_json_dump(&out.join("store.json"))?;
    log::info!("ingested {} documents", store.len());
    Ok(())
}

pub fn augment(cfg: &PipelineConfig, docs_path: &Path, out: &Path) -> Result<(), CliError> {
    create_dir(out).map_err(CliError::runtime)?;
    let corpus = load_docs(docs_path).map_err(CliError::runtime)?;
    let (triples, report) = build_dataset(
        corpus.documents(),
        &cfg.generation,
        &cfg.mining,
        &cfg.featurizer,
    )
    .map_err(|e| CliError::runtime(e.into()))?;
    write_json_pretty(&out.join("mining_report.json"), &report)
        .map_err(|e| CliError::runtime(e.into()))?;
    if triples.is_empty() {
        return Err(CliError::runtime(anyhow::anyhow!(
            "no triples produced ({} documents failed generation, {} queries had no negatives)",
            report.failed_documents.len(),
            report.dropped_no_negatives
        )));
    }
    let split = SplitSpec {
        validation_fraction: cfg.split.validation_fraction,
        seed: cfg.split_seed(),
    };
    let (train_set, val_set) =
        split_triples(&triples, &split).map_err(|e| CliError::runtime(e.into()))?;
    let write = |name: &str, t: &[TrainingTriple]| corpus::write_triples(&out.join(name), t);
    write(TRIPLES_FILE, &triples)
        .and_then(|_| write(TRAIN_TRIPLES_FILE, &train_set))
        .and_then(|_| write(VAL_TRIPLES_FILE, &val_set))
        .map_err(|e| CliError::runtime(e.into()))?;
    log::info!(
        "{} triples ({} train, {} validation); {} band fallbacks, {} failed documents",
        triples.len(),
        train_set.len(),
        val_set.len(),
        report.band_fallbacks,
        report.failed_documents.len()
    );
    Ok(())
}

/// Trains one mode from `out/train_triples.jsonl`. Vanilla needs no triples.
pub fn train_mode(
    cfg: &PipelineConfig,
    docs_path: &Path,
    out: &Path,
    mode: TrainMode,
) -> anyhow::Result<()> {
    create_dir(out)?;
    let train_cfg = cfg.train_config(mode);
    let (triples, corpus) = if mode == TrainMode::Vanilla {
        (Vec::new(), Corpus::new(Vec::new())?)
    } else {
        let corpus = load_docs(docs_path)?;
        (corpus::load_triples(&out.join(TRAIN_TRIPLES_FILE))?, corpus)
    };
    let outcome = train(&triples, &corpus, &cfg.featurizer, &train_cfg)?;
    let hash = train_config_hash(cfg, mode, &triples)?;
    HeadCheckpoint::new(
        mode,
        outcome.inference_lambda,
        cfg.featurizer.clone(),
        outcome.head,
        hash,
    )
    .save(&head_path(out, mode))?;
    let history = TrainingHistory {
        mode,
        config: train_cfg,
        num_triples: triples.len(),
        epochs: outcome.history,
    };
    write_json_pretty(&out.join(format!("training_history_{mode}.json")), &history)?;
    if let (Some(first), Some(last)) = (history.epochs.first(), history.epochs.last()) {
        log::info!("{mode}: loss {:.4} -> {:.4}", first.value, last.value);
    }
    Ok(())
}

/// Loads a checkpoint and insists it matches what the config would infer with.
pub fn load_encoder(
    cfg: &PipelineConfig,
    out: &Path,
    mode: TrainMode,
) -> Result<FusedEncoder, CliError> {
    let path = head_path(out, mode);
    let ckpt = HeadCheckpoint::load(&path).map_err(|e| CliError::runtime(e.into()))?;
    let expected = cfg.train_config(mode).inference_lambda();
    if ckpt.mode != mode {
        return Err(CliError::usage(anyhow::anyhow!(
            "{} holds a {} checkpoint, not {mode}",
            path.display(),
            ckpt.mode
        )));
    }
    if ckpt.lambda != expected {
        return Err(CliError::usage(anyhow::anyhow!(
            "{} was trained with lambda {} but the config infers {mode} with lambda {expected}",
            path.display(),
            ckpt.lambda
        )));
    }
    if ckpt.featurizer != cfg.featurizer {
        return Err(CliError::usage(anyhow::anyhow!(
            "{} was trained with a different featurizer than the config describes",
            path.display()
        )));
    }
    ckpt.encoder().map_err(|e| CliError::runtime(e.into()))
}

fn evaluate_with(
    cfg: &PipelineConfig,
    encoder: &FusedEncoder,
    corpus: &Corpus,
    queries: &[Query],
    mode: TrainMode,
) -> anyhow::Result<MetricsReport> {
    let store = VectorStore::ingest(corpus.documents(), encoder)?;
    let hash = eval_config_hash(cfg, corpus.documents(), queries)?;
    Ok(evaluate(
        queries,
        &store,
        encoder,
        &cfg.eval.ks,
        mode.as_str(),
        &hash,
    )?)
}

pub fn eval_mode(
    cfg: &PipelineConfig,
    docs_path: &Path,
    queries_path: &Path,
    out: &Path,
    mode: TrainMode,
) -> Result<MetricsReport, CliError> {
    let encoder = load_encoder(cfg, out, mode)?;
    let run = || -> anyhow::Result<MetricsReport> {
        let corpus = load_docs(docs_path)?;
        let queries = load_labeled_queries(queries_path, &corpus)?;
        let report = evaluate_with(cfg, &encoder, &corpus, &queries, mode)?;
        write_json_pretty(&metrics_path(out, mode), &report)?;
        refine_core::io::write_atomic(
            &out.join(format!("metrics_{mode}.md")),
            render_markdown(std::slice::from_ref(&report), &cfg.eval.ks).as_bytes(),
        )?;
        Ok(report)
    };
    run().map_err(CliError::runtime)
}

/// Combines every `metrics_{mode}.json` in `out` into `metrics.md`.
pub fn compare(cfg: &PipelineConfig, out: &Path) -> anyhow::Result<Vec<MetricsReport>> {
    let mut reports = Vec::new();
    for mode in TrainMode::ALL {
        let path = metrics_path(out, mode);
        if path.exists() {
            let bytes =
                std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
            reports.push(serde_json::from_slice::<MetricsReport>(&bytes)?);
        }
    }
    if reports.is_empty() {
        bail!("no metrics_<mode>.json files in {}", out.display());
    }
    let hashes: std::collections::BTreeSet<&str> =
        reports.iter().map(|r| r.config_hash.as_str()).collect();
    if hashes.len() > 1 {
        log::warn!(
            "metrics in {} were computed on different data or settings",
            out.display()
        );
    }
    refine_core::io::write_atomic(
        &out.join("metrics.md"),
        render_markdown(&reports, &cfg.eval.ks).as_bytes(),
    )?;
    Ok(reports)
}

pub fn run_all(
    cfg: &PipelineConfig,
    docs_path: &Path,
    queries_path: &Path,
    out: &Path,
) -> Result<(), CliError> {
    ingest(cfg, docs_path, out).map_err(CliError::runtime)?;
    augment(cfg, docs_path, out)?;
    for &mode in &cfg.eval.modes {
        train_mode(cfg, docs_path, out, mode).map_err(CliError::runtime)?;
        eval_mode(cfg, docs_path, queries_path, out, mode)?;
    }
    compare(cfg, out).map_err(CliError::runtime)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodRow {
    pub mode: TrainMode,
    pub in_domain: MetricValues,
    pub out_of_domain: MetricValues,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodReport {
    pub k: usize,
    pub in_domain_hash: String,
    pub out_of_domain_hash: String,
    pub rows: Vec<OodRow>,
    /// `None` when either mode was not run.
    pub refine_ge_finetune: Option<bool>,
}

fn render_ood(report: &OodReport) -> String {
    let k = report.k;
    let mut md = format!(
        "| Mode | In-domain MAP@{k} | In-domain NDCG@{k} | In-domain MRR@{k} | In-domain Recall@{k} \
         | OOD MAP@{k} | OOD NDCG@{k} | OOD MRR@{k} | OOD Recall@{k} |\n|---|---|---|---|---|---|---|---|---|\n"
    );
    for row in &report.rows {
        let (a, b) = (&row.in_domain, &row.out_of_domain);
        md.push_str(&format!(
            "| {} | {:.3} | {:.3} | {:.3} | {:.3} | {:.3} | {:.3} | {:.3} | {:.3} |\n",
            row.mode, a.map, a.ndcg, a.mrr, a.recall, b.map, b.ndcg, b.mrr, b.recall
        ));
    }
    match report.refine_ge_finetune {
        Some(true) => md.push_str(&format!(
            "\nrefine OOD Recall@{k} >= finetune OOD Recall@{k}\n"
        )),
        Some(false) => md.push_str(&format!(
            "\nFLAG: refine OOD Recall@{k} < finetune OOD Recall@{k}\n"
        )),
        None => {}
    }
    md
}

/// Trains on `source` (a directory with documents.jsonl and queries.jsonl) and
/// evaluates every mode on both `source` and `target`.
pub fn run_ood(
    cfg: &PipelineConfig,
    source: &Path,
    target: &Path,
    out: &Path,
) -> Result<OodReport, CliError> {
    let train_dir = out.join("in_domain");
    run_all(
        cfg,
        &source.join(DOCUMENTS_FILE),
        &source.join(QUERIES_FILE),
        &train_dir,
    )?;

    let (target_corpus, target_queries) = (|| -> anyhow::Result<_> {
        let corpus = load_docs(&target.join(DOCUMENTS_FILE))?;
        let queries = load_labeled_queries(&target.join(QUERIES_FILE), &corpus)?;
        Ok((corpus, queries))
    })()
    .map_err(CliError::runtime)?;

    let k = cfg.ood.flag_k;
    let mut rows = Vec::new();
    let mut in_hash = String::new();
    let mut out_hash = String::new();
    let mut recall = BTreeMap::new();
    for &mode in &cfg.eval.modes {
        let in_report = {
            let bytes = std::fs::read(metrics_path(&train_dir, mode))
                .map_err(|e| CliError::runtime(e.into()))?;
            serde_json::from_slice::<MetricsReport>(&bytes)
                .map_err(|e| CliError::runtime(e.into()))?
        };
        let encoder = load_encoder(cfg, &train_dir, mode)?;
        let ood = evaluate_with(cfg, &encoder, &target_corpus, &target_queries, mode)
            .map_err(CliError::runtime)?;
        in_hash = in_report.config_hash.clone();
        out_hash = ood.config_hash.clone();
        let row = OodRow {
            mode,
            in_domain: *in_report
                .at(k)
                .expect("flag_k is validated against eval.ks"),
            out_of_domain: *ood.at(k).expect("flag_k is validated against eval.ks"),
        };
        recall.insert(mode, row.out_of_domain.recall);
        rows.push(row);
    }
    let refine_ge_finetune = match (
        recall.get(&TrainMode::Refine),
        recall.get(&TrainMode::Finetune),
    ) {
        (Some(r), Some(f)) => Some(r >= f),
        _ => None,
    };
    let report = OodReport {
        k,
        in_domain_hash: in_hash,
        out_of_domain_hash: out_hash,
        rows,
        refine_ge_finetune,
    };
    write_json_pretty(&out.join("ood_report.json"), &report)
        .map_err(|e| CliError::runtime(e.into()))?;
    refine_core::io::write_atomic(&out.join("ood_report.md"), render_ood(&report).as_bytes())
        .map_err(|e| CliError::runtime(e.into()))?;
    if refine_ge_finetune == Some(false) {
        log::warn!("refine OOD Recall@{k} is below finetune's");
    }
    Ok(report)
}
