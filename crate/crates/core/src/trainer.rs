//! Contrastive fine-tuning of the trainable head.
//!
//! Every text in a triple is embedded with the fused encoder
//! `e = λ·head(f) + (1 − λ)·f`; the per-triple objective is
//!
//! ```text
//! L = −log( exp(s⁺/τ) / (exp(s⁺/τ) + Σᵢ exp(sᵢ⁻/τ)) )
//! ```
//!
//! with `s` the cosine between the fused query embedding and the fused
//! document embeddings. Gradients with respect to the head are derived by
//! hand: softmax, then the cosine quotient rule, then fusion, then the head.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, CorpusError, TrainingTriple};
use crate::encoder::{merge_weights, EncodeError, FrozenFeaturizer, HeadKind, TrainableHead};
use crate::vectorstore::{dot, l2_norm};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error("no training triples")]
    NoTriples,
    #[error("fused embedding has zero norm")]
    ZeroNorm,
    #[error("non-finite value in contrastive loss")]
    NonFinite,
    #[error("training diverged at step {step}")]
    Divergence { step: usize },
    #[error("invalid training config: {0}")]
    BadConfig(String),
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// No training; the frozen featurizer alone.
    Vanilla,
    /// Plain fine-tuning (fusion weight 1).
    Finetune,
    /// Fused training and inference with the configured fusion weight.
    #[default]
    Refine,
    /// Fine-tune, then merge the tuned head with the identity head.
    Cocktail,
}

impl TrainMode {
    pub const ALL: [TrainMode; 4] = [
        TrainMode::Vanilla,
        TrainMode::Finetune,
        TrainMode::Refine,
        TrainMode::Cocktail,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Vanilla => "vanilla",
            TrainMode::Finetune => "finetune",
            TrainMode::Refine => "refine",
            TrainMode::Cocktail => "cocktail",
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TrainMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                format!("unknown mode {s:?} (expected vanilla, finetune, refine or cocktail)")
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// 1e-3 suits the toy head; transformer-scale runs use 1e-5.
    pub learning_rate: f64,
    pub temperature: f64,
    /// Fusion weight of the trainable branch in `refine` mode.
    pub lambda: f64,
    pub grad_accum_steps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: TrainMode,
    /// Weight of the tuned head when merging in `cocktail` mode.
    pub cocktail_weight: f64,
    pub head_kind: HeadKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            temperature: 0.05,
            lambda: 0.35,
            grad_accum_steps: 4,
            epochs: 10,
            batch_size: 8,
            seed: 0,
            mode: TrainMode::Refine,
            cocktail_weight: 0.65,
            head_kind: HeadKind::Linear,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::BadConfig(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!(
                "temperature must be positive, got {}",
                self.temperature
            ));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda must lie in [0, 1], got {}", self.lambda));
        }
        if !(0.0..=1.0).contains(&self.cocktail_weight) {
            return bad(format!(
                "cocktail_weight must lie in [0, 1], got {}",
                self.cocktail_weight
            ));
        }
        if self.grad_accum_steps == 0 || self.batch_size == 0 || self.epochs == 0 {
            return bad("grad_accum_steps, batch_size and epochs must be positive".into());
        }
        Ok(())
    }

    /// Fusion weight used while optimizing; `None` when nothing is trained.
    pub fn training_lambda(&self) -> Option<f64> {
        match self.mode {
            TrainMode::Vanilla => None,
            TrainMode::Finetune | TrainMode::Cocktail => Some(1.0),
            TrainMode::Refine => Some(self.lambda),
        }
    }

    /// Fusion weight the resulting head must be embedded with.
    pub fn inference_lambda(&self) -> f64 {
        match self.mode {
            TrainMode::Vanilla => 0.0,
            TrainMode::Finetune | TrainMode::Cocktail => 1.0,
            TrainMode::Refine => self.lambda,
        }
    }

    pub fn objective(&self) -> Objective {
        Objective {
            lambda: self.training_lambda().unwrap_or(0.0),
            temperature: self.temperature,
        }
    }
}

/// The two scalars the per-triple loss depends on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub lambda: f64,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// Mean of `per_triple`.
    pub value: f64,
    /// Mean norm of the applied (averaged) gradients.
    pub grad_norm: f64,
    /// Loss of each triple, indexed like the input triples.
    pub per_triple: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradient {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl HeadGradient {
    pub fn zeros(dimension: usize) -> Self {
        Self {
            weight: vec![0.0; dimension * dimension],
            bias: vec![0.0; dimension],
        }
    }

    pub fn norm(&self) -> f64 {
        (dot(&self.weight, &self.weight) + dot(&self.bias, &self.bias)).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripleLoss {
    pub loss: f64,
    pub grad: HeadGradient,
}

/// Loss of one triple plus, for each input text, the gradient with respect
/// to the head's pre-activation. The weight gradient is the sum of outer
/// products of these with the matching frozen features.
struct LossTerms {
    loss: f64,
    pre_activation_grads: Vec<Vec<f64>>,
}

/// `inputs[0]` is the query, `inputs[1]` the positive, the rest negatives.
fn loss_terms(
    head: &TrainableHead,
    inputs: &[&[f64]],
    obj: Objective,
) -> Result<LossTerms, TrainError> {
    let d = head.dimension;
    let lambda = obj.lambda;
    let tau = obj.temperature;

    let mut pre = Vec::with_capacity(inputs.len());
    let mut fused = Vec::with_capacity(inputs.len());
    for f in inputs {
        if f.len() != d {
            return Err(EncodeError::DimensionMismatch {
                expected: d,
                got: f.len(),
            }
            .into());
        }
        let z = head.affine(f);
        let trained: Vec<f64> = match head.kind {
            HeadKind::Linear => z.clone(),
            HeadKind::ResidualTanh => z.iter().zip(*f).map(|(z, x)| x + (z - x).tanh()).collect(),
        };
        fused.push(
            trained
                .iter()
                .zip(*f)
                .map(|(t, x)| lambda * t + (1.0 - lambda) * x)
                .collect::<Vec<f64>>(),
        );
        pre.push(z);
    }
    let norms: Vec<f64> = fused.iter().map(|e| l2_norm(e)).collect();
    if norms.contains(&0.0) {
        return Err(TrainError::ZeroNorm);
    }

    let q = &fused[0];
    let nq = norms[0];
    let sims: Vec<f64> = (1..fused.len())
        .map(|i| dot(q, &fused[i]) / (nq * norms[i]))
        .collect();
    let logits: Vec<f64> = sims.iter().map(|s| s / tau).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    let loss = (lse - logits[0]).max(0.0);
    if !loss.is_finite() || !lse.is_finite() {
        return Err(TrainError::NonFinite);
    }

    // dL/ds_i = (softmax_i − [i is positive]) / τ
    let ds: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(i, l)| ((l - lse).exp() - if i == 0 { 1.0 } else { 0.0 }) / tau)
        .collect();

    // Cosine quotient rule: ∂cos(a,b)/∂a = b/(|a||b|) − cos·a/|a|².
    let mut de = vec![vec![0.0; d]; fused.len()];
    for (i, (&g, &s)) in ds.iter().zip(&sims).enumerate() {
        let doc = &fused[i + 1];
        let nd = norms[i + 1];
        let cross = 1.0 / (nq * nd);
        for k in 0..d {
            de[0][k] += g * (doc[k] * cross - s * q[k] / (nq * nq));
            de[i + 1][k] = g * (q[k] * cross - s * doc[k] / (nd * nd));
        }
    }

    let pre_activation_grads = de
        .into_iter()
        .zip(&pre)
        .zip(inputs)
        .map(|((de, z), f)| match head.kind {
            HeadKind::Linear => de.iter().map(|g| lambda * g).collect(),
            HeadKind::ResidualTanh => de
                .iter()
                .zip(z)
                .zip(*f)
                .map(|((g, z), x)| {
                    let t = (z - x).tanh();
                    lambda * g * (1.0 - t * t)
                })
                .collect(),
        })
        .collect();

    Ok(LossTerms {
        loss,
        pre_activation_grads,
    })
}

/// Adds `Σ_j g_j ⊗ f_j` into `grad` row by row; row order and triple order
/// are fixed so the result does not depend on the thread schedule.
/// Per-text upstream gradients paired with the features they flow back into.
type Contribution<'a> = (Vec<Vec<f64>>, Vec<&'a [f64]>);

fn accumulate(grad: &mut HeadGradient, contributions: &[Contribution<'_>]) {
    let d = grad.bias.len();
    grad.weight
        .par_chunks_mut(d)
        .zip(grad.bias.par_iter_mut())
        .enumerate()
        .for_each(|(r, (row, bias))| {
            for (grads, inputs) in contributions {
                for (g, f) in grads.iter().zip(inputs) {
                    let gr = g[r];
                    if gr == 0.0 {
                        continue;
                    }
                    *bias += gr;
                    for (w, x) in row.iter_mut().zip(f.iter()) {
                        *w += gr * x;
                    }
                }
            }
        });
}

/// Loss and exact head gradient for one (query, positive, negatives) triple.
pub fn triple_loss<S: AsRef<str>>(
    query: &str,
    positive: &str,
    negatives: &[S],
    head: &TrainableHead,
    featurizer: &FrozenFeaturizer,
    obj: Objective,
) -> Result<TripleLoss, TrainError> {
    let mut features = vec![featurizer.features(query)?, featurizer.features(positive)?];
    for n in negatives {
        features.push(featurizer.features(n.as_ref())?);
    }
    let inputs: Vec<&[f64]> = features.iter().map(Vec::as_slice).collect();
    let terms = loss_terms(head, &inputs, obj)?;
    let mut grad = HeadGradient::zeros(head.dimension);
    accumulate(&mut grad, &[(terms.pre_activation_grads, inputs)]);
    Ok(TripleLoss {
        loss: terms.loss,
        grad,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub head: TrainableHead,
    pub history: Vec<LossReport>,
    /// Fusion weight the head must be used with at inference.
    pub inference_lambda: f64,
}

/// Per-epoch losses plus the configuration that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub mode: TrainMode,
    pub config: TrainConfig,
    pub num_triples: usize,
    pub epochs: Vec<LossReport>,
}

/// Fine-tunes a head on the triples according to `cfg.mode`.
///
/// Triples are shuffled each epoch with the configured seed and consumed in
/// micro-batches of `batch_size`; gradients from `grad_accum_steps`
/// micro-batches are summed, divided by the number of triples they cover and
/// applied as one plain gradient-descent step.
pub fn train(
    triples: &[TrainingTriple],
    corpus: &Corpus,
    featurizer: &FrozenFeaturizer,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    featurizer.validate()?;
    let d = featurizer.dimension;
    match cfg.mode {
        TrainMode::Vanilla => Ok(TrainOutcome {
            head: TrainableHead::identity_of_kind(d, cfg.head_kind),
            history: Vec::new(),
            inference_lambda: cfg.inference_lambda(),
        }),
        TrainMode::Cocktail => {
            let finetune_cfg = TrainConfig {
                mode: TrainMode::Finetune,
                ..cfg.clone()
            };
            let tuned = train(triples, corpus, featurizer, &finetune_cfg)?;
            let head = cocktail_merge(&tuned.head, cfg.cocktail_weight)?;
            Ok(TrainOutcome {
                head,
                history: tuned.history,
                inference_lambda: cfg.inference_lambda(),
            })
        }
        TrainMode::Finetune | TrainMode::Refine => {
            let (head, history) = optimize(triples, corpus, featurizer, cfg)?;
            Ok(TrainOutcome {
                head,
                history,
                inference_lambda: cfg.inference_lambda(),
            })
        }
    }
}

/// Merges a fine-tuned head with the untrained (identity) head.
pub fn cocktail_merge(tuned: &TrainableHead, weight: f64) -> Result<TrainableHead, EncodeError> {
    merge_weights(
        &TrainableHead::identity_of_kind(tuned.dimension, tuned.kind),
        tuned,
        weight,
    )
}

fn optimize(
    triples: &[TrainingTriple],
    corpus: &Corpus,
    featurizer: &FrozenFeaturizer,
    cfg: &TrainConfig,
) -> Result<(TrainableHead, Vec<LossReport>), TrainError> {
    if triples.is_empty() {
        return Err(TrainError::NoTriples);
    }
    for t in triples {
        t.validate(corpus)?;
    }
    let d = featurizer.dimension;
    let obj = cfg.objective();

    // Featurize each distinct text once.
    let mut texts: Vec<&str> = Vec::new();
    let mut doc_slot: HashMap<&str, usize> = HashMap::new();
    let mut layout: Vec<Vec<usize>> = Vec::with_capacity(triples.len());
    for t in triples {
        let mut slots = vec![texts.len()];
        texts.push(&t.query.text);
        for id in std::iter::once(&t.positive_doc_id).chain(&t.negative_doc_ids) {
            let slot = *doc_slot.entry(id.as_str()).or_insert_with(|| {
                texts.push(&corpus.get(id).expect("validated").text);
                texts.len() - 1
            });
            slots.push(slot);
        }
        layout.push(slots);
    }
    let features: Vec<Vec<f64>> = texts
        .par_iter()
        .map(|t| featurizer.features(t))
        .collect::<Result<_, _>>()?;

    let mut head = TrainableHead::identity_of_kind(d, cfg.head_kind);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..triples.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut per_triple = vec![0.0; triples.len()];
        let mut grad = HeadGradient::zeros(d);
        let mut pending_batches = 0usize;
        let mut pending_triples = 0usize;
        let mut grad_norms = Vec::new();

        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for (b, batch) in batches.iter().enumerate() {
            let results: Vec<(usize, LossTerms)> = batch
                .par_iter()
                .map(|&i| {
                    let inputs: Vec<&[f64]> =
                        layout[i].iter().map(|&s| features[s].as_slice()).collect();
                    loss_terms(&head, &inputs, obj).map(|terms| (i, terms))
                })
                .collect::<Result<_, _>>()
                .map_err(|e| match e {
                    TrainError::NonFinite | TrainError::ZeroNorm => TrainError::Divergence { step },
                    other => other,
                })?;

            let mut contributions = Vec::with_capacity(results.len());
            for (i, terms) in results {
                per_triple[i] = terms.loss;
                let inputs: Vec<&[f64]> =
                    layout[i].iter().map(|&s| features[s].as_slice()).collect();
                contributions.push((terms.pre_activation_grads, inputs));
            }
            accumulate(&mut grad, &contributions);
            pending_batches += 1;
            pending_triples += batch.len();

            if pending_batches == cfg.grad_accum_steps || b + 1 == batches.len() {
                let scale = 1.0 / pending_triples as f64;
                grad.weight
                    .iter_mut()
                    .chain(grad.bias.iter_mut())
                    .for_each(|g| *g *= scale);
                grad_norms.push(grad.norm());
                for (w, g) in head.weight.iter_mut().zip(&grad.weight) {
                    *w -= cfg.learning_rate * g;
                }
                for (b, g) in head.bias.iter_mut().zip(&grad.bias) {
                    *b -= cfg.learning_rate * g;
                }
                if head.weight.iter().chain(&head.bias).any(|v| !v.is_finite()) {
                    return Err(TrainError::Divergence { step });
                }
                step += 1;
                grad = HeadGradient::zeros(d);
                pending_batches = 0;
                pending_triples = 0;
            }
        }

        let value = per_triple.iter().sum::<f64>() / per_triple.len() as f64;
        let grad_norm = grad_norms.iter().sum::<f64>() / grad_norms.len().max(1) as f64;
        log::debug!(
            "epoch {} loss {value:.6} grad_norm {grad_norm:.6}",
            history.len()
        );
        history.push(LossReport {
            value,
            grad_norm,
            per_triple,
        });
    }
    Ok((head, history))
}
