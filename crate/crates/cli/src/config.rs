//! Pipeline configuration: one JSON document, dotted-path overrides, and seed
//! derivation from a single root seed.

use std::path::Path;

use anyhow::{bail, Context};
use refine_core::evaluator::DEFAULT_KS;
use refine_core::{
    FrozenFeaturizer, FusionConfig, GenConfig, NegativeMiningConfig, SynthSpec, TrainConfig,
    TrainMode,
};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Offsets added to the root seed for each stage, so stages draw independent
/// streams while the whole run depends on one number.
pub const GENERATION_SEED_OFFSET: u64 = 101;
pub const SPLIT_SEED_OFFSET: u64 = 202;
pub const TRAIN_SEED_OFFSET: u64 = 303;
pub const SYNTH_SEED_OFFSET: u64 = 404;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub validation_fraction: f64,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self {
            validation_fraction: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub ks: Vec<usize>,
    /// Modes trained and evaluated by `run-all`, in report order.
    pub modes: Vec<TrainMode>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            ks: DEFAULT_KS.to_vec(),
            modes: TrainMode::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OodSection {
    /// Cutoff whose Recall decides the refine-vs-finetune flag.
    pub flag_k: usize,
}

impl Default for OodSection {
    fn default() -> Self {
        Self { flag_k: 3 }
    }
}

/// Seed fields inside `generation`, `train` and `synth` are ignored: they are
/// always derived from `seed` plus the stage offsets above.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub featurizer: FrozenFeaturizer,
    pub generation: GenConfig,
    pub mining: NegativeMiningConfig,
    pub split: SplitSection,
    pub fusion: FusionConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub ood: OodSection,
    pub synth: SynthSpec,
}

impl PipelineConfig {
    /// Reads `path` (or defaults when `None`) and applies `key=value` overrides.
    /// `offline` forces the deterministic query generator.
    pub fn load(path: Option<&Path>, overrides: &[String], offline: bool) -> anyhow::Result<Self> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing config {}", p.display()))?
            }
            None => serde_json::to_value(Self::default())?,
        };
        // Fill in omitted sections so every documented path can be overridden.
        let mut cfg: Self = serde_json::from_value(value).context("invalid config")?;
        value = serde_json::to_value(&cfg)?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        cfg = serde_json::from_value(value).context("invalid config after --set overrides")?;
        cfg.generation.offline |= offline;
        cfg.derive_seeds();
        cfg.validate()?;
        Ok(cfg)
    }

    fn derive_seeds(&mut self) {
        self.generation.seed = self.seed.wrapping_add(GENERATION_SEED_OFFSET);
        self.train.seed = self.seed.wrapping_add(TRAIN_SEED_OFFSET);
        self.synth.seed = self.seed.wrapping_add(SYNTH_SEED_OFFSET);
    }

    pub fn split_seed(&self) -> u64 {
        self.seed.wrapping_add(SPLIT_SEED_OFFSET)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.featurizer.validate()?;
        if self.generation.offline || self.generation.endpoint.is_some() {
            self.generation.validate()?;
        }
        self.mining.validate()?;
        self.fusion.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        if !(0.0..1.0).contains(&self.split.validation_fraction) {
            bail!(
                "split.validation_fraction must lie in [0, 1), got {}",
                self.split.validation_fraction
            );
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            bail!("eval.ks must be a non-empty list of positive cutoffs");
        }
        if self.eval.modes.is_empty() {
            bail!("eval.modes must name at least one mode");
        }
        if self.ood.flag_k == 0 || !self.eval.ks.contains(&self.ood.flag_k) {
            bail!("ood.flag_k must be one of eval.ks");
        }
        if self.train.lambda != self.fusion.lambda {
            bail!(
                "train.lambda ({}) and fusion.lambda ({}) differ; refine must train and infer with the same weight",
                self.train.lambda,
                self.fusion.lambda
            );
        }
        Ok(())
    }

    /// Stages that generate queries call this; others run without an endpoint.
    pub fn require_generator(&self) -> anyhow::Result<()> {
        self.generation
            .validate()
            .context("query generation needs generation.endpoint or --offline")
    }

    /// Training config for one mode.
    pub fn train_config(&self, mode: TrainMode) -> TrainConfig {
        TrainConfig {
            mode,
            ..self.train.clone()
        }
    }
}

/// `a.b.c=value`; the value is parsed as JSON and falls back to a plain string.
/// The path must already exist so typos are rejected.
pub fn apply_override(root: &mut Value, assignment: &str) -> anyhow::Result<()> {
    let Some((path, raw)) = assignment.split_once('=') else {
        bail!("override {assignment:?} is not of the form key=value");
    };
    let parsed: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
    let mut node = root;
    for key in path.split('.') {
        node = match node {
            Value::Object(map) => map.get_mut(key),
            _ => None,
        }
        .with_context(|| format!("unknown config key {path:?}"))?;
    }
    *node = parsed;
    Ok(())
}
