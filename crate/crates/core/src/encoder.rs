//! Embedding computation.
//!
//! Two encoders see every text: a frozen featurizer, and a trainable head
//! applied on top of the frozen features. Their outputs are interpolated:
//!
//! ```text
//! e = λ · head(f(x)) + (1 − λ) · f(x)
//! ```
//!
//! The head starts as the identity, so before any update the fused output is
//! exactly the frozen one for every λ.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::io::{self, IoError};
use crate::trainer::TrainMode;
use crate::vectorstore::{l2_norm, EmbeddingVector};

#[derive(Debug, thiserror::Error)]
pub enum EncodeError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("embedding contains a non-finite value")]
    NonFinite,
    #[error("fusion weight must lie in [0, 1], got {0}")]
    BadLambda(f64),
    #[error("head kinds differ: {0:?} vs {1:?}")]
    KindMismatch(HeadKind, HeadKind),
    #[error("invalid featurizer: {0}")]
    BadFeaturizer(String),
    #[error("invalid checkpoint: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Io(#[from] IoError),
}

/// Anything that maps text to a fixed-dimension vector.
pub trait Embedder: Send + Sync {
    fn dimension(&self) -> usize;
    fn embed(&self, text: &str) -> Result<EmbeddingVector, EncodeError>;
}

fn to_vector(values: Vec<f64>) -> Result<EmbeddingVector, EncodeError> {
    EmbeddingVector::new(values).map_err(|_| EncodeError::NonFinite)
}

/// Hashed character n-gram counts, L2-normalized.
///
/// Each whitespace-separated word is lower-cased and padded with one space
/// on each side before its n-grams are taken.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrozenFeaturizer {
    pub dimension: usize,
    pub hash_seed: u64,
    pub ngram_min: usize,
    pub ngram_max: usize,
}

impl Default for FrozenFeaturizer {
    fn default() -> Self {
        Self::new(256, 0x5eed)
    }
}

impl FrozenFeaturizer {
    pub fn new(dimension: usize, hash_seed: u64) -> Self {
        Self {
            dimension,
            hash_seed,
            ngram_min: 3,
            ngram_max: 5,
        }
    }

    pub fn validate(&self) -> Result<(), EncodeError> {
        if self.dimension == 0 {
            return Err(EncodeError::BadFeaturizer(
                "dimension must be positive".into(),
            ));
        }
        if self.ngram_min == 0 || self.ngram_min > self.ngram_max {
            return Err(EncodeError::BadFeaturizer(format!(
                "bad n-gram range {}..={}",
                self.ngram_min, self.ngram_max
            )));
        }
        Ok(())
    }

    /// Raw features as a plain vector; the trainer works on these directly.
    pub fn features(&self, text: &str) -> Result<Vec<f64>, EncodeError> {
        if text.is_empty() {
            return Err(EncodeError::EmptyText);
        }
        self.validate()?;
        let mut counts = vec![0.0; self.dimension];
        let mut grams = 0usize;
        // Grams never cross word boundaries, so word order adds no noise.
        for word in text.split_whitespace() {
            let padded = format!(" {} ", word.to_lowercase());
            let bounds: Vec<usize> = padded
                .char_indices()
                .map(|(i, _)| i)
                .chain(std::iter::once(padded.len()))
                .collect();
            let n_chars = bounds.len() - 1;
            if n_chars < self.ngram_min {
                counts[self.bucket(n_chars, &padded)] += 1.0;
                grams += 1;
                continue;
            }
            for n in self.ngram_min..=self.ngram_max.min(n_chars) {
                for start in 0..=(n_chars - n) {
                    counts[self.bucket(n, &padded[bounds[start]..bounds[start + n]])] += 1.0;
                    grams += 1;
                }
            }
        }
        if grams == 0 {
            // Whitespace only.
            counts[self.bucket(1, " ")] += 1.0;
        }
        let norm = l2_norm(&counts);
        counts.iter_mut().for_each(|c| *c /= norm);
        Ok(counts)
    }

    fn bucket(&self, n: usize, gram: &str) -> usize {
        // Seeded FNV-1a followed by a splitmix64 finalizer.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self
            .hash_seed
            .to_le_bytes()
            .into_iter()
            .chain([n as u8])
            .chain(gram.bytes())
        {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h ^= h >> 30;
        h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 27;
        h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
        (h % self.dimension as u64) as usize
    }

    pub fn featurize(&self, text: &str) -> Result<EmbeddingVector, EncodeError> {
        to_vector(self.features(text)?)
    }
}

impl Embedder for FrozenFeaturizer {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EncodeError> {
        self.featurize(text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// `W f + b`
    #[default]
    Linear,
    /// `f + tanh(W f + b − f)`: identity at initialization, nonlinear in the
    /// parameters, so weight merging and output fusion no longer coincide.
    ResidualTanh,
}

/// Square weight matrix (row-major) plus bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainableHead {
    pub dimension: usize,
    #[serde(default)]
    pub kind: HeadKind,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl TrainableHead {
    pub fn identity(dimension: usize) -> Self {
        Self::identity_of_kind(dimension, HeadKind::Linear)
    }

    pub fn identity_of_kind(dimension: usize, kind: HeadKind) -> Self {
        let mut weight = vec![0.0; dimension * dimension];
        for i in 0..dimension {
            weight[i * dimension + i] = 1.0;
        }
        Self {
            dimension,
            kind,
            weight,
            bias: vec![0.0; dimension],
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity_of_kind(self.dimension, self.kind)
    }

    pub fn validate(&self) -> Result<(), EncodeError> {
        let d = self.dimension;
        if self.weight.len() != d * d || self.bias.len() != d {
            return Err(EncodeError::BadCheckpoint(format!(
                "head of dimension {d} has {} weights and {} biases",
                self.weight.len(),
                self.bias.len()
            )));
        }
        if self.weight.iter().chain(&self.bias).any(|v| !v.is_finite()) {
            return Err(EncodeError::NonFinite);
        }
        Ok(())
    }

    /// Pre-activation `W f + b`.
    pub(crate) fn affine(&self, input: &[f64]) -> Vec<f64> {
        let d = self.dimension;
        self.weight
            .chunks_exact(d)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>() + b)
            .collect()
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>, EncodeError> {
        if input.len() != self.dimension {
            return Err(EncodeError::DimensionMismatch {
                expected: self.dimension,
                got: input.len(),
            });
        }
        let z = self.affine(input);
        Ok(match self.kind {
            HeadKind::Linear => z,
            HeadKind::ResidualTanh => z
                .iter()
                .zip(input)
                .map(|(z, x)| x + (z - x).tanh())
                .collect(),
        })
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Output from the trainable head on top of the frozen features.
pub fn encode_trainable(
    text: &str,
    featurizer: &FrozenFeaturizer,
    head: &TrainableHead,
) -> Result<EmbeddingVector, EncodeError> {
    let frozen = featurizer.features(text)?;
    to_vector(head.forward(&frozen)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub lambda: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { lambda: 0.35 }
    }
}

impl FusionConfig {
    pub fn new(lambda: f64) -> Result<Self, EncodeError> {
        let cfg = Self { lambda };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), EncodeError> {
        if (0.0..=1.0).contains(&self.lambda) {
            Ok(())
        } else {
            Err(EncodeError::BadLambda(self.lambda))
        }
    }
}

pub(crate) fn fuse_slices(trained: &[f64], frozen: &[f64], lambda: f64) -> Vec<f64> {
    trained
        .iter()
        .zip(frozen)
        .map(|(t, f)| lambda * t + (1.0 - lambda) * f)
        .collect()
}

/// `λ · trained + (1 − λ) · frozen`, elementwise.
pub fn fuse(
    trained: &EmbeddingVector,
    frozen: &EmbeddingVector,
    cfg: &FusionConfig,
) -> Result<EmbeddingVector, EncodeError> {
    cfg.validate()?;
    if trained.dim() != frozen.dim() {
        return Err(EncodeError::DimensionMismatch {
            expected: trained.dim(),
            got: frozen.dim(),
        });
    }
    to_vector(fuse_slices(
        trained.as_slice(),
        frozen.as_slice(),
        cfg.lambda,
    ))
}

/// Parameter-wise `(1 − w) · a + w · b`.
pub fn merge_weights(
    a: &TrainableHead,
    b: &TrainableHead,
    w: f64,
) -> Result<TrainableHead, EncodeError> {
    if !(0.0..=1.0).contains(&w) {
        return Err(EncodeError::BadLambda(w));
    }
    if a.dimension != b.dimension {
        return Err(EncodeError::DimensionMismatch {
            expected: a.dimension,
            got: b.dimension,
        });
    }
    if a.kind != b.kind {
        return Err(EncodeError::KindMismatch(a.kind, b.kind));
    }
    let mix = |x: &[f64], y: &[f64]| -> Vec<f64> {
        x.iter()
            .zip(y)
            .map(|(x, y)| (1.0 - w) * x + w * y)
            .collect()
    };
    Ok(TrainableHead {
        dimension: a.dimension,
        kind: a.kind,
        weight: mix(&a.weight, &b.weight),
        bias: mix(&a.bias, &b.bias),
    })
}

/// Featurizer, head and fusion weight bundled as one embedder.
#[derive(Debug, Clone)]
pub struct FusedEncoder {
    pub featurizer: FrozenFeaturizer,
    pub head: TrainableHead,
    pub lambda: f64,
}

impl FusedEncoder {
    pub fn new(
        featurizer: FrozenFeaturizer,
        head: TrainableHead,
        lambda: f64,
    ) -> Result<Self, EncodeError> {
        FusionConfig::new(lambda)?;
        featurizer.validate()?;
        head.validate()?;
        if head.dimension != featurizer.dimension {
            return Err(EncodeError::DimensionMismatch {
                expected: featurizer.dimension,
                got: head.dimension,
            });
        }
        Ok(Self {
            featurizer,
            head,
            lambda,
        })
    }

    /// Untrained encoder: identical to the featurizer.
    pub fn vanilla(featurizer: FrozenFeaturizer) -> Self {
        let head = TrainableHead::identity(featurizer.dimension);
        Self {
            featurizer,
            head,
            lambda: 0.0,
        }
    }
}

impl Embedder for FusedEncoder {
    fn dimension(&self) -> usize {
        self.featurizer.dimension
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EncodeError> {
        let frozen = self.featurizer.features(text)?;
        let trained = self.head.forward(&frozen)?;
        to_vector(fuse_slices(&trained, &frozen, self.lambda))
    }
}

/// On-disk head: the weights plus everything needed to embed consistently.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadCheckpoint {
    pub mode: TrainMode,
    /// Fusion weight to apply at inference.
    pub lambda: f64,
    pub featurizer: FrozenFeaturizer,
    pub dimension: usize,
    pub kind: HeadKind,
    /// Row-major `dimension × dimension`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub config_hash: String,
}

impl HeadCheckpoint {
    pub fn new(
        mode: TrainMode,
        lambda: f64,
        featurizer: FrozenFeaturizer,
        head: TrainableHead,
        config_hash: String,
    ) -> Self {
        Self {
            mode,
            lambda,
            featurizer,
            dimension: head.dimension,
            kind: head.kind,
            weight: head.weight,
            bias: head.bias,
            config_hash,
        }
    }

    pub fn head(&self) -> TrainableHead {
        TrainableHead {
            dimension: self.dimension,
            kind: self.kind,
            weight: self.weight.clone(),
            bias: self.bias.clone(),
        }
    }

    pub fn encoder(&self) -> Result<FusedEncoder, EncodeError> {
        FusedEncoder::new(self.featurizer.clone(), self.head(), self.lambda)
    }

    pub fn save(&self, path: &Path) -> Result<(), EncodeError> {
        Ok(io::write_json_pretty(path, self)?)
    }

    pub fn load(path: &Path) -> Result<Self, EncodeError> {
        let bytes = std::fs::read(path).map_err(|source| IoError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let ckpt: Self = serde_json::from_slice(&bytes)
            .map_err(|e| EncodeError::BadCheckpoint(format!("{}: {e}", path.display())))?;
        ckpt.head().validate()?;
        FusionConfig::new(ckpt.lambda)?;
        if ckpt.dimension != ckpt.featurizer.dimension {
            return Err(EncodeError::BadCheckpoint(format!(
                "head dimension {} differs from featurizer dimension {}",
                ckpt.dimension, ckpt.featurizer.dimension
            )));
        }
        Ok(ckpt)
    }
}
