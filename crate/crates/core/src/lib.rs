//! Retrieval fine-tuning toolkit.
//!
//! The pipeline turns an unlabeled document collection into contrastive
//! training triples (generated queries plus mined hard negatives), fine-tunes
//! a compact embedding head whose output is interpolated with a frozen
//! featurizer during both training and inference, and scores retrieval with
//! MAP/NDCG/MRR/Recall at k.
//!
//! The "pretrained model" is a deterministic hashed character n-gram
//! featurizer ([`encoder::FrozenFeaturizer`]) and the fine-tuned model is a
//! linear head on top of it ([`encoder::TrainableHead`]), so every mechanism
//! runs on a laptop without transformer weights.

pub mod augment;
pub mod corpus;
pub mod encoder;
pub mod evaluator;
pub mod io;
pub mod querygen;
pub mod synthcorpus;
pub mod trainer;
pub mod vectorstore;

pub use augment::{build_dataset, select_negatives, MiningReport, NegativeMiningConfig};
pub use corpus::{Corpus, Document, Query, SplitSpec, TrainingTriple};
pub use encoder::{
    fuse, merge_weights, Embedder, FrozenFeaturizer, FusedEncoder, FusionConfig, HeadKind,
    TrainableHead,
};
pub use evaluator::{evaluate, MetricValues, MetricsReport};
pub use querygen::{generate_queries, parse_numbered_list, GenConfig};
pub use synthcorpus::{generate_corpus, SynthSpec};
pub use trainer::{train, triple_loss, LossReport, TrainConfig, TrainMode};
pub use vectorstore::{cosine, EmbeddingVector, RetrievalResult, VectorStore};
