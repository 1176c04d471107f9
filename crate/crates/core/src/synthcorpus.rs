//! Seeded synthetic corpora with tunable lexical overlap.
//!
//! The vocabulary is split into one private pool per document and a shared
//! distractor pool. Each word of a document comes from the shared pool with
//! probability `distractor_overlap` and from the document's private pool
//! otherwise. Each document gets one labeled query made of some of its
//! private words plus shared words drawn from the document itself, so the
//! more documents lean on the shared pool, the harder lexical retrieval gets.

use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Document, Query};

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("distractor_overlap must lie in [0, 1), got {0}")]
    BadOverlap(f64),
    #[error("invalid synthetic corpus spec: {0}")]
    Invalid(String),
    #[error("vocabulary of {vocab} words cannot give {docs} documents {private} private words each plus a shared pool")]
    VocabTooSmall {
        vocab: usize,
        docs: usize,
        private: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub num_docs: usize,
    /// Total distinct words; what is left after private pools is shared.
    /// The default leaves a small, frequent shared pool, like function words.
    pub vocab_size: usize,
    pub private_vocab_per_doc: usize,
    /// Inclusive word-count range per document.
    pub doc_length: (usize, usize),
    /// Probability that a document word comes from the shared pool.
    pub distractor_overlap: f64,
    pub query_private_words: usize,
    pub query_shared_words: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_docs: 100,
            vocab_size: 1260,
            private_vocab_per_doc: 12,
            doc_length: (140, 190),
            distractor_overlap: 0.5,
            query_private_words: 2,
            query_shared_words: 4,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if !(0.0..1.0).contains(&self.distractor_overlap) {
            return Err(SynthError::BadOverlap(self.distractor_overlap));
        }
        if self.num_docs == 0 || self.private_vocab_per_doc == 0 {
            return Err(SynthError::Invalid(
                "num_docs and private_vocab_per_doc must be positive".into(),
            ));
        }
        let (lo, hi) = self.doc_length;
        if lo == 0 || lo > hi {
            return Err(SynthError::Invalid(format!("bad doc_length {lo}..={hi}")));
        }
        if self.query_private_words == 0 || self.query_private_words > self.private_vocab_per_doc {
            return Err(SynthError::Invalid(format!(
                "query_private_words must lie in 1..={}",
                self.private_vocab_per_doc
            )));
        }
        let private_total = self.num_docs * self.private_vocab_per_doc;
        let needs_shared = self.distractor_overlap > 0.0 || self.query_shared_words > 0;
        if self.vocab_size < private_total + usize::from(needs_shared) {
            return Err(SynthError::VocabTooSmall {
                vocab: self.vocab_size,
                docs: self.num_docs,
                private: self.private_vocab_per_doc,
            });
        }
        Ok(())
    }
}

const LETTERS: &[u8] = b"abcdefghijklmnopqrstuvwxyz";

/// Random lowercase strings of 5 to 8 letters. Unrelated strings rarely share
/// character trigrams, so disjoint word sets give nearly disjoint features.
fn make_vocabulary(size: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut seen = HashSet::with_capacity(size);
    let mut words = Vec::with_capacity(size);
    while words.len() < size {
        let len = rng.random_range(5..=8);
        let word: String = (0..len)
            .map(|_| *LETTERS.choose(rng).unwrap() as char)
            .collect();
        if seen.insert(word.clone()) {
            words.push(word);
        }
    }
    words
}

/// Documents and one gold-labeled query per document.
pub fn generate_corpus(spec: &SynthSpec) -> Result<(Vec<Document>, Vec<Query>), SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let vocab = make_vocabulary(spec.vocab_size, &mut rng);
    let private_total = spec.num_docs * spec.private_vocab_per_doc;
    let (private, shared) = vocab.split_at(private_total);

    let mut docs = Vec::with_capacity(spec.num_docs);
    let mut queries = Vec::with_capacity(spec.num_docs);
    for (i, pool) in private.chunks_exact(spec.private_vocab_per_doc).enumerate() {
        let len = rng.random_range(spec.doc_length.0..=spec.doc_length.1);
        let mut words: Vec<&str> = Vec::with_capacity(len);
        for _ in 0..len {
            let from_shared = !shared.is_empty() && rng.random_bool(spec.distractor_overlap);
            let word = if from_shared {
                shared.choose(&mut rng)
            } else {
                pool.choose(&mut rng)
            };
            words.push(word.unwrap());
        }
        // Guarantee the query's private words occur in the document.
        let mut private_words: Vec<&str> = pool.iter().map(String::as_str).collect();
        private_words.shuffle(&mut rng);
        private_words.truncate(spec.query_private_words);
        for w in &private_words {
            if !words.contains(w) {
                let at = rng.random_range(0..words.len());
                words[at] = w;
            }
        }

        let mut text = String::new();
        for (j, chunk) in words.chunks(12).enumerate() {
            if j > 0 {
                text.push(' ');
            }
            text.push_str(&chunk.join(" "));
            text.push('.');
        }

        let mut query_words = private_words.clone();
        let private_set: HashSet<&str> = pool.iter().map(String::as_str).collect();
        let doc_shared: Vec<&str> = words
            .iter()
            .copied()
            .filter(|w| !private_set.contains(w))
            .collect();
        if !doc_shared.is_empty() {
            for _ in 0..spec.query_shared_words {
                query_words.push(doc_shared.choose(&mut rng).unwrap());
            }
        }
        query_words.shuffle(&mut rng);

        let doc_id = format!("doc{i:04}");
        queries.push(Query {
            id: format!("q{i:04}"),
            text: query_words.join(" "),
            source_doc_id: None,
            gold_doc_ids: vec![doc_id.clone()],
        });
        docs.push(Document::new(doc_id, text));
    }
    Ok((docs, queries))
}
