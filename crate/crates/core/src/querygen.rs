//! Query generation from documents.
//!
//! Two back ends produce the same thing, up to `k` distinct queries per
//! document with provenance:
//!
//! * [`ChatCompletionGenerator`] sends one chat-completions request per
//!   document and parses the numbered list in the reply.
//! * [`OfflineGenerator`] samples word spans from the document and wraps them
//!   in interrogative templates. It is a pure function of
//!   `(text, seed, k)` and is what tests and reproducible runs use.

use std::collections::HashSet;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::corpus::{Document, Query};

pub const DOCUMENT_PLACEHOLDER: &str = "{document}";
pub const COUNT_PLACEHOLDER: &str = "{k}";
pub const DEFAULT_PROMPT: &str =
    "You are a query generator bot. Generate {k} distinct queries from the document\n\n{document}";

#[derive(Debug, thiserror::Error)]
pub enum GenError {
    #[error("invalid generation config: {0}")]
    Config(String),
    #[error("document {0:?} has empty text")]
    EmptyDocument(String),
    #[error("endpoint unreachable after {attempts} attempts: {message}")]
    Transport { attempts: usize, message: String },
    #[error("endpoint returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed completion response: {0}")]
    BadResponse(String),
    #[error("no queries parsed for document {0:?}")]
    NoQueries(String),
}

impl GenError {
    /// Transport-level failures as opposed to bad input or configuration.
    pub fn is_runtime(&self) -> bool {
        matches!(
            self,
            GenError::Transport { .. }
                | GenError::Http { .. }
                | GenError::BadResponse(_)
                | GenError::NoQueries(_)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub queries_per_doc: usize,
    /// Must contain `{document}` exactly once; `{k}` is optional.
    pub prompt_template: String,
    /// Use the deterministic generator instead of the endpoint.
    pub offline: bool,
    /// Full chat-completions URL, e.g. `http://localhost:8000/v1/chat/completions`.
    pub endpoint: Option<String>,
    pub model_name: String,
    /// Environment variable holding the bearer token.
    pub api_key_env: String,
    pub temperature: f64,
    pub request_timeout_secs: u64,
    pub max_retries: usize,
    pub retry_backoff_ms: u64,
    pub parallelism: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            queries_per_doc: 10,
            prompt_template: DEFAULT_PROMPT.to_owned(),
            offline: false,
            endpoint: None,
            model_name: "gpt-4o-mini".to_owned(),
            api_key_env: "OPENAI_API_KEY".to_owned(),
            temperature: 0.7,
            request_timeout_secs: 60,
            max_retries: 3,
            retry_backoff_ms: 500,
            parallelism: 4,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn offline(seed: u64) -> Self {
        Self {
            offline: true,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), GenError> {
        if self.queries_per_doc == 0 {
            return Err(GenError::Config(
                "queries_per_doc must be at least 1".into(),
            ));
        }
        let placeholders = self.prompt_template.matches(DOCUMENT_PLACEHOLDER).count();
        if placeholders != 1 {
            return Err(GenError::Config(format!(
                "prompt template must contain {DOCUMENT_PLACEHOLDER} exactly once, found {placeholders}"
            )));
        }
        if !self.offline && self.endpoint.is_none() {
            return Err(GenError::Config(
                "no endpoint configured; set an endpoint or use offline generation".into(),
            ));
        }
        if self.parallelism == 0 {
            return Err(GenError::Config("parallelism must be at least 1".into()));
        }
        Ok(())
    }

    pub fn render_prompt(&self, doc: &Document) -> String {
        self.prompt_template
            .replace(COUNT_PLACEHOLDER, &self.queries_per_doc.to_string())
            .replace(DOCUMENT_PLACEHOLDER, &doc.text)
    }
}

pub trait QueryGenerator: Send + Sync {
    /// Raw candidate query strings; deduplication and capping happen in
    /// [`finalize_queries`].
    fn candidates(&self, doc: &Document) -> Result<Vec<String>, GenError>;
}

/// Items of a numbered (`1.`, `1)`) or bulleted (`-`, `*`, `•`, `+`) list.
/// Lines without a marker are ignored.
pub fn parse_numbered_list(raw: &str) -> Vec<String> {
    raw.lines()
        .filter_map(|line| {
            let line = line.trim();
            let rest = if let Some(rest) = line.strip_prefix(['-', '*', '•', '+']) {
                rest
            } else {
                let digits =
                    line.len() - line.trim_start_matches(|c: char| c.is_ascii_digit()).len();
                if digits == 0 {
                    return None;
                }
                line[digits..].strip_prefix(['.', ')'])?
            };
            if !rest.is_empty() && !rest.starts_with(char::is_whitespace) {
                return None;
            }
            let item = rest.trim();
            let item = item
                .strip_prefix('"')
                .and_then(|s| s.strip_suffix('"'))
                .unwrap_or(item)
                .trim();
            (!item.is_empty()).then(|| item.to_owned())
        })
        .collect()
}

fn collapse_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Dedup key: case-folded with whitespace runs collapsed.
pub fn dedup_key(s: &str) -> String {
    collapse_whitespace(s).to_lowercase()
}

/// Deduplicates candidates, drops any equal to the document text, caps at
/// `k` and attaches ids and provenance.
pub fn finalize_queries(
    doc: &Document,
    candidates: Vec<String>,
    k: usize,
) -> Result<Vec<Query>, GenError> {
    let doc_key = dedup_key(&doc.text);
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for c in candidates {
        let text = collapse_whitespace(&c);
        let key = text.to_lowercase();
        if text.is_empty() || key == doc_key || !seen.insert(key) {
            continue;
        }
        out.push(Query {
            id: format!("{}::q{:02}", doc.id, out.len()),
            text,
            source_doc_id: Some(doc.id.clone()),
            gold_doc_ids: vec![doc.id.clone()],
        });
        if out.len() == k {
            break;
        }
    }
    if out.is_empty() {
        return Err(GenError::NoQueries(doc.id.clone()));
    }
    if out.len() < k {
        log::warn!(
            "document {:?}: {} of {k} distinct queries",
            doc.id,
            out.len()
        );
    }
    Ok(out)
}

const TEMPLATES: &[&str] = &[
    "what is {}?",
    "how does {} work?",
    "why does {} matter?",
    "where is {} described?",
    "which passage mentions {}?",
    "explain {}",
    "tell me about {}",
    "what do we know about {}?",
    "describe {}",
    "who is involved with {}?",
    "when does {} come up?",
    "details on {}",
];

const STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "by", "for", "from", "in", "is", "it", "of", "on",
    "or", "that", "the", "this", "to", "was", "were", "with",
];

#[derive(Debug, Clone)]
pub struct OfflineGenerator {
    pub queries_per_doc: usize,
    pub seed: u64,
}

impl OfflineGenerator {
    pub fn new(queries_per_doc: usize, seed: u64) -> Self {
        Self {
            queries_per_doc,
            seed,
        }
    }
}

fn text_seed(text: &str) -> u64 {
    text.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn clean_word(w: &str) -> &str {
    w.trim_matches(|c: char| !c.is_alphanumeric())
}

impl QueryGenerator for OfflineGenerator {
    fn candidates(&self, doc: &Document) -> Result<Vec<String>, GenError> {
        let sentences: Vec<Vec<&str>> = doc
            .text
            .split(['.', '!', '?', '\n'])
            .map(|s| {
                s.split_whitespace()
                    .map(clean_word)
                    .filter(|w| !w.is_empty())
                    .collect::<Vec<_>>()
            })
            .filter(|s| !s.is_empty())
            .collect();
        if sentences.is_empty() {
            return Err(GenError::NoQueries(doc.id.clone()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ text_seed(&doc.text));
        let k = self.queries_per_doc;
        let mut out = Vec::with_capacity(k);
        let mut seen = HashSet::new();
        for _ in 0..k * 8 {
            let sentence = &sentences[rng.random_range(0..sentences.len())];
            let len = rng.random_range(2..=4).min(sentence.len());
            let start = rng.random_range(0..=sentence.len() - len);
            let mut span = &sentence[start..start + len];
            while span.len() > 1 && STOPWORDS.contains(&span[0].to_lowercase().as_str()) {
                span = &span[1..];
            }
            while span.len() > 1
                && STOPWORDS.contains(&span[span.len() - 1].to_lowercase().as_str())
            {
                span = &span[..span.len() - 1];
            }
            let template = TEMPLATES[rng.random_range(0..TEMPLATES.len())];
            let query = template.replace("{}", &span.join(" "));
            if seen.insert(dedup_key(&query)) {
                out.push(query);
                if out.len() == k {
                    break;
                }
            }
        }
        Ok(out)
    }
}

/// Blocking client for an OpenAI-compatible chat-completions endpoint.
pub struct ChatCompletionGenerator {
    cfg: GenConfig,
    agent: ureq::Agent,
    api_key: Option<String>,
}

impl ChatCompletionGenerator {
    pub fn new(cfg: GenConfig) -> Result<Self, GenError> {
        if cfg.endpoint.is_none() {
            return Err(GenError::Config(
                "chat-completions generator needs an endpoint".into(),
            ));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.request_timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        let api_key = std::env::var(&cfg.api_key_env)
            .ok()
            .filter(|k| !k.is_empty());
        Ok(Self {
            cfg,
            agent,
            api_key,
        })
    }

    pub fn request_body(&self, doc: &Document) -> Value {
        json!({
            "model": self.cfg.model_name,
            "messages": [{"role": "user", "content": self.cfg.render_prompt(doc)}],
            "temperature": self.cfg.temperature,
        })
    }

    fn send(&self, body: &Value) -> Result<Result<Value, GenError>, String> {
        let url = self.cfg.endpoint.as_deref().expect("checked in new");
        let mut req = self
            .agent
            .post(url)
            .header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| e.to_string())?;
        if status == 429 || status >= 500 {
            return Err(format!("HTTP {status}: {text}"));
        }
        if !(200..300).contains(&status) {
            return Ok(Err(GenError::Http { status, body: text }));
        }
        Ok(serde_json::from_str(&text).map_err(|e| GenError::BadResponse(e.to_string())))
    }
}

/// Content of the first choice's message.
pub fn completion_content(response: &Value) -> Result<&str, GenError> {
    response
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| GenError::BadResponse("missing choices[0].message.content".into()))
}

impl QueryGenerator for ChatCompletionGenerator {
    fn candidates(&self, doc: &Document) -> Result<Vec<String>, GenError> {
        let body = self.request_body(doc);
        let attempts = self.cfg.max_retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                let backoff = self
                    .cfg
                    .retry_backoff_ms
                    .saturating_mul(1 << (attempt - 1).min(10));
                std::thread::sleep(Duration::from_millis(backoff));
            }
            match self.send(&body) {
                Ok(Ok(response)) => return Ok(parse_numbered_list(completion_content(&response)?)),
                Ok(Err(e)) => return Err(e),
                Err(message) => {
                    log::warn!(
                        "document {:?}: attempt {} failed: {message}",
                        doc.id,
                        attempt + 1
                    );
                    last = message;
                }
            }
        }
        Err(GenError::Transport {
            attempts,
            message: last,
        })
    }
}

pub fn generator_for(cfg: &GenConfig) -> Result<Box<dyn QueryGenerator>, GenError> {
    cfg.validate()?;
    if cfg.offline {
        Ok(Box::new(OfflineGenerator::new(
            cfg.queries_per_doc,
            cfg.seed,
        )))
    } else {
        Ok(Box::new(ChatCompletionGenerator::new(cfg.clone())?))
    }
}

/// Up to `k` distinct queries for one document.
pub fn generate_queries(doc: &Document, cfg: &GenConfig) -> Result<Vec<Query>, GenError> {
    let generator = generator_for(cfg)?;
    generate_with(generator.as_ref(), doc, cfg.queries_per_doc)
}

pub fn generate_with(
    generator: &dyn QueryGenerator,
    doc: &Document,
    k: usize,
) -> Result<Vec<Query>, GenError> {
    if doc.text.is_empty() {
        return Err(GenError::EmptyDocument(doc.id.clone()));
    }
    finalize_queries(doc, generator.candidates(doc)?, k)
}

/// Generates for every document with at most `parallelism` requests in
/// flight; results come back in document order.
pub fn generate_all(
    generator: &dyn QueryGenerator,
    docs: &[Document],
    k: usize,
    parallelism: usize,
) -> Vec<Result<Vec<Query>, GenError>> {
    let run = || {
        docs.par_iter()
            .map(|d| generate_with(generator, d, k))
            .collect()
    };
    match rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
    {
        Ok(pool) => pool.install(run),
        Err(_) => docs
            .iter()
            .map(|d| generate_with(generator, d, k))
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_numbered_and_bulleted_lists() {
        assert_eq!(
            parse_numbered_list("1. alpha\n2. beta"),
            vec!["alpha", "beta"]
        );
        assert_eq!(
            parse_numbered_list("1) alpha\n 10)  beta  "),
            vec!["alpha", "beta"]
        );
        assert_eq!(
            parse_numbered_list("- alpha\n- beta"),
            vec!["alpha", "beta"]
        );
        assert_eq!(
            parse_numbered_list("* \"quoted\"\n• dot"),
            vec!["quoted", "dot"]
        );
        assert!(parse_numbered_list("no list here").is_empty());
        assert!(parse_numbered_list("1.\n2. \n-").is_empty());
        assert!(parse_numbered_list("2024 was a year\n3.5 apples").is_empty());
    }

    #[test]
    fn dedup_after_parse() {
        let doc = Document::new("d", "some document");
        let parsed = parse_numbered_list("1. Q-a\n2. Q-b\n2. Q-b");
        let qs = finalize_queries(&doc, parsed, 10).unwrap();
        assert_eq!(qs.len(), 2);
        let qs = finalize_queries(&doc, vec!["What  is X".into(), "what is x".into()], 10).unwrap();
        assert_eq!(qs.len(), 1);
        assert_eq!(qs[0].text, "What is X");
    }

    #[test]
    fn finalize_sets_provenance_and_caps() {
        let doc = Document::new("doc7", "the full text");
        let cands = vec!["the full text".into(), "a".into(), "b".into(), "c".into()];
        let qs = finalize_queries(&doc, cands, 2).unwrap();
        assert_eq!(
            qs.iter().map(|q| q.text.as_str()).collect::<Vec<_>>(),
            vec!["a", "b"]
        );
        assert!(qs
            .iter()
            .all(|q| q.source_doc_id.as_deref() == Some("doc7")));
        assert_eq!(qs[0].id, "doc7::q00");
        assert!(matches!(
            finalize_queries(&doc, vec![], 2),
            Err(GenError::NoQueries(_))
        ));
    }

    #[test]
    fn offline_is_deterministic_and_seed_sensitive() {
        let doc = Document::new(
            "d1",
            "Photosynthesis converts light energy into chemical energy. Chlorophyll absorbs mostly blue and red light. \
             Oxygen is released as a by-product of splitting water.",
        );
        let a = generate_queries(&doc, &GenConfig::offline(1)).unwrap();
        let b = generate_queries(&doc, &GenConfig::offline(1)).unwrap();
        let c = generate_queries(&doc, &GenConfig::offline(2)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 10);
        assert!(a.iter().all(|q| q.text != doc.text));
    }

    #[test]
    fn offline_ignores_document_id() {
        let a = generate_queries(
            &Document::new("x", "alpha beta gamma delta"),
            &GenConfig::offline(3),
        )
        .unwrap();
        let b = generate_queries(
            &Document::new("y", "alpha beta gamma delta"),
            &GenConfig::offline(3),
        )
        .unwrap();
        let texts = |qs: &[Query]| qs.iter().map(|q| q.text.clone()).collect::<Vec<_>>();
        assert_eq!(texts(&a), texts(&b));
    }

    #[test]
    fn tiny_document_under_generates() {
        let qs = generate_queries(&Document::new("d", "word"), &GenConfig::offline(0)).unwrap();
        assert!(!qs.is_empty() && qs.len() <= 10);
    }

    #[test]
    fn config_validation() {
        assert!(GenConfig::default().validate().is_err());
        let mut cfg = GenConfig::offline(0);
        cfg.validate().unwrap();
        cfg.prompt_template = "no placeholder".into();
        assert!(cfg.validate().is_err());
        cfg.prompt_template = "{document} {document}".into();
        assert!(cfg.validate().is_err());
        cfg = GenConfig::offline(0);
        cfg.queries_per_doc = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn default_prompt_renders_query_generator_instruction() {
        let cfg = GenConfig::default();
        let prompt = cfg.render_prompt(&Document::new("d", "DOC BODY"));
        assert_eq!(
            prompt,
            "You are a query generator bot. Generate 10 distinct queries from the document\n\nDOC BODY"
        );
    }

    #[test]
    fn completion_content_extracts_first_choice() {
        let v = json!({"choices": [{"message": {"role": "assistant", "content": "1. a"}}]});
        assert_eq!(completion_content(&v).unwrap(), "1. a");
        assert!(completion_content(&json!({"choices": []})).is_err());
    }

    #[test]
    fn generate_all_keeps_document_order() {
        let docs: Vec<Document> = (0..20)
            .map(|i| {
                Document::new(
                    format!("d{i}"),
                    format!("document number {i} talks about topic {i}"),
                )
            })
            .collect();
        let generator = OfflineGenerator::new(3, 5);
        let results = generate_all(&generator, &docs, 3, 4);
        for (doc, r) in docs.iter().zip(&results) {
            let qs = r.as_ref().unwrap();
            assert!(qs
                .iter()
                .all(|q| q.source_doc_id.as_deref() == Some(doc.id.as_str())));
        }
    }
}
