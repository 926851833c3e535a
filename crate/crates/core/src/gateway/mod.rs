//! Chat-completion and embedding access.
//!
//! Every model call in the crate goes through a [`Gateway`]. The gateway
//! runs in one of four modes:
//!
//! | mode     | store lookup | upstream fetch on miss | persists |
//! |----------|--------------|------------------------|----------|
//! | `Live`   | no           | always                 | yes      |
//! | `Cache`  | yes          | yes                    | yes      |
//! | `Replay` | yes          | never (`ReplayMiss`)   | no       |
//! | `Mock`   | embeddings   | scripted upstream      | no       |
//!
//! Each [`ChatResponse`] carries the [`BackendTag`] that produced it and the
//! gateway keeps an [`Audit`] of all tags served, so a test can assert that
//! a run performed no network calls.

mod http;
mod mock;
mod store;

use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use http::OpenAiCompatible;
pub use mock::{MockEmbeddings, MockUpstream};
pub use store::{ChatRecord, EmbeddingRecord, ResponseStore, CHAT_RECORD_FORMAT, EMBEDDING_RECORD_FORMAT};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("rate limited: {0}")]
    RateLimited(String),
    #[error("API error (HTTP {status}): {body}")]
    Api { status: u16, body: String },
    #[error("replay store has no entry for {kind} request {key}")]
    ReplayMiss { kind: &'static str, key: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("embedding dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("embedding has zero norm")]
    ZeroNorm,
    #[error("no upstream configured for {0} mode")]
    NoUpstream(&'static str),
    #[error("malformed upstream response: {0}")]
    Decode(String),
    #[error("mock script: {0}")]
    Script(String),
    #[error("response store {path}: {message}")]
    Store { path: String, message: String },
}

impl GatewayError {
    /// Transport failures and rate limits are retried; everything else is
    /// returned immediately.
    pub fn is_retriable(&self) -> bool {
        matches!(self, GatewayError::Transport(_) | GatewayError::RateLimited(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendTag {
    Live,
    Cache,
    Replay,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system_text: String,
    pub user_text: String,
    pub model_name: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl ChatRequest {
    pub fn new(model_name: impl Into<String>, system_text: impl Into<String>, user_text: impl Into<String>) -> Self {
        ChatRequest {
            system_text: system_text.into(),
            user_text: user_text.into(),
            model_name: model_name.into(),
            temperature: 0.0,
            max_output_tokens: 1024,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.user_text.is_empty() {
            return Err(GatewayError::InvalidRequest("user_text is empty".into()));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature must be a non-negative number, got {}",
                self.temperature
            )));
        }
        if self.max_output_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_output_tokens must be positive".into()));
        }
        Ok(())
    }

    /// Content address of the request: SHA-256 over model name, system
    /// text, user text and temperature.
    pub fn cache_key(&self) -> String {
        #[derive(Serialize)]
        struct Key<'a> {
            kind: &'a str,
            model: &'a str,
            system: &'a str,
            user: &'a str,
            temperature: f64,
        }
        digest_json(&Key {
            kind: "chat",
            model: &self.model_name,
            system: &self.system_text,
            user: &self.user_text,
            temperature: self.temperature,
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl std::ops::AddAssign for Usage {
    fn add_assign(&mut self, rhs: Usage) {
        self.prompt_tokens += rhs.prompt_tokens;
        self.completion_tokens += rhs.completion_tokens;
    }
}

/// Raw upstream completion, before the gateway tags it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub usage: Usage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub usage: Usage,
    pub backend_tag: BackendTag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub model_name: String,
    pub source_text_digest: String,
}

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Hex SHA-256 of a string.
pub fn text_digest(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

pub(crate) fn digest_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("key serialization cannot fail");
    hex::encode(Sha256::digest(&bytes))
}

pub(crate) fn embedding_key(model_name: &str, text: &str) -> String {
    #[derive(Serialize)]
    struct Key<'a> {
        kind: &'a str,
        model: &'a str,
        text_sha256: &'a str,
    }
    digest_json(&Key {
        kind: "embedding",
        model: model_name,
        text_sha256: &text_digest(text),
    })
}

/// `dot(a, b) / (|a| |b|)`, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, GatewayError> {
    cosine(&a.values, &b.values)
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, GatewayError> {
    if a.len() != b.len() {
        return Err(GatewayError::DimensionMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(GatewayError::ZeroNorm);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// A model service the gateway can fetch from.
pub trait Upstream: Send + Sync {
    fn tag(&self) -> BackendTag;
    fn chat(&self, request: &ChatRequest) -> Result<Completion, GatewayError>;
    fn embed(&self, model_name: &str, text: &str) -> Result<Vec<f64>, GatewayError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GatewayMode {
    Live,
    Cache,
    Replay,
    Mock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            initial_backoff: Duration::from_secs(1),
        }
    }
}

impl RetryPolicy {
    pub fn no_wait(max_attempts: u32) -> Self {
        RetryPolicy {
            max_attempts,
            initial_backoff: Duration::ZERO,
        }
    }

    fn run<T>(&self, mut op: impl FnMut() -> Result<T, GatewayError>) -> Result<T, GatewayError> {
        let mut delay = self.initial_backoff;
        let mut attempt = 1;
        loop {
            match op() {
                Err(e) if e.is_retriable() && attempt < self.max_attempts => {
                    log::warn!("attempt {attempt} failed ({e}); retrying in {delay:?}");
                    std::thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

/// Counts of responses served, by backend tag, plus upstream fetches.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Audit {
    pub live: u64,
    pub cache: u64,
    pub replay: u64,
    pub mock: u64,
    pub chat_fetches: u64,
    pub embedding_fetches: u64,
}

impl Audit {
    fn record(&mut self, tag: BackendTag) {
        match tag {
            BackendTag::Live => self.live += 1,
            BackendTag::Cache => self.cache += 1,
            BackendTag::Replay => self.replay += 1,
            BackendTag::Mock => self.mock += 1,
        }
    }

    /// Responses that came from a live network service.
    pub fn network_calls(&self) -> u64 {
        self.live
    }

    pub fn tags_used(&self) -> Vec<BackendTag> {
        [
            (BackendTag::Live, self.live),
            (BackendTag::Cache, self.cache),
            (BackendTag::Replay, self.replay),
            (BackendTag::Mock, self.mock),
        ]
        .into_iter()
        .filter(|(_, n)| *n > 0)
        .map(|(t, _)| t)
        .collect()
    }
}

struct InFlight {
    limit: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

impl InFlight {
    fn run<T>(&self, f: impl FnOnce() -> T) -> T {
        {
            let mut active = self.active.lock().unwrap();
            while *active >= self.limit {
                active = self.freed.wait(active).unwrap();
            }
            *active += 1;
        }
        let out = f();
        *self.active.lock().unwrap() -= 1;
        self.freed.notify_one();
        out
    }
}

pub struct Gateway {
    mode: GatewayMode,
    upstream: Option<Arc<dyn Upstream>>,
    store: ResponseStore,
    embedding_model: String,
    retry: RetryPolicy,
    in_flight: InFlight,
    audit: Mutex<Audit>,
    dims: Mutex<std::collections::HashMap<String, usize>>,
    key_locks: Mutex<std::collections::HashMap<String, Arc<Mutex<()>>>>,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("mode", &self.mode)
            .field("store", &self.store)
            .field("embedding_model", &self.embedding_model)
            .finish_non_exhaustive()
    }
}

impl Gateway {
    fn build(mode: GatewayMode, upstream: Option<Arc<dyn Upstream>>, store: ResponseStore) -> Self {
        Gateway {
            mode,
            upstream,
            store,
            embedding_model: "text-embedding-ada-002".to_string(),
            retry: RetryPolicy::default(),
            in_flight: InFlight {
                limit: 4,
                active: Mutex::new(0),
                freed: Condvar::new(),
            },
            audit: Mutex::new(Audit::default()),
            dims: Mutex::new(Default::default()),
            key_locks: Mutex::new(Default::default()),
        }
    }

    /// Always fetches; persists every response to `store`.
    pub fn live(upstream: Arc<dyn Upstream>, store: ResponseStore) -> Self {
        Self::build(GatewayMode::Live, Some(upstream), store)
    }

    /// Serves from `store`, fetching and persisting on a miss.
    pub fn cached(upstream: Arc<dyn Upstream>, store: ResponseStore) -> Self {
        Self::build(GatewayMode::Cache, Some(upstream), store)
    }

    /// Serves only from `store`; never touches an upstream.
    pub fn replay(store: ResponseStore) -> Self {
        Self::build(GatewayMode::Replay, None, store)
    }

    /// Passes chat calls straight to a scripted upstream. Embeddings are
    /// memoized in memory.
    pub fn mock(upstream: Arc<dyn Upstream>) -> Self {
        Self::build(GatewayMode::Mock, Some(upstream), ResponseStore::in_memory())
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_max_in_flight(mut self, limit: usize) -> Self {
        self.in_flight.limit = limit.max(1);
        self
    }

    pub fn with_embedding_model(mut self, model: impl Into<String>) -> Self {
        self.embedding_model = model.into();
        self
    }

    pub fn mode(&self) -> GatewayMode {
        self.mode
    }

    pub fn embedding_model(&self) -> &str {
        &self.embedding_model
    }

    pub fn store(&self) -> &ResponseStore {
        &self.store
    }

    pub fn audit(&self) -> Audit {
        *self.audit.lock().unwrap()
    }

    fn upstream(&self) -> Result<&Arc<dyn Upstream>, GatewayError> {
        self.upstream.as_ref().ok_or(GatewayError::NoUpstream(match self.mode {
            GatewayMode::Live => "live",
            GatewayMode::Cache => "cache",
            GatewayMode::Replay => "replay",
            GatewayMode::Mock => "mock",
        }))
    }

    // Serializes lookup-then-fetch per cache key so a request is fetched at
    // most once even under concurrent callers.
    fn key_lock(&self, key: &str) -> Arc<Mutex<()>> {
        self.key_locks
            .lock()
            .unwrap()
            .entry(key.to_string())
            .or_default()
            .clone()
    }

    fn fetch_chat(&self, request: &ChatRequest) -> Result<(Completion, BackendTag), GatewayError> {
        let upstream = self.upstream()?;
        self.audit.lock().unwrap().chat_fetches += 1;
        let completion = self.in_flight.run(|| self.retry.run(|| upstream.chat(request)))?;
        Ok((completion, upstream.tag()))
    }

    pub fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        request.validate()?;
        let key = request.cache_key();
        let (completion, tag) = match self.mode {
            GatewayMode::Mock => self.fetch_chat(request)?,
            GatewayMode::Replay => {
                let record = self.store.get_chat(&key)?.ok_or(GatewayError::ReplayMiss {
                    kind: "chat",
                    key: key.clone(),
                })?;
                (record.response, BackendTag::Replay)
            }
            GatewayMode::Cache => {
                let lock = self.key_lock(&key);
                let _held = lock.lock().unwrap();
                match self.store.get_chat(&key)? {
                    Some(record) => (record.response, BackendTag::Cache),
                    None => self.fetch_and_store(request, &key)?,
                }
            }
            GatewayMode::Live => self.fetch_and_store(request, &key)?,
        };
        self.audit.lock().unwrap().record(tag);
        Ok(ChatResponse {
            text: completion.text,
            usage: completion.usage,
            backend_tag: tag,
        })
    }

    fn fetch_and_store(&self, request: &ChatRequest, key: &str) -> Result<(Completion, BackendTag), GatewayError> {
        let (completion, tag) = self.fetch_chat(request)?;
        self.store.put_chat(ChatRecord::new(key.to_string(), request, completion.clone()))?;
        Ok((completion, tag))
    }

    /// Embeds `text` with the gateway's embedding model.
    pub fn embed(&self, text: &str) -> Result<EmbeddingVector, GatewayError> {
        if text.is_empty() {
            return Err(GatewayError::InvalidRequest("cannot embed empty text".into()));
        }
        let model = self.embedding_model.as_str();
        let key = embedding_key(model, text);
        let lock = self.key_lock(&key);
        let _held = lock.lock().unwrap();
        let cached = match self.mode {
            GatewayMode::Live => None,
            _ => self.store.get_embedding(&key)?,
        };
        let (values, tag) = match cached {
            Some(record) => (
                record.values,
                if self.mode == GatewayMode::Replay {
                    BackendTag::Replay
                } else {
                    BackendTag::Cache
                },
            ),
            None if self.mode == GatewayMode::Replay => {
                return Err(GatewayError::ReplayMiss { kind: "embedding", key })
            }
            None => {
                let upstream = self.upstream()?;
                self.audit.lock().unwrap().embedding_fetches += 1;
                let values = self
                    .in_flight
                    .run(|| self.retry.run(|| upstream.embed(model, text)))?;
                self.store.put_embedding(EmbeddingRecord::new(key, model, text, values.clone()))?;
                (values, upstream.tag())
            }
        };
        self.check_vector(model, &values)?;
        self.audit.lock().unwrap().record(tag);
        Ok(EmbeddingVector {
            values,
            model_name: model.to_string(),
            source_text_digest: text_digest(text),
        })
    }

    fn check_vector(&self, model: &str, values: &[f64]) -> Result<(), GatewayError> {
        if values.iter().all(|v| *v == 0.0) {
            return Err(GatewayError::ZeroNorm);
        }
        let mut dims = self.dims.lock().unwrap();
        let expected = *dims.entry(model.to_string()).or_insert(values.len());
        if expected != values.len() {
            return Err(GatewayError::DimensionMismatch {
                left: expected,
                right: values.len(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn vector(values: &[f64]) -> EmbeddingVector {
        EmbeddingVector {
            values: values.to_vec(),
            model_name: "m".into(),
            source_text_digest: String::new(),
        }
    }

    #[test]
    fn cosine_examples() {
        let a = vector(&[1.0, 2.0, 3.0]);
        let b = vector(&[4.0, 5.0, 6.0]);
        // 32 / (sqrt(14) * sqrt(77))
        let oracle = 32.0 / (14f64.sqrt() * 77f64.sqrt());
        assert!((oracle - 0.974631846).abs() < 1e-6);
        assert!((cosine_similarity(&a, &b).unwrap() - oracle).abs() < 1e-12);
        assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        assert_eq!(cosine_similarity(&vector(&[1.0, 0.0]), &vector(&[0.0, 1.0])).unwrap(), 0.0);
        assert!(matches!(
            cosine_similarity(&a, &vector(&[1.0])),
            Err(GatewayError::DimensionMismatch { .. })
        ));
        assert!(matches!(cosine_similarity(&a, &vector(&[0.0; 3])), Err(GatewayError::ZeroNorm)));
    }

    proptest! {
        #[test]
        fn cosine_symmetric_and_scale_invariant(
            a in proptest::collection::vec(-10.0f64..10.0, 4),
            b in proptest::collection::vec(-10.0f64..10.0, 4),
            scale in 0.01f64..100.0,
        ) {
            prop_assume!(a.iter().any(|v| v.abs() > 1e-3) && b.iter().any(|v| v.abs() > 1e-3));
            let ab = cosine(&a, &b).unwrap();
            prop_assert!((ab - cosine(&b, &a).unwrap()).abs() < 1e-9);
            let scaled: Vec<f64> = a.iter().map(|v| v * scale).collect();
            prop_assert!((ab - cosine(&scaled, &b).unwrap()).abs() < 1e-9);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }
    }

    #[test]
    fn mock_returns_scripted_text() {
        let gw = Gateway::mock(Arc::new(MockUpstream::constant("1. Premise")));
        let resp = gw.chat(&ChatRequest::new("m", "sys", "user")).unwrap();
        assert_eq!(resp.text, "1. Premise");
        assert_eq!(resp.backend_tag, BackendTag::Mock);
    }

    #[test]
    fn cache_fetches_once() {
        let mock = Arc::new(MockUpstream::constant("1. Claim"));
        let gw = Gateway::cached(mock.clone(), ResponseStore::in_memory());
        let req = ChatRequest::new("m", "sys", "user");
        let first = gw.chat(&req).unwrap();
        let second = gw.chat(&req).unwrap();
        assert_eq!(first.text, second.text);
        assert_eq!(first.backend_tag, BackendTag::Mock);
        assert_eq!(second.backend_tag, BackendTag::Cache);
        assert_eq!(mock.chat_calls(), 1);
        assert_eq!(gw.audit().chat_fetches, 1);
    }

    #[test]
    fn cache_key_separates_temperature_and_model() {
        let mock = Arc::new(MockUpstream::constant("x"));
        let gw = Gateway::cached(mock.clone(), ResponseStore::in_memory());
        let mut req = ChatRequest::new("m", "sys", "user");
        gw.chat(&req).unwrap();
        req.temperature = 0.7;
        gw.chat(&req).unwrap();
        req.model_name = "other".into();
        gw.chat(&req).unwrap();
        assert_eq!(mock.chat_calls(), 3);
    }

    #[test]
    fn replay_miss_is_fatal() {
        let gw = Gateway::replay(ResponseStore::in_memory());
        let err = gw.chat(&ChatRequest::new("m", "s", "u")).unwrap_err();
        assert!(matches!(err, GatewayError::ReplayMiss { kind: "chat", .. }));
        assert!(matches!(gw.embed("T"), Err(GatewayError::ReplayMiss { .. })));
    }

    #[test]
    fn replay_serves_recorded_responses_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let req = ChatRequest::new("m", "s", "u");
        {
            let gw = Gateway::cached(
                Arc::new(MockUpstream::constant("1. Premise").with_embeddings(MockEmbeddings::hashed(8))),
                ResponseStore::on_disk(dir.path()).unwrap(),
            );
            gw.chat(&req).unwrap();
            gw.embed("A title").unwrap();
        }
        let gw = Gateway::replay(ResponseStore::on_disk(dir.path()).unwrap());
        let resp = gw.chat(&req).unwrap();
        assert_eq!(resp.text, "1. Premise");
        assert_eq!(resp.backend_tag, BackendTag::Replay);
        assert_eq!(gw.embed("A title").unwrap().dim(), 8);
        assert_eq!(gw.audit().network_calls(), 0);
        assert_eq!(gw.audit().tags_used(), vec![BackendTag::Replay]);
    }

    #[test]
    fn live_mode_always_fetches_and_persists() {
        let mock = Arc::new(MockUpstream::constant("ok"));
        let store = ResponseStore::in_memory();
        let gw = Gateway::live(mock.clone(), store.clone());
        let req = ChatRequest::new("m", "s", "u");
        gw.chat(&req).unwrap();
        gw.chat(&req).unwrap();
        assert_eq!(mock.chat_calls(), 2);
        assert!(store.get_chat(&req.cache_key()).unwrap().is_some());
    }

    #[test]
    fn embed_mock_table_and_memo() {
        let mock = Arc::new(
            MockUpstream::constant("").with_embeddings(MockEmbeddings::table([("T", vec![1.0, 0.0, 0.0])])),
        );
        let gw = Gateway::mock(mock.clone());
        let v = gw.embed("T").unwrap();
        assert_eq!(v.values, vec![1.0, 0.0, 0.0]);
        assert_eq!(gw.embed("T").unwrap(), v);
        assert_eq!(mock.embed_calls(), 1);
        assert!(matches!(gw.embed(""), Err(GatewayError::InvalidRequest(_))));
    }

    #[test]
    fn embedding_dimension_is_fixed_per_model() {
        let mock = MockUpstream::constant("")
            .with_embeddings(MockEmbeddings::table([("a", vec![1.0, 0.0]), ("b", vec![1.0, 0.0, 0.0]), ("z", vec![0.0])]));
        let gw = Gateway::mock(Arc::new(mock));
        gw.embed("a").unwrap();
        assert!(matches!(gw.embed("b"), Err(GatewayError::DimensionMismatch { .. })));
        assert!(matches!(gw.embed("z"), Err(GatewayError::ZeroNorm)));
    }

    #[test]
    fn request_validation() {
        let gw = Gateway::mock(Arc::new(MockUpstream::constant("x")));
        let mut req = ChatRequest::new("m", "s", "");
        assert!(matches!(gw.chat(&req), Err(GatewayError::InvalidRequest(_))));
        req.user_text = "u".into();
        req.temperature = -1.0;
        assert!(gw.chat(&req).is_err());
    }

    struct Flaky {
        failures: AtomicUsize,
        calls: AtomicUsize,
        error: fn() -> GatewayError,
    }

    impl Upstream for Flaky {
        fn tag(&self) -> BackendTag {
            BackendTag::Mock
        }
        fn chat(&self, _: &ChatRequest) -> Result<Completion, GatewayError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            if self.failures.load(Ordering::SeqCst) > 0 {
                self.failures.fetch_sub(1, Ordering::SeqCst);
                return Err((self.error)());
            }
            Ok(Completion {
                text: "done".into(),
                usage: Usage::default(),
            })
        }
        fn embed(&self, _: &str, _: &str) -> Result<Vec<f64>, GatewayError> {
            Err(GatewayError::Transport("down".into()))
        }
    }

    fn flaky(failures: usize, error: fn() -> GatewayError) -> Arc<Flaky> {
        Arc::new(Flaky {
            failures: AtomicUsize::new(failures),
            calls: AtomicUsize::new(0),
            error,
        })
    }

    #[test]
    fn retries_transport_errors_up_to_three_attempts() {
        let up = flaky(2, || GatewayError::RateLimited("429".into()));
        let gw = Gateway::mock(up.clone()).with_retry(RetryPolicy::no_wait(3));
        assert_eq!(gw.chat(&ChatRequest::new("m", "s", "u")).unwrap().text, "done");
        assert_eq!(up.calls.load(Ordering::SeqCst), 3);

        let up = flaky(3, || GatewayError::Transport("reset".into()));
        let gw = Gateway::mock(up.clone()).with_retry(RetryPolicy::no_wait(3));
        assert!(matches!(gw.chat(&ChatRequest::new("m", "s", "u")), Err(GatewayError::Transport(_))));
        assert_eq!(up.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn api_errors_are_not_retried() {
        let up = flaky(1, || GatewayError::Api {
            status: 400,
            body: "bad".into(),
        });
        let gw = Gateway::mock(up.clone()).with_retry(RetryPolicy::no_wait(3));
        assert!(gw.chat(&ChatRequest::new("m", "s", "u")).is_err());
        assert_eq!(up.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn concurrent_callers_share_one_cache_entry() {
        let mock = Arc::new(MockUpstream::constant("same"));
        let gw = Arc::new(Gateway::cached(mock.clone(), ResponseStore::in_memory()).with_max_in_flight(2));
        std::thread::scope(|s| {
            for i in 0..8 {
                let gw = gw.clone();
                s.spawn(move || gw.chat(&ChatRequest::new("m", "s", format!("u{}", i % 2))).unwrap());
            }
        });
        let audit = gw.audit();
        assert_eq!(audit.mock + audit.cache, 8);
        assert_eq!(mock.chat_calls(), 2);
        assert_eq!(gw.store().len(), 2);
    }
}
