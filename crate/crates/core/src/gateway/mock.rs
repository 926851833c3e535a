//! Offline upstreams for tests, demos and dry runs.

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use sha2::{Digest, Sha256};

use super::{BackendTag, ChatRequest, Completion, GatewayError, Upstream, Usage};

type Responder = Box<dyn Fn(&ChatRequest) -> Result<String, GatewayError> + Send + Sync>;

/// Where a mock takes its embeddings from.
#[derive(Debug, Clone)]
pub enum MockEmbeddings {
    /// Exact text → vector table; unknown texts are an error.
    Table(HashMap<String, Vec<f64>>),
    /// Deterministic pseudo-random unit-scale vectors derived from SHA-256 of
    /// the text.
    Hashed { dim: usize },
    None,
}

impl MockEmbeddings {
    pub fn table<S: Into<String>>(entries: impl IntoIterator<Item = (S, Vec<f64>)>) -> Self {
        MockEmbeddings::Table(entries.into_iter().map(|(k, v)| (k.into(), v)).collect())
    }

    pub fn hashed(dim: usize) -> Self {
        MockEmbeddings::Hashed { dim }
    }
}

/// Hash-derived vector with components in `[-1, 1)`.
pub(crate) fn hashed_vector(text: &str, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|i| {
            let mut hasher = Sha256::new();
            hasher.update((i as u64).to_le_bytes());
            hasher.update(text.as_bytes());
            let digest = hasher.finalize();
            let word = u64::from_le_bytes(digest[..8].try_into().unwrap());
            (word >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
        .collect()
}

/// Scripted chat upstream tagged [`BackendTag::Mock`].
pub struct MockUpstream {
    responder: Responder,
    embeddings: MockEmbeddings,
    chat_calls: AtomicUsize,
    embed_calls: AtomicUsize,
}

impl std::fmt::Debug for MockUpstream {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MockUpstream")
            .field("embeddings", &self.embeddings)
            .field("chat_calls", &self.chat_calls)
            .finish_non_exhaustive()
    }
}

impl MockUpstream {
    pub fn from_fn(f: impl Fn(&ChatRequest) -> Result<String, GatewayError> + Send + Sync + 'static) -> Self {
        MockUpstream {
            responder: Box::new(f),
            embeddings: MockEmbeddings::None,
            chat_calls: AtomicUsize::new(0),
            embed_calls: AtomicUsize::new(0),
        }
    }

    /// Answers every chat request with the same text.
    pub fn constant(text: impl Into<String>) -> Self {
        let text = text.into();
        Self::from_fn(move |_| Ok(text.clone()))
    }

    /// Answers successive chat requests with successive script entries;
    /// running past the end is an error.
    pub fn scripted<S: Into<String>>(script: impl IntoIterator<Item = S>) -> Self {
        let queue: Mutex<VecDeque<String>> = Mutex::new(script.into_iter().map(Into::into).collect());
        Self::from_fn(move |_| {
            queue
                .lock()
                .unwrap()
                .pop_front()
                .ok_or_else(|| GatewayError::Script("script exhausted".into()))
        })
    }

    pub fn with_embeddings(mut self, embeddings: MockEmbeddings) -> Self {
        self.embeddings = embeddings;
        self
    }

    pub fn chat_calls(&self) -> usize {
        self.chat_calls.load(Ordering::SeqCst)
    }

    pub fn embed_calls(&self) -> usize {
        self.embed_calls.load(Ordering::SeqCst)
    }
}

impl Upstream for MockUpstream {
    fn tag(&self) -> BackendTag {
        BackendTag::Mock
    }

    fn chat(&self, request: &ChatRequest) -> Result<Completion, GatewayError> {
        self.chat_calls.fetch_add(1, Ordering::SeqCst);
        let text = (self.responder)(request)?;
        let usage = Usage {
            prompt_tokens: (request.system_text.split_whitespace().count()
                + request.user_text.split_whitespace().count()) as u64,
            completion_tokens: text.split_whitespace().count() as u64,
        };
        Ok(Completion { text, usage })
    }

    fn embed(&self, _model_name: &str, text: &str) -> Result<Vec<f64>, GatewayError> {
        self.embed_calls.fetch_add(1, Ordering::SeqCst);
        match &self.embeddings {
            MockEmbeddings::Table(table) => table
                .get(text)
                .cloned()
                .ok_or_else(|| GatewayError::Script(format!("no mock embedding for {text:?}"))),
            MockEmbeddings::Hashed { dim } => Ok(hashed_vector(text, *dim)),
            MockEmbeddings::None => Err(GatewayError::Script("mock has no embeddings configured".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scripted_runs_in_order_then_fails() {
        let mock = MockUpstream::scripted(["a", "b"]);
        let req = ChatRequest::new("m", "s", "u");
        assert_eq!(mock.chat(&req).unwrap().text, "a");
        assert_eq!(mock.chat(&req).unwrap().text, "b");
        assert!(matches!(mock.chat(&req), Err(GatewayError::Script(_))));
    }

    #[test]
    fn hashed_vectors_are_stable() {
        let a = hashed_vector("title", 8);
        assert_eq!(a, hashed_vector("title", 8));
        assert_ne!(a, hashed_vector("other title", 8));
        assert!(a.iter().all(|v| (-1.0..1.0).contains(v)));
    }
}
