//! Pluggable model backend.
//!
//! Every model call the engine makes (generation, exhaustive-query
//! classification, chunk summarization, embedding) goes through
//! [`LlmBackend`]. Two implementations ship: [`MockBackend`], a pure
//! deterministic function of its inputs used by tests and offline runs, and
//! [`HttpBackend`], a blocking client for an OpenAI-compatible endpoint.

mod http;
mod instrumented;
mod mock;

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::HttpBackend;
pub use instrumented::{CallCounts, InstrumentedBackend, Operation};
pub use mock::{MockBackend, EXHAUSTIVE_KEYWORDS};

pub const DEFAULT_EMBED_DIM: usize = 256;
pub const MIN_EMBED_DIM: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("prompt must not be empty")]
    EmptyPrompt,
    #[error("backend unreachable: {0}")]
    Unreachable(String),
    #[error("backend returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed backend response: {0}")]
    Protocol(String),
    #[error("invalid backend request: {0}")]
    InvalidRequest(String),
    #[error("invalid backend configuration: {0}")]
    Config(String),
    #[error("injected failure in {0:?}")]
    Injected(Operation),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RequestKind {
    Generate,
    Classify,
    Summarize,
    Embed,
}

/// A single model call, validated on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct BackendRequest {
    kind: RequestKind,
    prompt_text: String,
    aux_text: Option<String>,
    max_output_tokens: usize,
}

impl BackendRequest {
    pub fn new(
        kind: RequestKind,
        prompt_text: impl Into<String>,
        aux_text: Option<String>,
        max_output_tokens: usize,
    ) -> Result<Self, BackendError> {
        let prompt_text = prompt_text.into();
        if prompt_text.is_empty() && kind != RequestKind::Embed {
            return Err(BackendError::EmptyPrompt);
        }
        if max_output_tokens == 0 {
            return Err(BackendError::InvalidRequest(
                "max_output_tokens must be at least 1".into(),
            ));
        }
        Ok(Self {
            kind,
            prompt_text,
            aux_text,
            max_output_tokens,
        })
    }

    pub fn kind(&self) -> RequestKind {
        self.kind
    }

    pub fn prompt_text(&self) -> &str {
        &self.prompt_text
    }

    pub fn aux_text(&self) -> Option<&str> {
        self.aux_text.as_deref()
    }

    pub fn max_output_tokens(&self) -> usize {
        self.max_output_tokens
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BackendOutput {
    Text(String),
    Probability(f64),
    Vector(Vec<f64>),
}

/// The model interface used throughout the engine.
///
/// Implementations must be callable concurrently from many sessions.
pub trait LlmBackend: Send + Sync {
    fn name(&self) -> &str;

    /// Length of every vector returned by [`LlmBackend::embed`].
    fn embed_dim(&self) -> usize;

    /// Free-form generation. Output is never empty.
    fn generate(&self, prompt: &str, max_tokens: usize) -> Result<String, BackendError>;

    /// Probability in `[0, 1]` that answering `query` needs the whole memory
    /// corpus rather than a handful of entries.
    fn classify_exhaustive(&self, query: &str) -> Result<f64, BackendError>;

    /// Summarize `chunk` with respect to `query`.
    fn summarize(&self, query: &str, chunk: &str) -> Result<String, BackendError>;

    /// Unit-norm embedding of length [`LlmBackend::embed_dim`].
    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError>;

    fn execute(&self, request: &BackendRequest) -> Result<BackendOutput, BackendError> {
        match request.kind() {
            RequestKind::Generate => self
                .generate(request.prompt_text(), request.max_output_tokens())
                .map(BackendOutput::Text),
            RequestKind::Classify => self
                .classify_exhaustive(request.prompt_text())
                .map(BackendOutput::Probability),
            RequestKind::Summarize => self
                .summarize(request.prompt_text(), request.aux_text().unwrap_or_default())
                .map(BackendOutput::Text),
            RequestKind::Embed => self.embed(request.prompt_text()).map(BackendOutput::Vector),
        }
    }
}

impl<T: LlmBackend + ?Sized> LlmBackend for Arc<T> {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn embed_dim(&self) -> usize {
        (**self).embed_dim()
    }
    fn generate(&self, prompt: &str, max_tokens: usize) -> Result<String, BackendError> {
        (**self).generate(prompt, max_tokens)
    }
    fn classify_exhaustive(&self, query: &str) -> Result<f64, BackendError> {
        (**self).classify_exhaustive(query)
    }
    fn summarize(&self, query: &str, chunk: &str) -> Result<String, BackendError> {
        (**self).summarize(query, chunk)
    }
    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        (**self).embed(text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub backend_kind: BackendKind,
    /// Base URL of the OpenAI-compatible API, e.g. `https://host/v1`.
    pub endpoint_url: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env_var: String,
    pub model_name: String,
    /// Embedding model; falls back to `model_name` when unset.
    pub embedding_model: Option<String>,
    pub embed_dim: usize,
    /// Seconds.
    pub request_timeout: f64,
    pub max_in_flight: usize,
    /// Seed of the mock embedder's token hash.
    pub mock_seed: u64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            backend_kind: BackendKind::Mock,
            endpoint_url: "http://127.0.0.1:8000/v1".into(),
            api_key_env_var: "ANCHORAGE_API_KEY".into(),
            model_name: "gpt-4o-mini".into(),
            embedding_model: None,
            embed_dim: DEFAULT_EMBED_DIM,
            request_timeout: 30.0,
            max_in_flight: 4,
            mock_seed: mock::DEFAULT_MOCK_SEED,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.embed_dim < MIN_EMBED_DIM {
            return Err(BackendError::Config(format!(
                "embed_dim must be at least {MIN_EMBED_DIM}, got {}",
                self.embed_dim
            )));
        }
        if !(self.request_timeout.is_finite() && self.request_timeout > 0.0) {
            return Err(BackendError::Config(
                "request_timeout must be a positive number of seconds".into(),
            ));
        }
        if self.max_in_flight == 0 {
            return Err(BackendError::Config("max_in_flight must be at least 1".into()));
        }
        if self.backend_kind == BackendKind::Http {
            http::validate_endpoint(&self.endpoint_url)?;
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.request_timeout)
    }
}

/// Construct the backend described by `config`.
pub fn build_backend(config: &BackendConfig) -> Result<Arc<dyn LlmBackend>, BackendError> {
    config.validate()?;
    Ok(match config.backend_kind {
        BackendKind::Mock => Arc::new(MockBackend::with_seed(config.embed_dim, config.mock_seed)),
        BackendKind::Http => Arc::new(HttpBackend::new(config.clone())?),
    })
}

/// Scale `v` to unit L2 norm. A zero vector becomes the first basis vector.
pub(crate) fn normalize_or_first_basis(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        v.iter_mut().for_each(|x| *x = 0.0);
        if let Some(first) = v.first_mut() {
            *first = 1.0;
        }
        return v;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

pub(crate) fn first_basis(dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    v[0] = 1.0;
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_validation() {
        assert_eq!(
            BackendRequest::new(RequestKind::Generate, "", None, 10),
            Err(BackendError::EmptyPrompt)
        );
        assert!(BackendRequest::new(RequestKind::Embed, "", None, 1).is_ok());
        assert!(matches!(
            BackendRequest::new(RequestKind::Generate, "x", None, 0),
            Err(BackendError::InvalidRequest(_))
        ));
    }

    #[test]
    fn execute_dispatches_by_kind() {
        let mock = MockBackend::new(16);
        let req = BackendRequest::new(RequestKind::Generate, "ECHO:hi", None, 8).unwrap();
        assert_eq!(mock.execute(&req).unwrap(), BackendOutput::Text("hi".into()));
        let req = BackendRequest::new(RequestKind::Classify, "overall?", None, 1).unwrap();
        assert_eq!(mock.execute(&req).unwrap(), BackendOutput::Probability(1.0));
        let req = BackendRequest::new(
            RequestKind::Summarize,
            "q",
            Some("## [x] user (session=s, entry=4)".into()),
            8,
        )
        .unwrap();
        assert_eq!(mock.execute(&req).unwrap(), BackendOutput::Text("SUM[4]".into()));
    }

    #[test]
    fn config_validation() {
        let mut cfg = BackendConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.embed_dim = 4;
        assert!(matches!(cfg.validate(), Err(BackendError::Config(_))));
        cfg.embed_dim = 16;
        cfg.backend_kind = BackendKind::Http;
        cfg.endpoint_url = "not a url".into();
        assert!(matches!(cfg.validate(), Err(BackendError::Config(_))));
        cfg.endpoint_url = "https://api.example.com/v1".into();
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn zero_vector_normalizes_to_first_basis() {
        assert_eq!(normalize_or_first_basis(vec![0.0; 3]), vec![1.0, 0.0, 0.0]);
        let v = normalize_or_first_basis(vec![3.0, 4.0]);
        assert!((v[0] - 0.6).abs() < 1e-12 && (v[1] - 0.8).abs() < 1e-12);
    }
}
