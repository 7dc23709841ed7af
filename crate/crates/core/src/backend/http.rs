use std::sync::{Condvar, Mutex, OnceLock};

use regex::Regex;

use serde_json::{json, Value};

use super::{first_basis, normalize_or_first_basis, BackendConfig, BackendError, LlmBackend};

const CLASSIFY_INSTRUCTIONS: &str = "You route questions asked to an assistant that keeps a \
long conversation memory. Answer with a single number between 0 and 1: the probability that \
answering the question requires reading the whole memory (patterns, overviews, summaries of \
everything) rather than looking up a few specific entries. Output only the number.";

const SUMMARIZE_INSTRUCTIONS: &str = "Summarize the memory excerpt below with respect to the \
question. Keep every fact that could help answer it and keep the entry ids (entry=<n>) or \
SUM[...] markers of the material you used.";

pub(super) fn validate_endpoint(url: &str) -> Result<(), BackendError> {
    let uri: ureq::http::Uri = url
        .parse()
        .map_err(|e| BackendError::Config(format!("invalid endpoint_url {url:?}: {e}")))?;
    match uri.scheme_str() {
        Some("http") | Some("https") => {}
        _ => {
            return Err(BackendError::Config(format!(
                "endpoint_url {url:?} must use http or https"
            )))
        }
    }
    if uri.authority().is_none() {
        return Err(BackendError::Config(format!(
            "endpoint_url {url:?} has no host"
        )));
    }
    Ok(())
}

/// Counting gate bounding concurrent in-flight requests.
#[derive(Debug)]
struct InFlightLimit {
    available: Mutex<usize>,
    released: Condvar,
}

struct Permit<'a>(&'a InFlightLimit);

impl InFlightLimit {
    fn new(limit: usize) -> Self {
        Self {
            available: Mutex::new(limit),
            released: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut available = self.available.lock().unwrap_or_else(|e| e.into_inner());
        while *available == 0 {
            available = self
                .released
                .wait(available)
                .unwrap_or_else(|e| e.into_inner());
        }
        *available -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut available = self.0.available.lock().unwrap_or_else(|e| e.into_inner());
        *available += 1;
        self.0.released.notify_one();
    }
}

/// Blocking client for an OpenAI-compatible `chat/completions` and
/// `embeddings` API.
pub struct HttpBackend {
    config: BackendConfig,
    agent: ureq::Agent,
    limit: InFlightLimit,
}

impl std::fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpBackend")
            .field("endpoint_url", &self.config.endpoint_url)
            .field("model_name", &self.config.model_name)
            .finish_non_exhaustive()
    }
}

impl HttpBackend {
    pub fn new(config: BackendConfig) -> Result<Self, BackendError> {
        validate_endpoint(&config.endpoint_url)?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout()))
            .http_status_as_error(false)
            .build()
            .into();
        let limit = InFlightLimit::new(config.max_in_flight.max(1));
        Ok(Self {
            config,
            agent,
            limit,
        })
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.config.endpoint_url.trim_end_matches('/'), path)
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value, BackendError> {
        let _permit = self.limit.acquire();
        let mut request = self.agent.post(&self.url(path));
        if let Ok(key) = std::env::var(&self.config.api_key_env_var) {
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = request
            .send_json(body)
            .map_err(|e| BackendError::Unreachable(e.to_string()))?;
        let status = response.status().as_u16();
        if !(200..300).contains(&status) {
            let body = response.body_mut().read_to_string().unwrap_or_default();
            return Err(BackendError::Status { status, body });
        }
        response
            .body_mut()
            .read_json::<Value>()
            .map_err(|e| BackendError::Protocol(e.to_string()))
    }

    fn chat(&self, system: Option<&str>, user: &str, max_tokens: usize) -> Result<String, BackendError> {
        let mut messages = Vec::new();
        if let Some(system) = system {
            messages.push(json!({"role": "system", "content": system}));
        }
        messages.push(json!({"role": "user", "content": user}));
        let body = json!({
            "model": self.config.model_name,
            "messages": messages,
            "max_tokens": max_tokens,
        });
        let reply = self.post("chat/completions", &body)?;
        let content = reply
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| BackendError::Protocol("missing choices[0].message.content".into()))?;
        if content.trim().is_empty() {
            return Err(BackendError::Protocol("empty completion".into()));
        }
        Ok(content.to_string())
    }
}

/// First number in `text`, clamped to `[0, 1]`.
fn parse_probability(text: &str) -> Result<f64, BackendError> {
    static NUMBER: OnceLock<Regex> = OnceLock::new();
    NUMBER
        .get_or_init(|| Regex::new(r"\d+(?:\.\d+)?|\.\d+").expect("static regex"))
        .find(text)
        .and_then(|m| m.as_str().parse::<f64>().ok())
        .map(|p| p.clamp(0.0, 1.0))
        .ok_or_else(|| BackendError::Protocol(format!("classifier reply has no number: {text:?}")))
}

impl LlmBackend for HttpBackend {
    fn name(&self) -> &str {
        "http"
    }

    fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    fn generate(&self, prompt: &str, max_tokens: usize) -> Result<String, BackendError> {
        if prompt.is_empty() {
            return Err(BackendError::EmptyPrompt);
        }
        self.chat(None, prompt, max_tokens.max(1))
    }

    fn classify_exhaustive(&self, query: &str) -> Result<f64, BackendError> {
        if query.is_empty() {
            return Err(BackendError::EmptyPrompt);
        }
        let reply = self.chat(Some(CLASSIFY_INSTRUCTIONS), query, 8)?;
        parse_probability(&reply)
    }

    fn summarize(&self, query: &str, chunk: &str) -> Result<String, BackendError> {
        if query.is_empty() {
            return Err(BackendError::EmptyPrompt);
        }
        let user = format!("Question: {query}\n\nMemory excerpt:\n{chunk}");
        self.chat(Some(SUMMARIZE_INSTRUCTIONS), &user, 512)
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        if text.trim().is_empty() {
            return Ok(first_basis(self.config.embed_dim));
        }
        let model = self
            .config
            .embedding_model
            .as_deref()
            .unwrap_or(&self.config.model_name);
        let reply = self.post("embeddings", &json!({"model": model, "input": text}))?;
        let raw = reply
            .pointer("/data/0/embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| BackendError::Protocol("missing data[0].embedding".into()))?;
        let vector: Vec<f64> = raw
            .iter()
            .map(|x| x.as_f64().ok_or_else(|| BackendError::Protocol("non-numeric embedding".into())))
            .collect::<Result<_, _>>()?;
        if vector.len() != self.config.embed_dim {
            return Err(BackendError::Protocol(format!(
                "embedding has {} dimensions, configured embed_dim is {}",
                vector.len(),
                self.config.embed_dim
            )));
        }
        Ok(normalize_or_first_basis(vector))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probability_parsing() {
        assert_eq!(parse_probability("0.73").unwrap(), 0.73);
        assert_eq!(parse_probability("p = 0.2.").unwrap(), 0.2);
        assert_eq!(parse_probability("7").unwrap(), 1.0);
        assert!(parse_probability("no idea").is_err());
    }

    #[test]
    fn endpoint_validation() {
        assert!(validate_endpoint("http://localhost:8080/v1").is_ok());
        assert!(validate_endpoint("ftp://host/v1").is_err());
        assert!(validate_endpoint("/relative").is_err());
    }
}
