use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{BackendError, LlmBackend};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Operation {
    Generate,
    Classify,
    Summarize,
    Embed,
}

impl Operation {
    const ALL: [Operation; 4] = [
        Operation::Generate,
        Operation::Classify,
        Operation::Summarize,
        Operation::Embed,
    ];

    fn slot(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CallCounts {
    pub generate: usize,
    pub classify: usize,
    pub summarize: usize,
    pub embed: usize,
}

const NEVER: usize = usize::MAX;

/// Wraps a backend with per-operation call counters, failure injection and
/// synthetic latency. All knobs can be changed at runtime through `&self`.
#[derive(Debug)]
pub struct InstrumentedBackend<B> {
    inner: B,
    calls: [AtomicUsize; 4],
    fail_after: [AtomicUsize; 4],
    latency_micros: [AtomicU64; 4],
}

impl<B: LlmBackend> InstrumentedBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            calls: Default::default(),
            fail_after: std::array::from_fn(|_| AtomicUsize::new(NEVER)),
            latency_micros: Default::default(),
        }
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    /// Let the next `successes` calls of `op` through, then fail every call.
    pub fn fail_after(&self, op: Operation, successes: usize) -> &Self {
        let already = self.calls[op.slot()].load(Ordering::SeqCst);
        self.fail_after[op.slot()].store(already.saturating_add(successes), Ordering::SeqCst);
        self
    }

    pub fn heal(&self, op: Operation) -> &Self {
        self.fail_after[op.slot()].store(NEVER, Ordering::SeqCst);
        self
    }

    pub fn heal_all(&self) -> &Self {
        for op in Operation::ALL {
            self.heal(op);
        }
        self
    }

    /// Sleep for `latency` before every call of `op`.
    pub fn with_latency(&self, op: Operation, latency: Duration) -> &Self {
        self.latency_micros[op.slot()].store(latency.as_micros() as u64, Ordering::SeqCst);
        self
    }

    pub fn counts(&self) -> CallCounts {
        let get = |op: Operation| self.calls[op.slot()].load(Ordering::SeqCst);
        CallCounts {
            generate: get(Operation::Generate),
            classify: get(Operation::Classify),
            summarize: get(Operation::Summarize),
            embed: get(Operation::Embed),
        }
    }

    pub fn reset_counts(&self) {
        for op in Operation::ALL {
            self.calls[op.slot()].store(0, Ordering::SeqCst);
            self.heal(op);
        }
    }

    fn enter(&self, op: Operation) -> Result<(), BackendError> {
        let micros = self.latency_micros[op.slot()].load(Ordering::SeqCst);
        if micros > 0 {
            std::thread::sleep(Duration::from_micros(micros));
        }
        let n = self.calls[op.slot()].fetch_add(1, Ordering::SeqCst);
        if n >= self.fail_after[op.slot()].load(Ordering::SeqCst) {
            return Err(BackendError::Injected(op));
        }
        Ok(())
    }
}

impl<B: LlmBackend> LlmBackend for InstrumentedBackend<B> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn embed_dim(&self) -> usize {
        self.inner.embed_dim()
    }

    fn generate(&self, prompt: &str, max_tokens: usize) -> Result<String, BackendError> {
        self.enter(Operation::Generate)?;
        self.inner.generate(prompt, max_tokens)
    }

    fn classify_exhaustive(&self, query: &str) -> Result<f64, BackendError> {
        self.enter(Operation::Classify)?;
        self.inner.classify_exhaustive(query)
    }

    fn summarize(&self, query: &str, chunk: &str) -> Result<String, BackendError> {
        self.enter(Operation::Summarize)?;
        self.inner.summarize(query, chunk)
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        self.enter(Operation::Embed)?;
        self.inner.embed(text)
    }
}
