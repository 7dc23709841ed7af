//! The three engine modes (full injection, RAG, routed hybrid) and the
//! exchange loop that appends every turn to the memory log.

mod context;
mod rlm;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anchors::{AnchorError, AnchorKind, AnchorSet, MemoryEntry, Role};
use crate::backend::{BackendError, LlmBackend};
use crate::index::{IndexError, MemoryIndex, SearchHit, DEFAULT_K};
use crate::router::{QueryRouter, Route, RouteDecision};

pub use context::{assemble_context, AssembledContext, EvidenceItem, DEGRADED_MARKER, IDENTITY_ORDER};
pub use rlm::{
    partition, synthesize, ChunkSummary, SynthesisFailure, SynthesisTrace, DEFAULT_CHUNK_SIZE,
    DEFAULT_FANIN,
};

pub const DEFAULT_CONTEXT_BUDGET: usize = 4096;
pub const DEFAULT_MAX_OUTPUT_TOKENS: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EngineMode {
    Inject,
    Rag,
    Hybrid,
}

impl EngineMode {
    pub const ALL: [EngineMode; 3] = [EngineMode::Inject, EngineMode::Rag, EngineMode::Hybrid];

    pub fn as_str(self) -> &'static str {
        match self {
            EngineMode::Inject => "inject",
            EngineMode::Rag => "rag",
            EngineMode::Hybrid => "hybrid",
        }
    }
}

impl fmt::Display for EngineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EngineMode {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "inject" => Ok(EngineMode::Inject),
            "rag" => Ok(EngineMode::Rag),
            "hybrid" => Ok(EngineMode::Hybrid),
            other => Err(EngineError::InvalidConfig(format!(
                "unknown engine mode {other:?} (expected inject, rag or hybrid)"
            ))),
        }
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("query must not be empty")]
    EmptyQuery,
    #[error("invalid engine configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Storage(#[from] AnchorError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error("synthesis failed after {} completed level(s): {source}", completed.len())]
    PartialSynthesis {
        completed: Vec<Vec<ChunkSummary>>,
        decision: Option<RouteDecision>,
        source: BackendError,
    },
    #[error("generation failed: {source}")]
    Generation {
        source: BackendError,
        decision: Option<RouteDecision>,
        /// The user turn, which is still recorded.
        user_entry: Option<Box<MemoryEntry>>,
    },
}

impl EngineError {
    /// Whether the failure came from the model backend.
    pub fn is_backend(&self) -> bool {
        matches!(
            self,
            EngineError::PartialSynthesis { .. }
                | EngineError::Generation { .. }
                | EngineError::Index(IndexError::Embedding(_))
        )
    }

    pub fn decision(&self) -> Option<&RouteDecision> {
        match self {
            EngineError::PartialSynthesis { decision, .. } | EngineError::Generation { decision, .. } => {
                decision.as_ref()
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineSettings {
    /// Entries retrieved per RAG query.
    pub k: usize,
    /// Entries per RLM leaf chunk.
    pub chunk_size: usize,
    /// Summaries merged per RLM reduce step.
    pub fanin: usize,
    /// Token budget for the assembled context.
    pub context_budget: usize,
    pub max_output_tokens: usize,
}

impl Default for EngineSettings {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            chunk_size: DEFAULT_CHUNK_SIZE,
            fanin: DEFAULT_FANIN,
            context_budget: DEFAULT_CONTEXT_BUDGET,
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
        }
    }
}

impl EngineSettings {
    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: &str| Err(EngineError::InvalidConfig(m.to_string()));
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        if self.chunk_size == 0 {
            return bad("chunk_size must be at least 1");
        }
        if self.fanin < 2 {
            return bad("fanin must be at least 2");
        }
        if self.context_budget == 0 {
            return bad("context_budget must be positive");
        }
        if self.max_output_tokens == 0 {
            return bad("max_output_tokens must be at least 1");
        }
        Ok(())
    }
}

/// Entire memory log as evidence, oldest entries dropped first when over
/// budget.
pub fn retrieve_inject(set: &AnchorSet, budget: usize) -> AssembledContext {
    let evidence: Vec<EvidenceItem> = set.memory_log().iter().map(EvidenceItem::from_entry).collect();
    assemble_context(set, &evidence, budget)
}

/// Top-`k` entries by cosine similarity, presented in chronological order.
pub fn retrieve_rag(
    set: &AnchorSet,
    index: &MemoryIndex,
    backend: &dyn LlmBackend,
    query: &str,
    k: usize,
    budget: usize,
) -> Result<(AssembledContext, Vec<SearchHit>), EngineError> {
    if !set.is_enabled(AnchorKind::Memory) {
        return Ok((assemble_context(set, &[], budget), Vec::new()));
    }
    let hits = index.search_text(backend, query, k)?;
    let log = set.memory_log();
    let mut ids: Vec<u64> = hits.iter().map(|h| h.entry_id).collect();
    ids.sort_unstable();
    let evidence: Vec<EvidenceItem> = ids
        .iter()
        .filter_map(|id| log.binary_search_by_key(id, |e| e.entry_id).ok())
        .map(|pos| EvidenceItem::from_entry(&log[pos]))
        .collect();
    Ok((assemble_context(set, &evidence, budget), hits))
}

/// Recursive summarization of the whole log; the root summary becomes the
/// evidence and its provenance lists every entry.
pub fn rlm_synthesize(
    set: &AnchorSet,
    backend: &dyn LlmBackend,
    query: &str,
    chunk_size: usize,
    fanin: usize,
    budget: usize,
) -> Result<(AssembledContext, SynthesisTrace), SynthesisFailure> {
    if !set.is_enabled(AnchorKind::Memory) {
        return Ok((assemble_context(set, &[], budget), SynthesisTrace::default()));
    }
    let trace = synthesize(backend, query, set.memory_log(), chunk_size, fanin)?;
    let evidence: Vec<EvidenceItem> = trace
        .root()
        .map(|root| EvidenceItem {
            text: root.summary_text.clone(),
            entry_ids: root.covered_entry_ids.clone(),
        })
        .into_iter()
        .collect();
    Ok((assemble_context(set, &evidence, budget), trace))
}

#[derive(Debug, Clone)]
pub struct Retrieval {
    pub context: AssembledContext,
    pub decision: Option<RouteDecision>,
    /// Similarity scores behind a RAG context.
    pub hits: Vec<SearchHit>,
    pub synthesis: Option<SynthesisTrace>,
    pub latency: Duration,
}

#[derive(Debug, Clone)]
pub struct Reply {
    pub response: String,
    pub retrieval: Retrieval,
    pub generation_latency: Duration,
}

#[derive(Debug, Clone)]
pub struct Answer {
    pub response: String,
    pub decision: Option<RouteDecision>,
    pub context: AssembledContext,
    pub hits: Vec<SearchHit>,
    pub user_entry: MemoryEntry,
    pub agent_entry: MemoryEntry,
    pub retrieval_latency: Duration,
    pub generation_latency: Duration,
}

pub struct Engine {
    backend: Arc<dyn LlmBackend>,
    router: QueryRouter,
    settings: EngineSettings,
}

impl fmt::Debug for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Engine")
            .field("backend", &self.backend.name())
            .field("router", &self.router)
            .field("settings", &self.settings)
            .finish()
    }
}

impl Engine {
    pub fn new(
        backend: Arc<dyn LlmBackend>,
        router: QueryRouter,
        settings: EngineSettings,
    ) -> Result<Self, EngineError> {
        settings.validate()?;
        Ok(Self {
            backend,
            router,
            settings,
        })
    }

    pub fn backend(&self) -> &Arc<dyn LlmBackend> {
        &self.backend
    }

    pub fn router(&self) -> &QueryRouter {
        &self.router
    }

    pub fn settings(&self) -> &EngineSettings {
        &self.settings
    }

    /// Index every log entry the index does not know yet.
    pub fn sync_index(&self, set: &AnchorSet, index: &mut MemoryIndex) -> Result<usize, IndexError> {
        let mut added = 0;
        if index.len() >= set.memory_log().len()
            && set.memory_log().iter().all(|e| index.contains(e.entry_id))
        {
            return Ok(0);
        }
        for entry in set.memory_log() {
            if !index.contains(entry.entry_id) {
                index.add(self.backend.as_ref(), entry)?;
                added += 1;
            }
        }
        Ok(added)
    }

    pub fn retrieve(
        &self,
        set: &AnchorSet,
        index: &MemoryIndex,
        query: &str,
        mode: EngineMode,
    ) -> Result<Retrieval, EngineError> {
        if query.trim().is_empty() {
            return Err(EngineError::EmptyQuery);
        }
        let s = &self.settings;
        let backend = self.backend.as_ref();
        let decision = match mode {
            EngineMode::Hybrid => Some(self.router.route(backend, query).map_err(|_| EngineError::EmptyQuery)?),
            _ => None,
        };
        let started = Instant::now();
        let route = match (mode, &decision) {
            (EngineMode::Inject, _) => None,
            (EngineMode::Rag, _) => Some(Route::Rag),
            (EngineMode::Hybrid, d) => d.map(|d| d.route),
        };
        let (context, hits, synthesis) = match route {
            None => (retrieve_inject(set, s.context_budget), Vec::new(), None),
            Some(Route::Rag) => {
                let (ctx, hits) = retrieve_rag(set, index, backend, query, s.k, s.context_budget)?;
                (ctx, hits, None)
            }
            Some(Route::Rlm) => {
                let (ctx, trace) =
                    rlm_synthesize(set, backend, query, s.chunk_size, s.fanin, s.context_budget).map_err(
                        |f| EngineError::PartialSynthesis {
                            completed: f.completed,
                            decision,
                            source: f.source,
                        },
                    )?;
                (ctx, Vec::new(), Some(trace))
            }
        };
        Ok(Retrieval {
            context,
            decision,
            hits,
            synthesis,
            latency: started.elapsed(),
        })
    }

    /// Retrieve and generate without touching the log.
    pub fn respond(
        &self,
        set: &AnchorSet,
        index: &MemoryIndex,
        query: &str,
        mode: EngineMode,
    ) -> Result<Reply, EngineError> {
        let retrieval = self.retrieve(set, index, query, mode)?;
        let prompt = retrieval.context.render_prompt(query);
        let started = Instant::now();
        match self.backend.generate(&prompt, self.settings.max_output_tokens) {
            Ok(response) => Ok(Reply {
                response,
                generation_latency: started.elapsed(),
                retrieval,
            }),
            Err(source) => Err(EngineError::Generation {
                source,
                decision: retrieval.decision,
                user_entry: None,
            }),
        }
    }

    /// One full exchange: retrieve, generate, then append and index the user
    /// and agent turns. If generation fails only the user turn is recorded.
    pub fn answer(
        &self,
        set: &mut AnchorSet,
        index: &mut MemoryIndex,
        query: &str,
        session_id: &str,
        mode: EngineMode,
    ) -> Result<Answer, EngineError> {
        if query.trim().is_empty() {
            return Err(EngineError::EmptyQuery);
        }
        if mode != EngineMode::Inject {
            self.sync_index(set, index)?;
        }
        let reply = match self.respond(set, index, query, mode) {
            Ok(r) => r,
            Err(EngineError::Generation { source, decision, .. }) => {
                let user_entry = set.append_memory(Role::User, query, session_id)?;
                self.index_quietly(index, &user_entry);
                return Err(EngineError::Generation {
                    source,
                    decision,
                    user_entry: Some(Box::new(user_entry)),
                });
            }
            Err(e) => return Err(e),
        };
        let user_entry = set.append_memory(Role::User, query, session_id)?;
        let agent_entry = set.append_memory(Role::Agent, &reply.response, session_id)?;
        self.index_quietly(index, &user_entry);
        self.index_quietly(index, &agent_entry);
        Ok(Answer {
            response: reply.response,
            decision: reply.retrieval.decision,
            context: reply.retrieval.context,
            hits: reply.retrieval.hits,
            user_entry,
            agent_entry,
            retrieval_latency: reply.retrieval.latency,
            generation_latency: reply.generation_latency,
        })
    }

    // Entries that fail to embed here are picked up by the next sync_index.
    fn index_quietly(&self, index: &mut MemoryIndex, entry: &MemoryEntry) {
        if let Err(e) = index.add(self.backend.as_ref(), entry) {
            tracing::warn!(entry_id = entry.entry_id, error = %e, "indexing deferred");
        }
    }
}
