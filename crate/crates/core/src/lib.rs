//! Anchor-file memory engine for long-lived conversational agents.
//!
//! Identity lives in a handful of markdown anchor files; conversation
//! history lives in an append-only `MEMORY.md`. Queries are answered by
//! injecting the whole log, by cosine retrieval over it, or by routing each
//! query between retrieval and recursive summarization.

pub mod anchors;
pub mod backend;
pub mod drift;
pub mod engine;
pub mod index;
pub mod lab;
pub mod router;
pub mod text;

pub use anchors::{AnchorError, AnchorKind, AnchorSet, MemoryEntry, Role};
pub use backend::{build_backend, BackendConfig, BackendError, LlmBackend, MockBackend};
pub use engine::{AssembledContext, Engine, EngineError, EngineMode, EngineSettings};
pub use index::MemoryIndex;
pub use router::{CostParams, QueryRouter, Route, RouteDecision};
