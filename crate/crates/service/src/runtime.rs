//! Agent registry and the operations shared by the HTTP API and the CLI.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use anchorage_core::anchors::{AnchorError, AnchorKind, AnchorSet, AnchorSummary, AnchorItem, MemoryEntry, Role};
use anchorage_core::backend::{build_backend, LlmBackend};
use anchorage_core::drift::{self, Baseline, DriftError, DriftReport, IdentityHash, ProbeSet};
use anchorage_core::engine::{Engine, EngineError, EngineMode};
use anchorage_core::index::{IndexError, MemoryIndex};
use anchorage_core::router::{query_hash, QueryRouter, Route, RouteHistory, RouteRecord, ROUTE_HISTORY_FILE};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::{Mutex, OwnedMutexGuard};

use crate::config::{ConfigError, EngineConfig};

const INDEX_SNAPSHOT_FILE: &str = "index.aidx";
pub const DEFAULT_SESSION: &str = "default";

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("unknown agent {0:?}")]
    UnknownAgent(String),
    #[error("agent {0:?} already exists")]
    AgentExists(String),
    #[error("agent {0:?} is busy with another turn")]
    Busy(String),
    #[error("no baseline recorded for agent {0:?}")]
    NoBaseline(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Forbidden(String),
    #[error("{0}")]
    Unprocessable(String),
    #[error("{0}")]
    BadRequest(String),
    #[error("backend failure: {message}")]
    Backend { message: String, fallback: bool },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Internal(String),
}

impl ServiceError {
    pub fn status(&self) -> u16 {
        match self {
            ServiceError::UnknownAgent(_) => 404,
            ServiceError::AgentExists(_)
            | ServiceError::Busy(_)
            | ServiceError::NoBaseline(_)
            | ServiceError::Conflict(_) => 409,
            ServiceError::Forbidden(_) => 403,
            ServiceError::Unprocessable(_) => 422,
            ServiceError::BadRequest(_) => 400,
            ServiceError::Backend { .. } => 502,
            ServiceError::Config(_) | ServiceError::Internal(_) => 500,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::UnknownAgent(_) => "unknown_agent",
            ServiceError::AgentExists(_) => "agent_exists",
            ServiceError::Busy(_) => "turn_in_flight",
            ServiceError::NoBaseline(_) => "no_baseline",
            ServiceError::Conflict(_) => "conflict",
            ServiceError::Forbidden(_) => "forbidden",
            ServiceError::Unprocessable(_) => "unprocessable",
            ServiceError::BadRequest(_) => "bad_request",
            ServiceError::Backend { .. } => "backend_failure",
            ServiceError::Config(_) => "config",
            ServiceError::Internal(_) => "internal",
        }
    }

    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            ServiceError::Config(_) => 2,
            ServiceError::Backend { .. } => 3,
            _ => 1,
        }
    }
}

impl From<AnchorError> for ServiceError {
    fn from(e: AnchorError) -> Self {
        match e {
            AnchorError::Parse { .. } => ServiceError::Unprocessable(e.to_string()),
            AnchorError::AppendOnly => {
                ServiceError::Forbidden("MEMORY.md is append-only; add entries through chat".into())
            }
            AnchorError::IdCollision(id) => ServiceError::AgentExists(id),
            AnchorError::EmptyContent
            | AnchorError::InvalidSessionId(_)
            | AnchorError::InvalidAgentId(_)
            | AnchorError::InvalidRole(_)
            | AnchorError::UnknownKind(_)
            | AnchorError::InvalidWeight(_) => ServiceError::BadRequest(e.to_string()),
            AnchorError::MalformedEntry { .. } | AnchorError::Unreadable { .. } | AnchorError::StorageWrite { .. } => {
                ServiceError::Internal(e.to_string())
            }
        }
    }
}

impl From<EngineError> for ServiceError {
    fn from(e: EngineError) -> Self {
        let fallback = e.decision().is_some_and(|d| d.fallback);
        match e {
            EngineError::EmptyQuery => ServiceError::BadRequest(e.to_string()),
            EngineError::InvalidConfig(m) => ServiceError::BadRequest(m),
            EngineError::Storage(a) => a.into(),
            EngineError::Index(IndexError::Embedding(b)) => ServiceError::Backend {
                message: format!("embedding failed: {b}"),
                fallback,
            },
            EngineError::Index(i) => ServiceError::Internal(i.to_string()),
            EngineError::PartialSynthesis { .. } | EngineError::Generation { .. } => ServiceError::Backend {
                message: e.to_string(),
                fallback,
            },
        }
    }
}

impl From<DriftError> for ServiceError {
    fn from(e: DriftError) -> Self {
        match e {
            DriftError::Probe { source, .. } => source.into(),
            DriftError::Embedding(b) => ServiceError::Backend {
                message: b.to_string(),
                fallback: false,
            },
            DriftError::VersionMismatch { .. } => ServiceError::Conflict(e.to_string()),
            DriftError::NoBaseline => ServiceError::Conflict(e.to_string()),
            DriftError::InvalidProbeSet(_) | DriftError::LengthMismatch { .. } => {
                ServiceError::BadRequest(e.to_string())
            }
            DriftError::Baseline { .. } => ServiceError::Internal(e.to_string()),
        }
    }
}

/// Everything the service keeps for one agent.
#[derive(Debug)]
pub struct AgentState {
    pub set: AnchorSet,
    pub index: MemoryIndex,
    pub routes: RouteHistory,
    pub baseline: Option<Baseline>,
}

impl AgentState {
    fn dir(&self) -> &Path {
        self.set.dir().expect("service agents live on disk")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentInfo {
    pub agent_id: String,
    pub memory_entries: usize,
    pub has_baseline: bool,
    pub anchors: Vec<AnchorSummary>,
    pub normalized_weights: BTreeMap<AnchorKind, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub session_id: String,
    pub agent_id: String,
    pub mode: EngineMode,
    pub created_at: DateTime<Utc>,
    /// Completed exchanges (agent turns) in this session.
    pub turn_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatReply {
    pub agent_id: String,
    pub session_id: String,
    pub mode: EngineMode,
    pub response: String,
    /// `None` in inject mode, which performs no retrieval.
    pub route: Option<Route>,
    pub p_exhaustive: Option<f64>,
    pub threshold: Option<f64>,
    pub fallback: bool,
    pub router_latency_ms: Option<f64>,
    pub retrieval_latency_ms: f64,
    pub generation_latency_ms: f64,
    pub provenance: Vec<u64>,
    pub truncated: bool,
    pub degraded: bool,
    pub token_estimate: usize,
    pub user_entry_id: u64,
    pub agent_entry_id: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorDetail {
    #[serde(flatten)]
    pub summary: AnchorSummary,
    pub parsed_items: Vec<AnchorItem>,
}

fn ms(d: std::time::Duration) -> f64 {
    d.as_secs_f64() * 1000.0
}

pub struct Runtime {
    config: EngineConfig,
    engine: Engine,
    probes: ProbeSet,
    agents: RwLock<BTreeMap<String, Arc<Mutex<AgentState>>>>,
}

impl std::fmt::Debug for Runtime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Runtime")
            .field("root", &self.config.root_directory)
            .field("engine", &self.engine)
            .finish_non_exhaustive()
    }
}

impl Runtime {
    /// Build the configured backend and open every agent under the root.
    pub fn open(config: EngineConfig) -> Result<Self, ServiceError> {
        config.validate()?;
        let backend = build_backend(&config.backend).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Self::with_backend(config, backend)
    }

    pub fn with_backend(config: EngineConfig, backend: Arc<dyn LlmBackend>) -> Result<Self, ServiceError> {
        config.validate()?;
        let router = QueryRouter::new(config.cost_params, config.threshold_source)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let engine =
            Engine::new(backend, router, config.settings()).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        std::fs::create_dir_all(&config.root_directory).map_err(|e| {
            ServiceError::Internal(format!("cannot create {}: {e}", config.root_directory.display()))
        })?;
        let runtime = Self {
            config,
            engine,
            probes: ProbeSet::default(),
            agents: RwLock::new(BTreeMap::new()),
        };
        runtime.scan()?;
        Ok(runtime)
    }

    fn scan(&self) -> Result<(), ServiceError> {
        let root = &self.config.root_directory;
        let entries = std::fs::read_dir(root)
            .map_err(|e| ServiceError::Internal(format!("cannot list {}: {e}", root.display())))?;
        let mut agents = self.agents.write().expect("registry lock");
        for entry in entries.flatten() {
            let path = entry.path();
            let is_agent = path.is_dir()
                && AnchorKind::ALL.iter().any(|k| path.join(k.filename()).is_file());
            if !is_agent {
                continue;
            }
            match self.load_agent(&path) {
                Ok(state) => {
                    agents.insert(state.set.agent_id().to_string(), Arc::new(Mutex::new(state)));
                }
                Err(e) => tracing::warn!(path = %path.display(), error = %e, "skipping unreadable agent"),
            }
        }
        Ok(())
    }

    fn load_agent(&self, dir: &Path) -> Result<AgentState, ServiceError> {
        let mut set = AnchorSet::load(dir)?;
        self.apply_weights(&mut set)?;
        let routes = RouteHistory::open(&dir.join(ROUTE_HISTORY_FILE))
            .map_err(|e| ServiceError::Internal(format!("route history: {e}")))?;
        let baseline = Baseline::load(dir)?;
        let dim = self.engine.backend().embed_dim();
        let index = if self.config.index_snapshot {
            match MemoryIndex::load_snapshot(&dir.join(INDEX_SNAPSHOT_FILE)) {
                Ok(idx) if idx.dim() == dim => idx,
                _ => MemoryIndex::new(dim),
            }
        } else {
            MemoryIndex::new(dim)
        };
        Ok(AgentState {
            set,
            index,
            routes,
            baseline,
        })
    }

    fn apply_weights(&self, set: &mut AnchorSet) -> Result<(), ServiceError> {
        for (kind, w) in self.config.weights()? {
            set.set_weight(kind, w)?;
        }
        Ok(())
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub fn probes(&self) -> &ProbeSet {
        &self.probes
    }

    pub fn agent_ids(&self) -> Vec<String> {
        self.agents.read().expect("registry lock").keys().cloned().collect()
    }

    pub fn agent(&self, id: &str) -> Result<Arc<Mutex<AgentState>>, ServiceError> {
        self.agents
            .read()
            .expect("registry lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::UnknownAgent(id.to_string()))
    }

    /// Wait at most the configured turn wait for the agent's lock.
    pub async fn lock(&self, id: &str) -> Result<OwnedMutexGuard<AgentState>, ServiceError> {
        let slot = self.agent(id)?;
        tokio::time::timeout(self.config.turn_wait(), slot.lock_owned())
            .await
            .map_err(|_| ServiceError::Busy(id.to_string()))
    }

    /// Blocking variant for synchronous callers (the CLI). Must not be
    /// called from inside an async task.
    pub fn lock_blocking(&self, id: &str) -> Result<OwnedMutexGuard<AgentState>, ServiceError> {
        Ok(self.agent(id)?.blocking_lock_owned())
    }

    fn register(&self, state: AgentState) -> Result<(), ServiceError> {
        let id = state.set.agent_id().to_string();
        let mut agents = self.agents.write().expect("registry lock");
        if agents.contains_key(&id) {
            return Err(ServiceError::AgentExists(id));
        }
        agents.insert(id, Arc::new(Mutex::new(state)));
        Ok(())
    }

    pub fn create_agent(
        &self,
        agent_id: &str,
        texts: &BTreeMap<AnchorKind, String>,
    ) -> Result<AgentInfo, ServiceError> {
        if self.agents.read().expect("registry lock").contains_key(agent_id) {
            return Err(ServiceError::AgentExists(agent_id.to_string()));
        }
        if texts.contains_key(&AnchorKind::Memory) {
            return Err(ServiceError::Forbidden("MEMORY.md cannot be supplied at creation".into()));
        }
        let mut set = AnchorSet::create(&self.config.root_directory, agent_id, texts)?;
        self.apply_weights(&mut set)?;
        let state = AgentState {
            index: MemoryIndex::new(self.engine.backend().embed_dim()),
            routes: RouteHistory::open(&set.dir().expect("on disk").join(ROUTE_HISTORY_FILE))
                .map_err(|e| ServiceError::Internal(e.to_string()))?,
            baseline: None,
            set,
        };
        let info = self.info(&state);
        self.register(state)?;
        Ok(info)
    }

    /// Copy `source`'s anchors and memory to a new agent.
    pub fn fork_agent(&self, source: &AgentState, new_agent_id: &str) -> Result<AgentInfo, ServiceError> {
        if self.agents.read().expect("registry lock").contains_key(new_agent_id) {
            return Err(ServiceError::AgentExists(new_agent_id.to_string()));
        }
        let set = source.set.fork(new_agent_id)?;
        let state = self.load_agent(set.dir().expect("on disk"))?;
        let info = self.info(&state);
        self.register(state)?;
        Ok(info)
    }

    pub fn info(&self, state: &AgentState) -> AgentInfo {
        AgentInfo {
            agent_id: state.set.agent_id().to_string(),
            memory_entries: state.set.memory_log().len(),
            has_baseline: state.baseline.is_some(),
            anchors: state.set.summaries(),
            normalized_weights: state.set.normalized_weights(),
        }
    }

    pub fn chat(
        &self,
        state: &mut AgentState,
        session_id: &str,
        message: &str,
        mode: Option<EngineMode>,
    ) -> Result<ChatReply, ServiceError> {
        let mode = mode.unwrap_or(self.config.mode);
        let AgentState { set, index, routes, .. } = state;
        let answer = self.engine.answer(set, index, message, session_id, mode)?;
        if let Some(d) = &answer.decision {
            let record = RouteRecord {
                timestamp: answer.user_entry.timestamp,
                session_id: session_id.to_string(),
                query_hash: query_hash(message),
                query_text: self.config.store_query_text.then(|| message.to_string()),
                route: d.route,
                p_exhaustive: d.p_exhaustive,
                threshold_used: d.threshold_used,
                fallback: d.fallback,
                router_latency_ms: ms(d.router_latency),
                retrieval_latency_ms: ms(answer.retrieval_latency),
                generation_latency_ms: ms(answer.generation_latency),
            };
            routes
                .append(record)
                .map_err(|e| ServiceError::Internal(format!("route history: {e}")))?;
        }
        if self.config.index_snapshot {
            let path = state.dir().join(INDEX_SNAPSHOT_FILE);
            if let Err(e) = state.index.save_snapshot(&path) {
                tracing::warn!(error = %e, "index snapshot not written");
            }
        }
        let route = match mode {
            EngineMode::Inject => None,
            EngineMode::Rag => Some(Route::Rag),
            EngineMode::Hybrid => answer.decision.map(|d| d.route),
        };
        Ok(ChatReply {
            agent_id: state.set.agent_id().to_string(),
            session_id: session_id.to_string(),
            mode,
            route,
            p_exhaustive: answer.decision.map(|d| d.p_exhaustive),
            threshold: answer.decision.map(|d| d.threshold_used),
            fallback: answer.decision.is_some_and(|d| d.fallback),
            router_latency_ms: answer.decision.map(|d| ms(d.router_latency)),
            retrieval_latency_ms: ms(answer.retrieval_latency),
            generation_latency_ms: ms(answer.generation_latency),
            provenance: answer.context.provenance,
            truncated: answer.context.truncated,
            degraded: answer.context.degraded,
            token_estimate: answer.context.token_estimate,
            user_entry_id: answer.user_entry.entry_id,
            agent_entry_id: answer.agent_entry.entry_id,
            response: answer.response,
        })
    }

    pub fn anchor_text(&self, state: &AgentState, kind: AnchorKind) -> String {
        state.set.anchor_text(kind)
    }

    pub fn put_anchor(&self, state: &mut AgentState, kind: AnchorKind, text: &str) -> Result<AnchorDetail, ServiceError> {
        state.set.replace_anchor(kind, text)?;
        Ok(self.anchor_detail(state, kind))
    }

    pub fn anchor_detail(&self, state: &AgentState, kind: AnchorKind) -> AnchorDetail {
        let summary = state
            .set
            .summaries()
            .into_iter()
            .find(|s| s.kind == kind)
            .expect("every kind is summarized");
        AnchorDetail {
            summary,
            parsed_items: state.set.anchor(kind).items.clone(),
        }
    }

    pub fn set_failure(&self, state: &mut AgentState, kind: AnchorKind, enabled: bool) -> Result<AgentInfo, ServiceError> {
        state.set.set_enabled(kind, enabled)?;
        Ok(self.info(state))
    }

    /// Probes retrieve like chat turns do, so the index must cover the whole
    /// log first. Indexes are rebuilt lazily after a restart.
    fn sync_index(&self, state: &mut AgentState) -> Result<(), ServiceError> {
        self.engine
            .sync_index(&state.set, &mut state.index)
            .map_err(|e| ServiceError::from(EngineError::Index(e)))
            .map(|_| ())
    }

    pub fn take_baseline(&self, state: &mut AgentState) -> Result<IdentityHash, ServiceError> {
        self.sync_index(state)?;
        let baseline = drift::take_baseline(
            &self.engine,
            &state.set,
            &state.index,
            &self.probes,
            self.config.probe_mode,
            self.config.projection_seed,
        )?;
        baseline.save(state.dir())?;
        let hash = baseline.hash.clone();
        state.baseline = Some(baseline);
        Ok(hash)
    }

    pub fn drift(&self, state: &mut AgentState) -> Result<DriftReport, ServiceError> {
        if state.baseline.is_none() {
            return Err(ServiceError::NoBaseline(state.set.agent_id().to_string()));
        }
        self.sync_index(state)?;
        let baseline = state
            .baseline
            .as_ref()
            .ok_or_else(|| ServiceError::NoBaseline(state.set.agent_id().to_string()))?;
        Ok(drift::detect_drift(
            &self.engine,
            &state.set,
            &state.index,
            baseline,
            self.config.drift_threshold,
            &self.probes,
            self.config.probe_mode,
        )?)
    }

    pub fn routes(&self, state: &AgentState, limit: usize) -> Vec<RouteRecord> {
        state.routes.recent(limit)
    }

    pub fn memory(&self, state: &AgentState, offset: usize, limit: usize) -> Vec<MemoryEntry> {
        state.set.memory_log().iter().skip(offset).take(limit).cloned().collect()
    }

    pub fn sessions(&self, state: &AgentState) -> Vec<SessionState> {
        let mut sessions: HashMap<&str, SessionState> = HashMap::new();
        let mut order = Vec::new();
        for e in state.set.memory_log() {
            let s = sessions.entry(e.session_id.as_str()).or_insert_with(|| {
                order.push(e.session_id.clone());
                SessionState {
                    session_id: e.session_id.clone(),
                    agent_id: state.set.agent_id().to_string(),
                    mode: self.config.mode,
                    created_at: e.timestamp,
                    turn_count: 0,
                }
            });
            if e.role == Role::Agent {
                s.turn_count += 1;
            }
        }
        order.iter().map(|id| sessions[id.as_str()].clone()).collect()
    }

    pub fn root(&self) -> &PathBuf {
        &self.config.root_directory
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn runtime(dir: &Path) -> Runtime {
        let config = EngineConfig {
            root_directory: dir.to_path_buf(),
            ..Default::default()
        };
        Runtime::open(config).unwrap()
    }

    #[test]
    fn create_chat_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let rt = runtime(dir.path());
        let mut texts = BTreeMap::new();
        texts.insert(AnchorKind::Soul, "I am Ada.".to_string());
        rt.create_agent("ada", &texts).unwrap();
        assert!(matches!(rt.create_agent("ada", &texts), Err(ServiceError::AgentExists(_))));
        {
            let mut guard = rt.lock_blocking("ada").unwrap();
            let reply = rt.chat(&mut guard, "s1", "what is my name?", None).unwrap();
            assert_eq!(reply.route, Some(Route::Rag));
            assert_eq!((reply.user_entry_id, reply.agent_entry_id), (1, 2));
            rt.chat(&mut guard, "s1", "summarize everything", None).unwrap();
            let sessions = rt.sessions(&guard);
            assert_eq!(sessions.len(), 1);
            assert_eq!(sessions[0].turn_count, 2);
        }
        drop(rt);
        let rt = runtime(dir.path());
        let guard = rt.lock_blocking("ada").unwrap();
        assert_eq!(guard.set.memory_log().len(), 4);
        let routes = rt.routes(&guard, 10);
        assert_eq!(routes.len(), 2);
        assert_eq!(routes[0].route, Route::Rlm);
        assert!(routes[0].query_text.is_none());
    }

    #[test]
    fn baseline_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let rt = runtime(dir.path());
        let mut texts = BTreeMap::new();
        texts.insert(AnchorKind::Soul, "- I am Ada.".to_string());
        rt.create_agent("ada", &texts).unwrap();
        {
            let mut guard = rt.lock_blocking("ada").unwrap();
            rt.chat(&mut guard, "s1", "my sister lives in Lisbon", None).unwrap();
            rt.chat(&mut guard, "s1", "summarize everything", None).unwrap();
            rt.take_baseline(&mut guard).unwrap();
            assert_eq!(rt.drift(&mut guard).unwrap().hamming_distance, 0);
        }
        drop(rt);
        let rt = runtime(dir.path());
        let mut guard = rt.lock_blocking("ada").unwrap();
        assert!(guard.index.is_empty());
        let report = rt.drift(&mut guard).unwrap();
        assert_eq!(report.hamming_distance, 0);
        assert!(report.per_probe_divergence.iter().all(|d| *d == 0.0));
    }

    #[test]
    fn error_statuses() {
        assert_eq!(ServiceError::from(AnchorError::AppendOnly).status(), 403);
        assert_eq!(ServiceError::UnknownAgent("x".into()).status(), 404);
        assert_eq!(ServiceError::Config(ConfigError::Invalid("x".into())).exit_code(), 2);
        assert_eq!(
            ServiceError::Backend {
                message: String::new(),
                fallback: false
            }
            .exit_code(),
            3
        );
    }
}
