//! RAG-vs-RLM routing.
//!
//! The router asks the backend classifier for `p_exhaustive` and sends the
//! query down the recursive-synthesis path when `p_exhaustive >= threshold`.
//! The threshold is either the fixed 0.5 or the cost-derived boundary
//! `clamp(lambda1 * (t_rlm - t_rag) / lambda2, 0, 1)`.

use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::LlmBackend;

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const ROUTE_HISTORY_FILE: &str = "routes.jsonl";

#[derive(Debug, Error, PartialEq)]
pub enum RouterError {
    #[error("invalid cost parameters: {0}")]
    InvalidParams(String),
    #[error("query must not be empty")]
    EmptyQuery,
    #[error("accuracy {0} outside [0, 1]")]
    InvalidAccuracy(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Route {
    #[serde(rename = "RAG")]
    Rag,
    #[serde(rename = "RLM")]
    Rlm,
}

impl fmt::Display for Route {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Route::Rag => "RAG",
            Route::Rlm => "RLM",
        })
    }
}

/// Weights and latencies of the retrieval cost
/// `C(s) = lambda1 * T(s) + lambda2 * (1 - accuracy)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Seconds.
    pub t_rag: f64,
    /// Seconds.
    pub t_rlm: f64,
}

impl Default for CostParams {
    fn default() -> Self {
        Self {
            lambda1: 0.05,
            lambda2: 1.0,
            t_rag: 0.4,
            t_rlm: 8.0,
        }
    }
}

impl CostParams {
    pub fn validate(&self) -> Result<(), RouterError> {
        let all_finite = [self.lambda1, self.lambda2, self.t_rag, self.t_rlm]
            .iter()
            .all(|x| x.is_finite());
        if !all_finite {
            return Err(RouterError::InvalidParams("non-finite value".into()));
        }
        if self.lambda1 < 0.0 {
            return Err(RouterError::InvalidParams("lambda1 must be >= 0".into()));
        }
        if self.lambda2 <= 0.0 {
            return Err(RouterError::InvalidParams("lambda2 must be > 0".into()));
        }
        if self.t_rag < 0.0 || self.t_rlm < self.t_rag {
            return Err(RouterError::InvalidParams(
                "latencies must satisfy t_rlm >= t_rag >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn latency(&self, route: Route) -> f64 {
        match route {
            Route::Rag => self.t_rag,
            Route::Rlm => self.t_rlm,
        }
    }
}

/// Scope threshold above which the recursive path is cheaper in expectation,
/// clamped to `[0, 1]`. A boundary of 1.0 means "always RAG" for any
/// classifier output below 1.
pub fn decision_boundary(params: &CostParams) -> Result<f64, RouterError> {
    params.validate()?;
    let raw = params.lambda1 * (params.t_rlm - params.t_rag) / params.lambda2;
    Ok(raw.clamp(0.0, 1.0))
}

/// `lambda1 * T(route) + lambda2 * (1 - accuracy)`.
pub fn expected_cost(route: Route, accuracy: f64, params: &CostParams) -> Result<f64, RouterError> {
    if !(0.0..=1.0).contains(&accuracy) {
        return Err(RouterError::InvalidAccuracy(accuracy));
    }
    Ok(params.lambda1 * params.latency(route) + params.lambda2 * (1.0 - accuracy))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdSource {
    #[default]
    FixedHalf,
    DerivedBoundary,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RouteDecision {
    pub route: Route,
    pub p_exhaustive: f64,
    #[serde(with = "duration_secs")]
    pub router_latency: Duration,
    pub threshold_used: f64,
    /// The classifier failed and the router defaulted to RAG.
    pub fallback: bool,
}

/// Pure threshold rule: RLM iff `p >= threshold`.
pub fn route_for(p_exhaustive: f64, threshold: f64) -> Route {
    if p_exhaustive < threshold {
        Route::Rag
    } else {
        Route::Rlm
    }
}

#[derive(Debug, Clone)]
pub struct QueryRouter {
    pub params: CostParams,
    pub threshold_source: ThresholdSource,
    latency_override: Option<Duration>,
}

impl QueryRouter {
    pub fn new(params: CostParams, threshold_source: ThresholdSource) -> Result<Self, RouterError> {
        params.validate()?;
        Ok(Self {
            params,
            threshold_source,
            latency_override: None,
        })
    }

    /// Report `latency` as the router latency instead of the wall clock.
    pub fn with_synthetic_latency(mut self, latency: Duration) -> Self {
        self.latency_override = Some(latency);
        self
    }

    pub fn threshold(&self) -> f64 {
        match self.threshold_source {
            ThresholdSource::FixedHalf => DEFAULT_THRESHOLD,
            ThresholdSource::DerivedBoundary => {
                decision_boundary(&self.params).expect("validated at construction")
            }
        }
    }

    /// Classify and route. Classifier failures fall back to RAG with
    /// `p_exhaustive = 0` and `fallback = true`.
    pub fn route(&self, backend: &dyn LlmBackend, query: &str) -> Result<RouteDecision, RouterError> {
        if query.trim().is_empty() {
            return Err(RouterError::EmptyQuery);
        }
        let threshold = self.threshold();
        let started = Instant::now();
        let classified = backend.classify_exhaustive(query);
        let measured = started.elapsed();
        let router_latency = self.latency_override.unwrap_or(measured);
        Ok(match classified {
            Ok(p) => {
                let p = if p.is_finite() { p.clamp(0.0, 1.0) } else { 0.0 };
                RouteDecision {
                    route: route_for(p, threshold),
                    p_exhaustive: p,
                    router_latency,
                    threshold_used: threshold,
                    fallback: false,
                }
            }
            Err(e) => {
                tracing::warn!(error = %e, "router classifier failed, falling back to RAG");
                RouteDecision {
                    route: Route::Rag,
                    p_exhaustive: 0.0,
                    router_latency,
                    threshold_used: threshold,
                    fallback: true,
                }
            }
        })
    }
}

/// One line of `routes.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteRecord {
    pub timestamp: DateTime<Utc>,
    pub session_id: String,
    /// Hex SHA-256 of the query text.
    pub query_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_text: Option<String>,
    pub route: Route,
    pub p_exhaustive: f64,
    pub threshold_used: f64,
    pub fallback: bool,
    pub router_latency_ms: f64,
    pub retrieval_latency_ms: f64,
    pub generation_latency_ms: f64,
}

pub fn query_hash(query: &str) -> String {
    hex::encode(Sha256::digest(query.as_bytes()))
}

/// Append-only per-agent route history, optionally persisted as JSON lines.
#[derive(Debug, Clone, Default)]
pub struct RouteHistory {
    path: Option<PathBuf>,
    records: Vec<RouteRecord>,
}

impl RouteHistory {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Open (or start) the history at `path`. Unparseable lines are skipped
    /// with a warning; a torn final line from a crash is expected.
    pub fn open(path: &Path) -> std::io::Result<Self> {
        let mut records = Vec::new();
        match fs::read_to_string(path) {
            Ok(text) => {
                for (i, line) in text.lines().enumerate() {
                    if line.trim().is_empty() {
                        continue;
                    }
                    match serde_json::from_str(line) {
                        Ok(r) => records.push(r),
                        Err(e) => tracing::warn!(line = i + 1, error = %e, "skipping route record"),
                    }
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(e),
        }
        Ok(Self {
            path: Some(path.to_path_buf()),
            records,
        })
    }

    pub fn append(&mut self, record: RouteRecord) -> std::io::Result<()> {
        if let Some(path) = &self.path {
            let mut line = serde_json::to_string(&record).map_err(std::io::Error::other)?;
            line.push('\n');
            let mut f = OpenOptions::new().create(true).append(true).open(path)?;
            f.write_all(line.as_bytes())?;
            f.sync_data()?;
        }
        self.records.push(record);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Up to `limit` records, newest first.
    pub fn recent(&self, limit: usize) -> Vec<RouteRecord> {
        self.records.iter().rev().take(limit).cloned().collect()
    }
}

mod duration_secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        Duration::try_from_secs_f64(secs).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{InstrumentedBackend, MockBackend, Operation};
    use proptest::prelude::*;

    fn params(l1: f64, l2: f64, rag: f64, rlm: f64) -> CostParams {
        CostParams {
            lambda1: l1,
            lambda2: l2,
            t_rag: rag,
            t_rlm: rlm,
        }
    }

    #[test]
    fn boundary_examples() {
        assert_eq!(decision_boundary(&params(0.0, 1.0, 0.2, 30.0)).unwrap(), 0.0);
        // 0.05 * (8.0 - 0.4) / 1 = 0.38
        let b = decision_boundary(&params(0.05, 1.0, 0.4, 8.0)).unwrap();
        assert!((b - 0.38).abs() < 1e-12);
        // raw 9.5 clamps to 1
        assert_eq!(decision_boundary(&params(1.0, 1.0, 0.5, 10.0)).unwrap(), 1.0);
        assert!(matches!(
            decision_boundary(&params(1.0, 0.0, 0.5, 10.0)),
            Err(RouterError::InvalidParams(_))
        ));
        assert!(decision_boundary(&params(1.0, 1.0, 2.0, 1.0)).is_err());
    }

    #[test]
    fn cost_examples() {
        assert_eq!(expected_cost(Route::Rag, 1.0, &params(0.0, 3.0, 1.0, 2.0)).unwrap(), 0.0);
        // 1 * 0.5 + 2 * (1 - 0.9) = 0.7
        let c = expected_cost(Route::Rag, 0.9, &params(1.0, 2.0, 0.5, 4.0)).unwrap();
        assert!((c - 0.7).abs() < 1e-12);
        assert!(expected_cost(Route::Rag, 1.2, &CostParams::default()).is_err());
    }

    #[test]
    fn paper_queries_route_as_expected() {
        let router = QueryRouter::new(CostParams::default(), ThresholdSource::FixedHalf).unwrap();
        let mock = MockBackend::new(16);
        let d = router.route(&mock, "What did we decide about the API?").unwrap();
        assert_eq!(d.route, Route::Rag);
        assert_eq!(d.threshold_used, 0.5);
        let d = router
            .route(&mock, "What patterns do you notice across our conversations?")
            .unwrap();
        assert_eq!(d.route, Route::Rlm);
        assert_eq!(d.p_exhaustive, 1.0);
        assert_eq!(router.route(&mock, " "), Err(RouterError::EmptyQuery));
    }

    #[test]
    fn tie_goes_to_rlm() {
        assert_eq!(route_for(0.5, 0.5), Route::Rlm);
        assert_eq!(route_for(0.4999, 0.5), Route::Rag);
    }

    #[test]
    fn derived_threshold_source() {
        let router =
            QueryRouter::new(params(0.05, 1.0, 0.4, 8.0), ThresholdSource::DerivedBoundary).unwrap();
        assert!((router.threshold() - 0.38).abs() < 1e-12);
    }

    #[test]
    fn classifier_failure_falls_back_to_rag() {
        let backend = InstrumentedBackend::new(MockBackend::new(16));
        backend.fail_after(Operation::Classify, 0);
        let router = QueryRouter::new(CostParams::default(), ThresholdSource::FixedHalf)
            .unwrap()
            .with_synthetic_latency(Duration::from_millis(250));
        let d = router.route(&backend, "summarize everything").unwrap();
        assert_eq!(d.route, Route::Rag);
        assert_eq!(d.p_exhaustive, 0.0);
        assert!(d.fallback);
        assert_eq!(d.router_latency, Duration::from_millis(250));
    }

    #[test]
    fn history_persists_newest_first() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(ROUTE_HISTORY_FILE);
        let mut h = RouteHistory::open(&path).unwrap();
        for i in 0..3 {
            h.append(RouteRecord {
                timestamp: Utc::now(),
                session_id: "s".into(),
                query_hash: query_hash(&format!("q{i}")),
                query_text: None,
                route: Route::Rag,
                p_exhaustive: i as f64 / 10.0,
                threshold_used: 0.5,
                fallback: false,
                router_latency_ms: 0.1,
                retrieval_latency_ms: 0.2,
                generation_latency_ms: 0.3,
            })
            .unwrap();
        }
        let reopened = RouteHistory::open(&path).unwrap();
        assert_eq!(reopened.len(), 3);
        let recent = reopened.recent(2);
        assert_eq!(recent[0].p_exhaustive, 0.2);
        assert_eq!(recent[1].p_exhaustive, 0.1);
        assert!(!fs::read_to_string(&path).unwrap().contains("q0"));
    }

    fn valid_params() -> impl Strategy<Value = CostParams> {
        (0.0..5.0f64, 1e-3..5.0f64, 0.0..10.0f64, 0.0..50.0f64)
            .prop_map(|(l1, l2, rag, extra)| params(l1, l2, rag, rag + extra))
    }

    proptest! {
        #[test]
        fn boundary_in_unit_interval(p in valid_params()) {
            let b = decision_boundary(&p).unwrap();
            prop_assert!((0.0..=1.0).contains(&b));
        }

        #[test]
        fn raising_threshold_never_turns_rag_into_rlm(p in 0.0..=1.0f64, t1 in 0.0..=1.0f64, dt in 0.0..=1.0f64) {
            let t2 = (t1 + dt).min(1.0);
            if route_for(p, t1) == Route::Rag {
                prop_assert_eq!(route_for(p, t2), Route::Rag);
            }
        }

        #[test]
        fn rlm_never_cheaper_at_equal_accuracy(p in valid_params(), acc in 0.0..=1.0f64) {
            let rag = expected_cost(Route::Rag, acc, &p).unwrap();
            let rlm = expected_cost(Route::Rlm, acc, &p).unwrap();
            prop_assert!(rlm >= rag);
        }
    }
}
