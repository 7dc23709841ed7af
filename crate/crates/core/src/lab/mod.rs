//! Synthetic experiments: scope-bimodal query workloads and router
//! accuracy, the single-anchor failure bound, measured continuity under
//! anchor failure, and consistency-check cost scaling.

mod consistency;
mod failure;
mod workload;

use thiserror::Error;

use crate::anchors::AnchorError;
use crate::drift::DriftError;

pub use consistency::{
    consistency_scan, fit_polynomial, measure_consistency_cost, synthetic_anchor_vectors, ConsistencyScan,
    KTiming, ModelFit, ScalingReport, CONTRADICTION_COSINE, MAX_BENCH_ANCHORS,
};
pub use failure::{
    measured_failure, random_scenario, run_failure_simulation, simulate_failure, ContributionModel,
    FailureOutcome, FailureScenario, FailureSummary, Normalization, ScenarioRecord, BOUND_TOLERANCE,
};
pub use workload::{
    binary_entropy_bits, evaluate_router, evaluate_with_backend, generate_workload, oracle_probability,
    RouterEvaluation, ScopeLabel, SyntheticQuery, WorkloadSpec, LABEL_BOUNDARY,
};

#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid lab input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Drift(#[from] DriftError),
    #[error(transparent)]
    Storage(#[from] AnchorError),
}

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T, LabError> {
    Err(LabError::Invalid(msg.into()))
}
