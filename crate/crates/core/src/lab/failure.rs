use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{invalid, LabError};
use crate::anchors::{AnchorKind, AnchorSet};
use crate::drift::{compute_identity_hash, run_probes, Baseline, ProbeSet, HASH_BITS};
use crate::engine::{Engine, EngineMode};
use crate::index::MemoryIndex;

pub const BOUND_TOLERANCE: f64 = 1e-9;
const MAX_RANDOM_ANCHORS: usize = 8;
const MAX_RANDOM_DELTA: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureScenario {
    pub weights: Vec<f64>,
    pub failed_index: usize,
    /// Degradation of each anchor; the failed anchor's entry is ignored.
    pub deltas: Vec<f64>,
}

impl FailureScenario {
    pub fn validate(&self) -> Result<(), LabError> {
        let n = self.weights.len();
        if n == 0 {
            return invalid("scenario needs at least one anchor");
        }
        if self.deltas.len() != n {
            return invalid("weights and deltas differ in length");
        }
        if self.failed_index >= n {
            return invalid("failed_index out of range");
        }
        if self.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return invalid("weights must be nonnegative");
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return invalid(format!("weights sum to {total}, not 1"));
        }
        if self.deltas.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return invalid("deltas must be nonnegative");
        }
        Ok(())
    }
}

/// How per-anchor contributions combine into a residual.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    #[default]
    Identity,
    /// Clamp the residual into `[0, 1]`.
    Clamp,
}

impl Normalization {
    fn apply(self, x: f64) -> f64 {
        match self {
            Normalization::Identity => x,
            Normalization::Clamp => x.clamp(0.0, 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionModel {
    pub phi: Vec<f64>,
    pub normalization: Normalization,
}

impl ContributionModel {
    /// Healthy anchors contribute 1, the failed one 0.
    pub fn synthetic(n: usize, failed_index: usize) -> Self {
        Self {
            phi: (0..n).map(|i| if i == failed_index { 0.0 } else { 1.0 }).collect(),
            normalization: Normalization::Identity,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FailureOutcome {
    pub residual: f64,
    pub bound: f64,
    pub holds: bool,
}

/// Residual continuity after losing one anchor, against the lower bound
/// `1 - w_failed - sum of the surviving anchors' degradations`.
pub fn simulate_failure(scenario: &FailureScenario, model: &ContributionModel) -> Result<FailureOutcome, LabError> {
    scenario.validate()?;
    if model.phi.len() != scenario.weights.len() {
        return invalid("contribution model does not match the scenario size");
    }
    if model.phi.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return invalid("contributions must lie in [0, 1]");
    }
    let j = scenario.failed_index;
    let mut residual = 0.0;
    let mut delta_sum = 0.0;
    for i in (0..scenario.weights.len()).filter(|&i| i != j) {
        residual += scenario.weights[i] * (model.phi[i] - scenario.deltas[i]).max(0.0);
        delta_sum += scenario.deltas[i];
    }
    let residual = model.normalization.apply(residual);
    let bound = 1.0 - scenario.weights[j] - delta_sum;
    Ok(FailureOutcome {
        residual,
        bound,
        holds: residual >= bound - BOUND_TOLERANCE,
    })
}

/// Uniform weights on the simplex (normalized exponentials), 1 to 8
/// anchors, degradations uniform in `[0, 0.2]`.
pub fn random_scenario(rng: &mut impl Rng) -> FailureScenario {
    let n = rng.random_range(1..=MAX_RANDOM_ANCHORS);
    let raw: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1) + f64::MIN_POSITIVE).collect();
    let total: f64 = raw.iter().sum();
    let mut weights: Vec<f64> = raw.iter().map(|x| x / total).collect();
    // absorb rounding so the sum is 1 to the last ulp we can manage
    let drift: f64 = 1.0 - weights.iter().sum::<f64>();
    weights[n - 1] += drift;
    FailureScenario {
        failed_index: rng.random_range(0..n),
        deltas: (0..n).map(|_| rng.random_range(0.0..=MAX_RANDOM_DELTA)).collect(),
        weights,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRecord {
    pub scenario: usize,
    #[serde(flatten)]
    pub input: FailureScenario,
    #[serde(flatten)]
    pub outcome: FailureOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureSummary {
    pub scenarios: usize,
    pub held: usize,
    pub min_slack: f64,
    pub mean_residual: f64,
    pub mean_bound: f64,
}

impl FailureSummary {
    pub fn from_records(records: &[ScenarioRecord]) -> Self {
        let n = records.len().max(1) as f64;
        Self {
            scenarios: records.len(),
            held: records.iter().filter(|r| r.outcome.holds).count(),
            min_slack: records
                .iter()
                .map(|r| r.outcome.residual - r.outcome.bound)
                .fold(f64::INFINITY, f64::min),
            mean_residual: records.iter().map(|r| r.outcome.residual).sum::<f64>() / n,
            mean_bound: records.iter().map(|r| r.outcome.bound).sum::<f64>() / n,
        }
    }
}

/// `count` random scenarios under the synthetic contribution model.
/// Scenario `i` draws from its own stream, so results do not depend on
/// thread scheduling.
pub fn run_failure_simulation(count: usize, seed: u64) -> Vec<ScenarioRecord> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let input = random_scenario(&mut rng);
            let model = ContributionModel::synthetic(input.weights.len(), input.failed_index);
            let outcome = simulate_failure(&input, &model).expect("generated scenarios are valid");
            ScenarioRecord {
                scenario: i,
                input,
                outcome,
            }
        })
        .collect()
}

/// Disable `kind`, re-run the probes and report continuity as one minus the
/// normalized Hamming distance to `baseline`. The anchor's previous enabled
/// state is restored whether or not the probes succeed.
pub fn measured_failure(
    engine: &Engine,
    set: &mut AnchorSet,
    index: &MemoryIndex,
    kind: AnchorKind,
    baseline: &Baseline,
    probes: &ProbeSet,
    mode: EngineMode,
) -> Result<f64, LabError> {
    let was_enabled = set.is_enabled(kind);
    set.set_enabled(kind, false)?;
    let measured = (|| {
        let responses = run_probes(engine, set, index, probes, mode)?;
        let current = compute_identity_hash(
            engine.backend().as_ref(),
            &responses,
            &probes.version,
            baseline.hash.seed,
        )?;
        Ok::<_, LabError>(current.distance(&baseline.hash)?)
    })();
    set.set_enabled(kind, was_enabled)?;
    let distance = measured?;
    Ok(1.0 - f64::from(distance) / HASH_BITS as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchors::Role;
    use crate::backend::{InstrumentedBackend, LlmBackend, MockBackend, Operation};
    use crate::drift::take_baseline;
    use crate::engine::EngineSettings;
    use crate::router::{CostParams, QueryRouter, ThresholdSource};
    use std::sync::Arc;

    fn outcome(weights: &[f64], failed: usize, deltas: &[f64]) -> FailureOutcome {
        let s = FailureScenario {
            weights: weights.to_vec(),
            failed_index: failed,
            deltas: deltas.to_vec(),
        };
        simulate_failure(&s, &ContributionModel::synthetic(weights.len(), failed)).unwrap()
    }

    #[test]
    fn hand_checked_three_anchor_case() {
        let o = outcome(&[0.4, 0.3, 0.3], 0, &[0.7, 0.05, 0.05]);
        assert!((o.residual - (0.3 * 0.95 + 0.3 * 0.95)).abs() < 1e-12);
        assert!((o.bound - (1.0 - 0.4 - 0.1)).abs() < 1e-12);
        assert!(o.holds);
    }

    #[test]
    fn single_anchor_holds_with_equality() {
        let o = outcome(&[1.0], 0, &[0.1]);
        assert_eq!(o.residual, 0.0);
        assert_eq!(o.bound, 0.0);
        assert!(o.holds);
    }

    #[test]
    fn zero_deltas_give_surviving_weight() {
        let o = outcome(&[0.5, 0.2, 0.3], 1, &[0.0; 3]);
        assert!((o.residual - 0.8).abs() < 1e-12);
        assert!((o.residual - o.bound).abs() < 1e-12);
    }

    #[test]
    fn clamp_normalization() {
        let s = FailureScenario {
            weights: vec![0.5, 0.5],
            failed_index: 0,
            deltas: vec![0.0, 0.0],
        };
        let mut m = ContributionModel::synthetic(2, 0);
        m.normalization = Normalization::Clamp;
        assert_eq!(simulate_failure(&s, &m).unwrap().residual, 0.5);
    }

    #[test]
    fn rejects_bad_scenarios() {
        let bad = FailureScenario {
            weights: vec![0.5, 0.4],
            failed_index: 0,
            deltas: vec![0.0, 0.0],
        };
        assert!(bad.validate().is_err());
        let bad = FailureScenario {
            weights: vec![1.0],
            failed_index: 1,
            deltas: vec![0.0],
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn ten_thousand_random_scenarios_hold() {
        let records = run_failure_simulation(10_000, 1);
        assert!(records.iter().all(|r| r.input.validate().is_ok()));
        let summary = FailureSummary::from_records(&records);
        assert_eq!(summary.held, 10_000);
        assert_eq!(run_failure_simulation(50, 1), records[..50].to_vec());
    }

    fn engine(backend: Arc<dyn LlmBackend>) -> Engine {
        let router = QueryRouter::new(CostParams::default(), ThresholdSource::FixedHalf).unwrap();
        Engine::new(backend, router, EngineSettings::default()).unwrap()
    }

    fn agent() -> AnchorSet {
        let mut set = AnchorSet::in_memory("lab");
        set.replace_anchor(AnchorKind::Soul, "ECHO: I value candor and warmth above all.").unwrap();
        set.replace_anchor(AnchorKind::Procedures, "- Answer briefly").unwrap();
        set.append_memory(Role::User, "hello", "s").unwrap();
        set
    }

    #[test]
    fn measured_continuity() {
        let e = engine(Arc::new(MockBackend::new(256)));
        let mut set = agent();
        let index = MemoryIndex::new(256);
        let probes = ProbeSet::default();
        let baseline = take_baseline(&e, &set, &index, &probes, EngineMode::Inject, 5).unwrap();

        let empty = measured_failure(&e, &mut set, &index, AnchorKind::Relations, &baseline, &probes, EngineMode::Inject)
            .unwrap();
        assert_eq!(empty, 1.0);

        let soul = measured_failure(&e, &mut set, &index, AnchorKind::Soul, &baseline, &probes, EngineMode::Inject)
            .unwrap();
        let again = measured_failure(&e, &mut set, &index, AnchorKind::Soul, &baseline, &probes, EngineMode::Inject)
            .unwrap();
        assert!(soul < 1.0);
        assert_eq!(soul, again);
        assert!(set.is_enabled(AnchorKind::Soul));
    }

    #[test]
    fn anchor_restored_after_probe_failure() {
        let backend = Arc::new(InstrumentedBackend::new(MockBackend::new(64)));
        let e = engine(backend.clone());
        let mut set = agent();
        let index = MemoryIndex::new(64);
        let probes = ProbeSet::default();
        let baseline = take_baseline(&e, &set, &index, &probes, EngineMode::Inject, 5).unwrap();
        backend.fail_after(Operation::Generate, 3);
        let r = measured_failure(&e, &mut set, &index, AnchorKind::Soul, &baseline, &probes, EngineMode::Inject);
        assert!(r.is_err());
        assert!(set.is_enabled(AnchorKind::Soul));
    }
}
