use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use super::{invalid, LabError};
use crate::backend::LlmBackend;
use crate::router::{route_for, Route};

/// Scopes at or above this fraction of the corpus are labeled exhaustive.
pub const LABEL_BOUNDARY: f64 = 0.4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkloadSpec {
    /// Weight of the focused component.
    pub alpha: f64,
    pub mu1: f64,
    pub mu2: f64,
    pub sigma1: f64,
    pub sigma2: f64,
    pub count: usize,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            alpha: 0.9,
            mu1: 0.01,
            mu2: 0.8,
            sigma1: 0.02,
            sigma2: 0.1,
            count: 10_000,
            seed: 0,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), LabError> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.alpha) {
            return invalid("alpha must be in [0, 1]");
        }
        if !unit(self.mu1) || !unit(self.mu2) || self.mu1 >= self.mu2 {
            return invalid("need 0 <= mu1 < mu2 <= 1");
        }
        if !(self.sigma1 > 0.0 && self.sigma2 > 0.0 && self.sigma1.is_finite() && self.sigma2.is_finite()) {
            return invalid("sigmas must be positive");
        }
        if self.count == 0 {
            return invalid("count must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScopeLabel {
    Focused,
    Exhaustive,
}

impl ScopeLabel {
    pub fn for_scope(scope: f64) -> Self {
        if scope >= LABEL_BOUNDARY {
            ScopeLabel::Exhaustive
        } else {
            ScopeLabel::Focused
        }
    }

    pub fn expected_route(self) -> Route {
        match self {
            ScopeLabel::Focused => Route::Rag,
            ScopeLabel::Exhaustive => Route::Rlm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticQuery {
    pub text: String,
    pub true_scope: f64,
    pub true_label: ScopeLabel,
}

const TOPICS: [&str; 16] = [
    "the dentist appointment",
    "my sister's wedding",
    "the Rust migration",
    "the budget spreadsheet",
    "my running plan",
    "the Lisbon trip",
    "the quarterly review",
    "my landlord",
    "the garden",
    "the database outage",
    "the book club pick",
    "my job interview",
    "the car repair",
    "the birthday gift",
    "the hiring plan",
    "the conference talk",
];

const FOCUSED_TEMPLATES: [&str; 6] = [
    "What did I tell you about {t}?",
    "When is {t} scheduled again?",
    "Remind me what we decided on {t}.",
    "Who was involved in {t}?",
    "What was the last update on {t}?",
    "Did I mention a deadline for {t}?",
];

const EXHAUSTIVE_TEMPLATES: [&str; 6] = [
    "Summarize everything we have discussed about {t}.",
    "What patterns do you see in how I handle {t}?",
    "Across our conversations, how has {t} evolved?",
    "Overall, what is my attitude toward {t}?",
    "Give me all of the decisions related to {t}.",
    "Summarize how my thinking on {t} changed over time.",
];

fn truncated_normal(rng: &mut ChaCha8Rng, dist: &Normal<f64>) -> f64 {
    loop {
        let x: f64 = rng.sample(dist);
        if (0.0..=1.0).contains(&x) {
            return x;
        }
    }
}

/// Queries whose scopes follow the two-component mixture truncated to
/// `[0, 1]`. Texts carry the usual lexical markers of their label.
pub fn generate_workload(spec: &WorkloadSpec) -> Result<Vec<SyntheticQuery>, LabError> {
    spec.validate()?;
    let focused = Normal::new(spec.mu1, spec.sigma1).map_err(|e| LabError::Invalid(e.to_string()))?;
    let broad = Normal::new(spec.mu2, spec.sigma2).map_err(|e| LabError::Invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.count);
    for _ in 0..spec.count {
        let from_focused = rng.random::<f64>() < spec.alpha;
        let scope = truncated_normal(&mut rng, if from_focused { &focused } else { &broad });
        let label = ScopeLabel::for_scope(scope);
        let templates = match label {
            ScopeLabel::Focused => &FOCUSED_TEMPLATES,
            ScopeLabel::Exhaustive => &EXHAUSTIVE_TEMPLATES,
        };
        let template = templates.choose(&mut rng).expect("non-empty");
        let topic = TOPICS.choose(&mut rng).expect("non-empty");
        out.push(SyntheticQuery {
            text: template.replace("{t}", topic),
            true_scope: scope,
            true_label: label,
        });
    }
    Ok(out)
}

/// A classifier that knows the ground truth.
pub fn oracle_probability(query: &SyntheticQuery) -> f64 {
    match query.true_label {
        ScopeLabel::Focused => 0.0,
        ScopeLabel::Exhaustive => 1.0,
    }
}

/// Entropy in bits of a Bernoulli(`p`) variable.
pub fn binary_entropy_bits(p: f64) -> f64 {
    let term = |x: f64| if x > 0.0 { -x * x.log2() } else { 0.0 };
    term(p) + term(1.0 - p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterEvaluation {
    pub count: usize,
    pub accuracy: f64,
    /// One minus the entropy (in bits) of the focused/exhaustive label.
    pub entropy_bound: f64,
    pub label_entropy_bits: f64,
    pub rag_fraction: f64,
    pub focused_fraction: f64,
    pub threshold: f64,
    pub classifier_failures: usize,
}

impl RouterEvaluation {
    /// Whether measured accuracy sits at or above the entropy bound.
    pub fn meets_entropy_bound(&self) -> bool {
        self.accuracy >= self.entropy_bound
    }
}

/// Route every query through `classify` and the threshold rule, scoring
/// routes against the ground-truth labels. Classifier errors fall back to
/// RAG, as the live router does.
pub fn evaluate_router<F, E>(
    queries: &[SyntheticQuery],
    threshold: f64,
    classify: F,
) -> Result<RouterEvaluation, LabError>
where
    F: Fn(&SyntheticQuery) -> Result<f64, E>,
{
    if queries.is_empty() {
        return invalid("no queries to evaluate");
    }
    let (mut correct, mut rag, mut focused, mut failures) = (0usize, 0usize, 0usize, 0usize);
    for q in queries {
        let p = match classify(q) {
            Ok(p) => p,
            Err(_) => {
                failures += 1;
                0.0
            }
        };
        let route = route_for(p, threshold);
        correct += usize::from(route == q.true_label.expected_route());
        rag += usize::from(route == Route::Rag);
        focused += usize::from(q.true_label == ScopeLabel::Focused);
    }
    let n = queries.len() as f64;
    let focused_fraction = focused as f64 / n;
    let label_entropy_bits = binary_entropy_bits(focused_fraction);
    Ok(RouterEvaluation {
        count: queries.len(),
        accuracy: correct as f64 / n,
        entropy_bound: 1.0 - label_entropy_bits,
        label_entropy_bits,
        rag_fraction: rag as f64 / n,
        focused_fraction,
        threshold,
        classifier_failures: failures,
    })
}

pub fn evaluate_with_backend(
    queries: &[SyntheticQuery],
    threshold: f64,
    backend: &dyn LlmBackend,
) -> Result<RouterEvaluation, LabError> {
    evaluate_router(queries, threshold, |q| backend.classify_exhaustive(&q.text))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::MockBackend;
    use crate::router::DEFAULT_THRESHOLD;
    use std::convert::Infallible;

    fn oracle(q: &SyntheticQuery) -> Result<f64, Infallible> {
        Ok(oracle_probability(q))
    }

    #[test]
    fn alpha_one_is_all_focused() {
        let qs = generate_workload(&WorkloadSpec {
            alpha: 1.0,
            count: 2000,
            ..Default::default()
        })
        .unwrap();
        assert!(qs.iter().all(|q| q.true_label == ScopeLabel::Focused));
        let eval = evaluate_router(&qs, DEFAULT_THRESHOLD, oracle).unwrap();
        assert_eq!(eval.label_entropy_bits, 0.0);
        assert_eq!(eval.entropy_bound, 1.0);
    }

    fn focused_fraction(spec: &WorkloadSpec) -> f64 {
        let qs = generate_workload(spec).unwrap();
        assert!(qs.iter().all(|q| (0.0..=1.0).contains(&q.true_scope)));
        qs.iter().filter(|q| q.true_label == ScopeLabel::Focused).count() as f64 / qs.len() as f64
    }

    #[test]
    fn focused_fraction_near_alpha() {
        let frac = focused_fraction(&WorkloadSpec::default());
        assert!((frac - 0.9).abs() <= 0.01, "fraction {frac}");
    }

    /// Averaged over 20 seeds the standard error shrinks by sqrt(20); the
    /// mean must sit within three of those of alpha.
    #[test]
    fn focused_fraction_concentrates_across_seeds() {
        let spec = WorkloadSpec::default();
        let seeds = 20;
        let mean = (0..seeds)
            .map(|seed| focused_fraction(&WorkloadSpec { seed, ..spec.clone() }))
            .sum::<f64>()
            / seeds as f64;
        let sigma = (spec.alpha * (1.0 - spec.alpha) / (spec.count as f64 * seeds as f64)).sqrt();
        assert!((mean - spec.alpha).abs() <= 3.0 * sigma, "mean {mean}");
    }

    #[test]
    fn same_seed_same_workload() {
        let spec = WorkloadSpec {
            count: 500,
            seed: 9,
            ..Default::default()
        };
        assert_eq!(generate_workload(&spec).unwrap(), generate_workload(&spec).unwrap());
        let other = WorkloadSpec { seed: 10, ..spec.clone() };
        assert_ne!(generate_workload(&spec).unwrap(), generate_workload(&other).unwrap());
    }

    #[test]
    fn oracle_and_mock_classifiers_are_exact() {
        let qs = generate_workload(&WorkloadSpec::default()).unwrap();
        let eval = evaluate_router(&qs, DEFAULT_THRESHOLD, oracle).unwrap();
        assert_eq!(eval.accuracy, 1.0);
        assert!(eval.meets_entropy_bound());
        let mock = evaluate_with_backend(&qs, DEFAULT_THRESHOLD, &MockBackend::new(16)).unwrap();
        assert_eq!(mock.accuracy, 1.0);
    }

    #[test]
    fn entropy_values() {
        assert_eq!(binary_entropy_bits(0.5), 1.0);
        assert_eq!(binary_entropy_bits(0.0), 0.0);
        assert!((binary_entropy_bits(0.9) - 0.468_995_593_6).abs() < 1e-9);
    }

    #[test]
    fn invalid_specs() {
        assert!(generate_workload(&WorkloadSpec { mu1: 0.9, mu2: 0.1, ..Default::default() }).is_err());
        assert!(generate_workload(&WorkloadSpec { count: 0, ..Default::default() }).is_err());
        assert!(evaluate_router(&[], 0.5, oracle).is_err());
    }
}
