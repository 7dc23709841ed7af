use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{invalid, LabError};
use crate::backend::{BackendError, LlmBackend};
use crate::index::dot;

/// Item pairs whose embeddings have cosine below this are contradictions.
pub const CONTRADICTION_COSINE: f64 = -0.5;
pub const MAX_BENCH_ANCHORS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsistencyScan {
    pub anchor_pairs: usize,
    pub item_pairs: usize,
    pub contradictions: usize,
}

/// Compare every item of every anchor against every item of every other
/// anchor. Vectors must be unit length.
pub fn consistency_scan(anchors: &[Vec<Vec<f64>>]) -> ConsistencyScan {
    let mut scan = ConsistencyScan {
        anchor_pairs: 0,
        item_pairs: 0,
        contradictions: 0,
    };
    for (i, a) in anchors.iter().enumerate() {
        for b in &anchors[i + 1..] {
            scan.anchor_pairs += 1;
            for x in a {
                for y in b {
                    scan.item_pairs += 1;
                    if dot(x, y) < CONTRADICTION_COSINE {
                        scan.contradictions += 1;
                    }
                }
            }
        }
    }
    scan
}

/// Embeddings for `k` synthetic anchors of `items` statements each.
pub fn synthetic_anchor_vectors(
    backend: &dyn LlmBackend,
    k: usize,
    items: usize,
) -> Result<Vec<Vec<Vec<f64>>>, BackendError> {
    (0..k)
        .map(|a| {
            (0..items)
                .map(|i| backend.embed(&format!("anchor {a} states preference {i} about topic {}", a * 31 + i)))
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KTiming {
    pub k: usize,
    pub item_pairs: usize,
    pub min_secs: f64,
    pub median_secs: f64,
    pub samples_secs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFit {
    /// Polynomial coefficients, constant term first.
    pub coefficients: Vec<f64>,
    pub r2: f64,
    pub adjusted_r2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub items_per_anchor: usize,
    pub repetitions: usize,
    pub timings: Vec<KTiming>,
    pub linear: ModelFit,
    pub quadratic: ModelFit,
    /// "linear" or "quadratic", whichever has the higher adjusted r².
    pub best_model: String,
    pub best_r2: f64,
}

impl ScalingReport {
    /// Minimum timings never decrease as k grows.
    pub fn is_monotone(&self) -> bool {
        self.timings.windows(2).all(|w| w[1].min_secs >= w[0].min_secs)
    }
}

fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            let (upper, lower) = a.split_at_mut(row);
            for (x, p) in lower[0][col..n].iter_mut().zip(&upper[col][col..n]) {
                *x -= f * p;
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|c| a[row][c] * x[c]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Some(x)
}

/// Least-squares polynomial fit of `degree` through `(xs, ys)`.
pub fn fit_polynomial(xs: &[f64], ys: &[f64], degree: usize) -> Option<ModelFit> {
    let p = degree + 1;
    if xs.len() != ys.len() || xs.len() < p {
        return None;
    }
    let mut ata = vec![vec![0.0; p]; p];
    let mut aty = vec![0.0; p];
    for (x, y) in xs.iter().zip(ys) {
        let powers: Vec<f64> = (0..p).map(|e| x.powi(e as i32)).collect();
        for r in 0..p {
            aty[r] += powers[r] * y;
            for c in 0..p {
                ata[r][c] += powers[r] * powers[c];
            }
        }
    }
    let coefficients = solve(ata, aty)?;
    let n = xs.len() as f64;
    let mean = ys.iter().sum::<f64>() / n;
    let ss_tot: f64 = ys.iter().map(|y| (y - mean).powi(2)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let fit: f64 = coefficients.iter().enumerate().map(|(e, c)| c * x.powi(e as i32)).sum();
            (y - fit).powi(2)
        })
        .sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    let dof = n - p as f64;
    let adjusted_r2 = if dof > 0.0 {
        1.0 - (1.0 - r2) * (n - 1.0) / dof
    } else {
        r2
    };
    Some(ModelFit {
        coefficients,
        r2,
        adjusted_r2,
    })
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Time the pairwise consistency scan for each anchor count in `ks`.
pub fn measure_consistency_cost(
    backend: &dyn LlmBackend,
    ks: &[usize],
    repetitions: usize,
    items_per_anchor: usize,
) -> Result<ScalingReport, LabError> {
    if repetitions == 0 {
        return invalid("repetitions must be at least 1");
    }
    if items_per_anchor == 0 {
        return invalid("items_per_anchor must be at least 1");
    }
    if ks.len() < 3 {
        return invalid("need at least three anchor counts to fit a model");
    }
    if let Some(k) = ks.iter().find(|k| !(1..=MAX_BENCH_ANCHORS).contains(*k)) {
        return invalid(format!("anchor count {k} outside 1..={MAX_BENCH_ANCHORS}"));
    }
    let mut timings = Vec::with_capacity(ks.len());
    for &k in ks {
        let anchors = synthetic_anchor_vectors(backend, k, items_per_anchor)
            .map_err(|e| LabError::Invalid(format!("embedding failed: {e}")))?;
        let mut samples = Vec::with_capacity(repetitions);
        let mut item_pairs = 0;
        for _ in 0..repetitions {
            let started = Instant::now();
            let scan = std::hint::black_box(consistency_scan(std::hint::black_box(&anchors)));
            samples.push(started.elapsed());
            item_pairs = scan.item_pairs;
        }
        let mut secs: Vec<f64> = samples.iter().map(Duration::as_secs_f64).collect();
        secs.sort_by(f64::total_cmp);
        timings.push(KTiming {
            k,
            item_pairs,
            min_secs: secs[0],
            median_secs: median(&secs),
            samples_secs: secs,
        });
    }
    let xs: Vec<f64> = timings.iter().map(|t| t.k as f64).collect();
    let ys: Vec<f64> = timings.iter().map(|t| t.min_secs).collect();
    let linear = fit_polynomial(&xs, &ys, 1).ok_or_else(|| LabError::Invalid("degenerate anchor counts".into()))?;
    let quadratic = fit_polynomial(&xs, &ys, 2).ok_or_else(|| LabError::Invalid("degenerate anchor counts".into()))?;
    let (best_model, best_r2) = if quadratic.adjusted_r2 > linear.adjusted_r2 {
        ("quadratic", quadratic.r2)
    } else {
        ("linear", linear.r2)
    };
    Ok(ScalingReport {
        items_per_anchor,
        repetitions,
        timings,
        linear,
        quadratic,
        best_model: best_model.to_string(),
        best_r2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::MockBackend;

    #[test]
    fn single_anchor_scan_is_a_no_op() {
        let v = synthetic_anchor_vectors(&MockBackend::new(32), 1, 8).unwrap();
        assert_eq!(consistency_scan(&v), ConsistencyScan { anchor_pairs: 0, item_pairs: 0, contradictions: 0 });
    }

    #[test]
    fn pair_counts() {
        let v = synthetic_anchor_vectors(&MockBackend::new(32), 5, 3).unwrap();
        let scan = consistency_scan(&v);
        assert_eq!(scan.anchor_pairs, 10);
        assert_eq!(scan.item_pairs, 90);
    }

    #[test]
    fn opposite_vectors_contradict() {
        let a = vec![vec![vec![1.0, 0.0]]];
        let b = vec![vec![vec![-1.0, 0.0]], vec![vec![0.0, 1.0]]];
        let anchors: Vec<Vec<Vec<f64>>> = a.into_iter().chain(b).collect();
        assert_eq!(consistency_scan(&anchors).contradictions, 1);
    }

    #[test]
    fn exact_fits_recover_coefficients() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 + 3.0 * x + 0.5 * x * x).collect();
        let q = fit_polynomial(&xs, &ys, 2).unwrap();
        for (got, want) in q.coefficients.iter().zip([2.0, 3.0, 0.5]) {
            assert!((got - want).abs() < 1e-9);
        }
        assert!((q.r2 - 1.0).abs() < 1e-12);
        let lin: Vec<f64> = xs.iter().map(|x| 1.0 - 2.0 * x).collect();
        assert!((fit_polynomial(&xs, &lin, 1).unwrap().r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn preconditions() {
        let m = MockBackend::new(16);
        assert!(measure_consistency_cost(&m, &[2, 4, 8], 0, 4).is_err());
        assert!(measure_consistency_cost(&m, &[0, 4, 8], 1, 4).is_err());
        assert!(measure_consistency_cost(&m, &[2, 4, 65], 1, 4).is_err());
    }

    #[test]
    fn report_is_produced() {
        let report = measure_consistency_cost(&MockBackend::new(64), &[2, 4, 8, 16, 32], 5, 16).unwrap();
        assert_eq!(report.timings.len(), 5);
        assert_eq!(report.timings[4].item_pairs, 496 * 256);
        assert!(report.best_r2 >= 0.9, "{report:?}");
    }
}
