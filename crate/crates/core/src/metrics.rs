//! Regression and ranking metrics for affinity predictions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("prediction and truth lengths differ ({pred} vs {truth})")]
    LengthMismatch { pred: usize, truth: usize },
    #[error("metric needs at least {needed} values")]
    Empty { needed: usize },
    #[error("no pair of records has differing truth values")]
    NoComparablePairs,
    #[error("degenerate input: {0}")]
    DegenerateInput(&'static str),
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

fn check(pred: &[f64], truth: &[f64], needed: usize) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(MetricsError::LengthMismatch {
            pred: pred.len(),
            truth: truth.len(),
        });
    }
    if pred.len() < needed {
        return Err(MetricsError::Empty { needed });
    }
    Ok(())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn mse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check(pred, truth, 1)?;
    let total: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(total / pred.len() as f64)
}

/// Concordance over pairs with differing truth, as integer half-credits:
/// returns `(2 * concordant + tied_predictions, comparable_pairs)`.
pub fn concordance_counts_naive(pred: &[f64], truth: &[f64]) -> Result<(u64, u64)> {
    check(pred, truth, 2)?;
    let (mut halves, mut z) = (0u64, 0u64);
    for i in 0..pred.len() {
        for j in 0..pred.len() {
            if truth[i] > truth[j] {
                z += 1;
                if pred[i] > pred[j] {
                    halves += 2;
                } else if pred[i] == pred[j] {
                    halves += 1;
                }
            }
        }
    }
    Ok((halves, z))
}

/// Same counts as [`concordance_counts_naive`] in O(n log n): sweep records
/// in increasing truth, querying a Fenwick tree over prediction ranks of all
/// strictly smaller truths.
pub fn concordance_counts(pred: &[f64], truth: &[f64]) -> Result<(u64, u64)> {
    check(pred, truth, 2)?;
    if pred.iter().chain(truth).any(|v| v.is_nan()) {
        return Err(MetricsError::DegenerateInput("NaN value"));
    }
    let n = pred.len();
    let mut sorted_pred: Vec<f64> = pred.to_vec();
    sorted_pred.sort_by(f64::total_cmp);
    sorted_pred.dedup();
    // rank of each prediction, 1-based for the tree
    let rank: Vec<usize> = pred
        .iter()
        .map(|p| sorted_pred.partition_point(|q| q < p) + 1)
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| truth[a].total_cmp(&truth[b]));

    let mut tree = vec![0u64; sorted_pred.len() + 1];
    let prefix = |tree: &[u64], mut i: usize| {
        let mut s = 0;
        while i > 0 {
            s += tree[i];
            i &= i - 1;
        }
        s
    };
    let (mut halves, mut z, mut inserted) = (0u64, 0u64, 0u64);
    let mut start = 0;
    while start < n {
        let mut end = start;
        while end < n && truth[order[end]] == truth[order[start]] {
            end += 1;
        }
        for &i in &order[start..end] {
            let below = prefix(&tree, rank[i] - 1);
            let at_or_below = prefix(&tree, rank[i]);
            halves += 2 * below + (at_or_below - below);
            z += inserted;
        }
        for &i in &order[start..end] {
            let mut k = rank[i];
            while k < tree.len() {
                tree[k] += 1;
                k += k & k.wrapping_neg();
            }
            inserted += 1;
        }
        start = end;
    }
    Ok((halves, z))
}

/// Concordance index: the fraction of truth-ordered pairs whose predictions
/// agree in order, with prediction ties scoring one half.
pub fn concordance_index(pred: &[f64], truth: &[f64]) -> Result<f64> {
    let (halves, z) = concordance_counts(pred, truth)?;
    if z == 0 {
        return Err(MetricsError::NoComparablePairs);
    }
    Ok(halves as f64 / (2 * z) as f64)
}

/// Centered sums `(Sxx, Sxy, Syy)` of x = pred, y = truth.
fn centered_sums(pred: &[f64], truth: &[f64]) -> (f64, f64, f64) {
    let (mx, my) = (mean(pred), mean(truth));
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in pred.iter().zip(truth) {
        let (dx, dy) = (x - mx, y - my);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    (sxx, sxy, syy)
}

/// Squared correlation of the least-squares fit truth ≈ k·pred (+ c).
///
/// With an intercept this is the squared Pearson coefficient; without,
/// `r0² = 1 − Σ(y − k·x)² / Σ(y − ȳ)²` with `k = Σxy / Σx²`.
pub fn r_squared(pred: &[f64], truth: &[f64], with_intercept: bool) -> Result<f64> {
    check(pred, truth, 2)?;
    let (sxx, sxy, syy) = centered_sums(pred, truth);
    if sxx == 0.0 {
        return Err(MetricsError::DegenerateInput("constant predictions"));
    }
    if syy == 0.0 {
        return Err(MetricsError::DegenerateInput("constant truth"));
    }
    if with_intercept {
        return Ok(sxy * sxy / (sxx * syy));
    }
    let sum_xy: f64 = pred.iter().zip(truth).map(|(x, y)| x * y).sum();
    let sum_xx: f64 = pred.iter().map(|x| x * x).sum();
    let k = sum_xy / sum_xx;
    let residual: f64 = pred
        .iter()
        .zip(truth)
        .map(|(x, y)| (y - k * x) * (y - k * x))
        .sum();
    Ok(1.0 - residual / syy)
}

/// `r² · (1 − √|r² − r0²|)`.
pub fn rm2(pred: &[f64], truth: &[f64]) -> Result<f64> {
    let r2 = r_squared(pred, truth, true)?;
    let r02 = r_squared(pred, truth, false)?;
    Ok(r2 * (1.0 - (r2 - r02).abs().sqrt()))
}

pub fn pearson(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check(pred, truth, 2)?;
    let (sxx, sxy, syy) = centered_sums(pred, truth);
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricsError::DegenerateInput("constant input"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// All metrics for one prediction set. Metrics undefined on the input
/// (no comparable pairs, constant predictions) are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mse: f64,
    pub ci: Option<f64>,
    pub rm2: Option<f64>,
    pub pearson: Option<f64>,
    pub n_pairs: usize,
    /// Number of comparable (differing-truth) pairs behind the CI.
    pub z_pairs: u64,
}

impl MetricsReport {
    pub fn compute(pred: &[f64], truth: &[f64]) -> Result<Self> {
        let mse = mse(pred, truth)?;
        let (ci, z_pairs) = if pred.len() >= 2 {
            let (halves, z) = concordance_counts(pred, truth)?;
            ((z > 0).then(|| halves as f64 / (2 * z) as f64), z)
        } else {
            (None, 0)
        };
        Ok(MetricsReport {
            mse,
            ci,
            rm2: rm2(pred, truth).ok(),
            pearson: pearson(pred, truth).ok(),
            n_pairs: pred.len(),
            z_pairs,
        })
    }
}
