//! Agreement statistics: Spearman rank and Pearson linear correlation plus
//! confusion-matrix ratios. Used to validate the trained sharpness and
//! score models.

use crate::num::Real;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StatsError {
    #[error("need at least 2 paired samples, got {0}")]
    TooShort(usize),
    #[error("series lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("series has zero variance")]
    ZeroVariance,
    #[error("series contains a non-finite value")]
    NonFinite,
}

fn check_pair<R: Real>(x: &[R], y: &[R]) -> Result<(), StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(StatsError::TooShort(x.len()));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    Ok(())
}

/// Pearson linear correlation coefficient.
pub fn plcc<R: Real>(x: &[R], y: &[R]) -> Result<R, StatsError> {
    check_pair(x, y)?;
    let n = R::of_usize(x.len());
    let mean = |v: &[R]| v.iter().fold(R::zero(), |a, &b| a + b) / n;
    let (mx, my) = (mean(x), mean(y));
    let mut sxy = R::zero();
    let mut sxx = R::zero();
    let mut syy = R::zero();
    for (&a, &b) in x.iter().zip(y) {
        let dx = a - mx;
        let dy = b - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == R::zero() || syy == R::zero() {
        return Err(StatsError::ZeroVariance);
    }
    Ok(sxy / (sxx.sqrt() * syy.sqrt()))
}

/// Ranks with ties resolved to the average rank of the tied block (1-based).
pub fn average_ranks<R: Real>(values: &[R]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // average of 1-based ranks i+1 ..= j+1
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation. Without ties this is the classic
/// `1 - 6*sum(d^2) / (n(n^2-1))` shortcut; with ties it falls back to the
/// Pearson correlation of the average ranks, which the shortcut only
/// approximates.
pub fn srcc<R: Real>(x: &[R], y: &[R]) -> Result<R, StatsError> {
    check_pair(x, y)?;
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let has_ties = |r: &[f64]| {
        let mut s: Vec<u64> = r.iter().map(|v| v.to_bits()).collect();
        s.sort_unstable();
        s.windows(2).any(|w| w[0] == w[1])
    };
    if !has_ties(&rx) && !has_ties(&ry) {
        let n = x.len() as f64;
        let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b) * (a - b)).sum();
        return Ok(R::of(1.0 - 6.0 * d2 / (n * (n * n - 1.0))));
    }
    let rx: Vec<R> = rx.into_iter().map(R::of).collect();
    let ry: Vec<R> = ry.into_iter().map(R::of).collect();
    plcc(&rx, &ry)
}

/// Accuracy, sensitivity, specificity from confusion counts. Ratios with a
/// zero denominator come back as `None`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfusionStats<R> {
    pub accuracy: Option<R>,
    pub sensitivity: Option<R>,
    pub specificity: Option<R>,
}

pub fn confusion_stats<R: Real>(tp: u64, tn: u64, fp: u64, fn_: u64) -> ConfusionStats<R> {
    let ratio = |num: u64, den: u64| {
        (den > 0).then(|| R::of(num as f64) / R::of(den as f64))
    };
    ConfusionStats {
        accuracy: ratio(tp + tn, tp + tn + fp + fn_),
        sensitivity: ratio(tp, tp + fn_),
        specificity: ratio(tn, tn + fp),
    }
}
