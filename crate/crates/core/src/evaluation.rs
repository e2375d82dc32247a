//! Accuracy metrics and paired significance tests.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data_model::IncidenceLevel;
use crate::error::{Error, Result};
use crate::forecaster::{PredictionRecord, ScoreMode};

/// Largest number of non-zero differences handled by the exact signed-rank
/// distribution; above it the normal approximation is used.
pub const WILCOXON_EXACT_MAX_N: usize = 12;

/// Smallest number of non-zero differences the signed-rank test accepts.
pub const WILCOXON_MIN_N: usize = 5;

/// Average ranks (1-based) of `values`, ties sharing the mean of their
/// positions. Returns the ranks and the tie group sizes.
fn average_ranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = rank;
        }
        ties.push(j - i);
        i = j;
    }
    (ranks, ties)
}

/// Area under the ROC curve: the fraction of (positive, negative) pairs the
/// scores order correctly, ties counting one half. Computed from midrank sums.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::domain("NaN score"));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Undefined("AUC needs both positive and negative labels".into()));
    }
    let (ranks, _) = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelAuc {
    /// Mean over the levels whose AUC is defined.
    pub mean: f64,
    /// Per level (Low, Medium, High); `None` when one class is missing.
    pub per_level: [Option<f64>; 3],
}

/// One-vs-all AUC per incidence level averaged over the defined levels.
pub fn mean_level_auc(records: &[PredictionRecord], mode: ScoreMode) -> Result<LevelAuc> {
    let rows: Vec<([f64; 3], IncidenceLevel)> = records
        .iter()
        .map(|r| {
            r.true_level
                .map(|l| (r.level_scores(mode), l))
                .ok_or_else(|| Error::Undefined(format!("record for week {} has no truth", r.target_week)))
        })
        .collect::<Result<_>>()?;
    mean_level_auc_scores(&rows)
}

pub fn mean_level_auc_scores(rows: &[([f64; 3], IncidenceLevel)]) -> Result<LevelAuc> {
    let mut per_level = [None; 3];
    for level in IncidenceLevel::ALL {
        let scores: Vec<f64> = rows.iter().map(|(s, _)| s[level.index()]).collect();
        let labels: Vec<bool> = rows.iter().map(|(_, l)| *l == level).collect();
        per_level[level.index()] = match roc_auc(&scores, &labels) {
            Ok(v) => Some(v),
            Err(Error::Undefined(_)) => None,
            Err(e) => return Err(e),
        };
    }
    let defined: Vec<f64> = per_level.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::Undefined("no incidence level has both classes present".into()));
    }
    Ok(LevelAuc {
        mean: defined.iter().sum::<f64>() / defined.len() as f64,
        per_level,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    pub p_value: f64,
    /// Sum of the ranks of the positive differences.
    pub statistic: f64,
    pub n_nonzero: usize,
    pub exact: bool,
    /// Set when every difference is zero (`p_value` is then 1).
    pub degenerate: bool,
}

/// Two-sided paired Wilcoxon signed-rank test. Zeros are dropped and tied
/// magnitudes get average ranks. Exact for up to
/// [`WILCOXON_EXACT_MAX_N`] non-zero differences, otherwise normal with tie
/// and continuity corrections.
pub fn wilcoxon_signed_rank(differences: &[f64]) -> Result<WilcoxonResult> {
    if differences.iter().any(|d| d.is_nan()) {
        return Err(Error::domain("NaN difference"));
    }
    let nonzero: Vec<f64> = differences.iter().copied().filter(|d| *d != 0.0).collect();
    let n = nonzero.len();
    if n == 0 {
        return Ok(WilcoxonResult {
            p_value: 1.0,
            statistic: 0.0,
            n_nonzero: 0,
            exact: true,
            degenerate: true,
        });
    }
    if n < WILCOXON_MIN_N {
        return Err(Error::Undefined(format!(
            "signed-rank test needs at least {WILCOXON_MIN_N} non-zero differences, got {n}"
        )));
    }
    let magnitudes: Vec<f64> = nonzero.iter().map(|d| d.abs()).collect();
    let (ranks, ties) = average_ranks(&magnitudes);
    let w_plus: f64 = ranks.iter().zip(&nonzero).filter(|(_, d)| **d > 0.0).map(|(r, _)| r).sum();
    let p_value = if n <= WILCOXON_EXACT_MAX_N {
        exact_signed_rank_p(&ranks, w_plus)
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term;
        let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
        libm::erfc(z / std::f64::consts::SQRT_2).min(1.0)
    };
    Ok(WilcoxonResult {
        p_value,
        statistic: w_plus,
        n_nonzero: n,
        exact: n <= WILCOXON_EXACT_MAX_N,
        degenerate: false,
    })
}

/// Null distribution of the positive-rank sum by counting sign assignments.
/// Ranks are doubled so average ranks become integers.
fn exact_signed_rank_p(ranks: &[f64], w_plus: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0u64; total + 1];
    counts[0] = 1;
    for &r in &doubled {
        for s in (r..=total).rev() {
            counts[s] += counts[s - r];
        }
    }
    let w = (2.0 * w_plus).round() as usize;
    let all = (1u64 << ranks.len()) as f64;
    let lower: u64 = counts[..=w].iter().sum();
    let upper: u64 = counts[w..].iter().sum();
    (2.0 * lower.min(upper) as f64 / all).min(1.0)
}

/// `p_i < alpha / m` for `m = p_values.len()`.
pub fn bonferroni(p_values: &[f64], alpha: f64) -> Vec<bool> {
    let cutoff = alpha / p_values.len().max(1) as f64;
    p_values.iter().map(|&p| p < cutoff).collect()
}

/// Normal quantile-quantile pairs for standardized residuals: sorted observed
/// values against standard-normal quantiles at `(i - 0.5) / n`.
pub fn qq_residual_data(residuals: &[f64]) -> Result<Vec<(f64, f64)>> {
    let n = residuals.len();
    if n < 3 {
        return Err(Error::domain("quantile plot needs at least 3 residuals"));
    }
    let mean = residuals.iter().sum::<f64>() / n as f64;
    let var = residuals.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if !(var > 0.0) || !var.is_finite() {
        return Err(Error::domain("residuals have zero variance"));
    }
    let sd = var.sqrt();
    let mut z: Vec<f64> = residuals.iter().map(|r| (r - mean) / sd).collect();
    z.sort_by(f64::total_cmp);
    let normal = Normal::standard();
    Ok(z.into_iter()
        .enumerate()
        .map(|(i, obs)| (normal.inverse_cdf((i as f64 + 0.5) / n as f64), obs))
        .collect())
}

/// Mean and normal-approximation 95% interval `mean ± 1.96 sd / √n`.
pub fn mean_ci95(values: &[f64]) -> Option<(f64, f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return Some((mean, mean, mean));
    }
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let half = crate::gp::Z95 * sd / n.sqrt();
    Some((mean, mean - half, mean + half))
}
