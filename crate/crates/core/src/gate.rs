//! Correlation gate: nowcast estimates join the training set only for cities
//! whose observed log incidence and log tweet counts are correlated enough.

use serde::{Deserialize, Serialize};

use crate::data_model::CitySeries;
use crate::error::{Error, Result};

/// Minimum overlap (in weeks) for a correlation to be computed.
pub const MIN_OVERLAP: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Use,
    Ignore,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Use => "use",
            Self::Ignore => "ignore",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    /// NaN when no correlation could be computed.
    pub correlation: f64,
    pub threshold: f64,
    pub verdict: Verdict,
}

impl GateDecision {
    /// `Use` iff `correlation >= threshold`; NaN never passes.
    pub fn from_correlation(correlation: f64, threshold: f64) -> Self {
        let verdict = if correlation >= threshold {
            Verdict::Use
        } else {
            Verdict::Ignore
        };
        Self {
            correlation,
            threshold,
            verdict,
        }
    }

    pub fn has_correlation(&self) -> bool {
        !self.correlation.is_nan()
    }
}

/// Pearson product-moment correlation.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("{} vs {} values", a.len(), b.len())));
    }
    if a.len() < MIN_OVERLAP {
        return Err(Error::Undefined(format!(
            "correlation needs at least {MIN_OVERLAP} pairs, got {}",
            a.len()
        )));
    }
    let is_constant = |v: &[f64]| v.iter().all(|x| *x == v[0]);
    if is_constant(a) || is_constant(b) {
        return Err(Error::Undefined("correlation of a constant series".into()));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Gate on already log-transformed series.
pub fn decide_on_logs(y_log: &[f64], x_log: &[f64], threshold: f64) -> GateDecision {
    let r = pearson(y_log, x_log).unwrap_or(f64::NAN);
    GateDecision::from_correlation(r, threshold)
}

/// Correlates `log1p(DIR)` with `log1p(tweets)` over weeks `1..=issue_week - gamma`,
/// the span where both are observed at issue time.
pub fn decide(series: &CitySeries, issue_week: u32, gamma: u32, threshold: f64) -> Result<GateDecision> {
    if threshold.is_nan() {
        return Err(Error::domain("gate threshold is NaN"));
    }
    let Some(tweets) = series.tweets() else {
        return Ok(GateDecision::from_correlation(f64::NAN, threshold));
    };
    let observed = (issue_week.saturating_sub(gamma) as usize).min(series.n_weeks());
    let y: Vec<f64> = series.dir()[..observed].iter().map(|d| d.ln_1p()).collect();
    let x: Vec<f64> = tweets[..observed].iter().map(|&c| (c as f64).ln_1p()).collect();
    Ok(decide_on_logs(&y, &x, threshold))
}
