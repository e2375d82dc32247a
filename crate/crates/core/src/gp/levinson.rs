//! O(n²) log marginal likelihood for contiguous integer training weeks.
//!
//! On an evenly spaced grid the temporal Gram is symmetric Toeplitz, so the
//! Levinson–Durbin recursion yields the one-step prediction errors of the
//! stationary process. Their squares over the innovation variances give the
//! quadratic form and the variances multiply to the determinant. The tweet
//! term adds a rank-one `x xᵀ / ell_tw`, handled with the matrix determinant
//! lemma and Sherman–Morrison.

use crate::kernels::{self, KernelHyperparams, KernelSpec, JITTER};

use super::{LN_2PI, MAX_JITTER};

/// True when `times` is `t0, t0 + 1, t0 + 2, ...`.
pub(crate) fn is_unit_grid(times: &[f64]) -> bool {
    let Some(&t0) = times.first() else { return false };
    t0.fract() == 0.0 && times.iter().enumerate().all(|(i, &t)| t == t0 + i as f64)
}

/// Sums over the innovations of up to two vectors: `(log|T|, yᵀT⁻¹y, uᵀT⁻¹u, yᵀT⁻¹u)`.
fn toeplitz_forms(col: &[f64], y: &[f64], u: Option<&[f64]>) -> Option<(f64, f64, f64, f64)> {
    let n = col.len();
    let mut a = vec![0.0; n];
    let mut prev = vec![0.0; n];
    let mut err = col[0];
    if !(err > 0.0) {
        return None;
    }
    let mut log_det = err.ln();
    let mut qyy = y[0] * y[0] / err;
    let (mut quu, mut qyu) = match u {
        Some(u) => (u[0] * u[0] / err, y[0] * u[0] / err),
        None => (0.0, 0.0),
    };
    for k in 1..n {
        // a[1..k] holds the order-(k-1) forward predictor.
        let mut acc = col[k];
        for j in 1..k {
            acc -= a[j] * col[k - j];
        }
        let kappa = acc / err;
        prev[1..k].copy_from_slice(&a[1..k]);
        for j in 1..k {
            a[j] = prev[j] - kappa * prev[k - j];
        }
        a[k] = kappa;
        err *= 1.0 - kappa * kappa;
        if !(err > 0.0) || !err.is_finite() {
            return None;
        }
        log_det += err.ln();

        let mut vy = y[k];
        for j in 1..=k {
            vy -= a[j] * y[k - j];
        }
        qyy += vy * vy / err;
        if let Some(u) = u {
            let mut vu = u[k];
            for j in 1..=k {
                vu -= a[j] * u[k - j];
            }
            quu += vu * vu / err;
            qyu += vy * vu / err;
        }
    }
    Some((log_det, qyy, quu, qyu))
}

fn lml_at_jitter(
    spec: KernelSpec,
    hyper: &KernelHyperparams,
    covariates: Option<&[f64]>,
    y: &[f64],
    jitter: f64,
    scaled: &mut Vec<f64>,
) -> Option<f64> {
    let n = y.len();
    let mut col: Vec<f64> = (0..n).map(|lag| kernels::temporal_cov_raw(lag as f64, hyper)).collect();
    col[0] += hyper.noise_var + jitter;
    let u = match (spec, covariates) {
        (KernelSpec::TemporalPlusTweet, Some(x)) => {
            let s = hyper.ell_tw.sqrt();
            scaled.clear();
            scaled.extend(x.iter().map(|v| v / s));
            Some(scaled.as_slice())
        }
        _ => None,
    };
    let (mut log_det, mut quad, quu, qyu) = toeplitz_forms(&col, y, u)?;
    if u.is_some() {
        let denom = 1.0 + quu;
        log_det += denom.ln();
        quad -= qyu * qyu / denom;
    }
    let lml = -0.5 * quad - 0.5 * log_det - 0.5 * n as f64 * LN_2PI;
    lml.is_finite().then_some(lml)
}

/// Log marginal likelihood on a unit grid with the same jitter escalation as
/// the dense path. `None` when no jitter up to [`MAX_JITTER`] works.
pub(crate) fn log_marginal_likelihood_grid(
    spec: KernelSpec,
    hyper: &KernelHyperparams,
    covariates: Option<&[f64]>,
    y: &[f64],
) -> Option<f64> {
    if y.is_empty() {
        return None;
    }
    let mut scratch = Vec::new();
    let mut jitter = JITTER;
    loop {
        if let Some(v) = lml_at_jitter(spec, hyper, covariates, y, jitter, &mut scratch) {
            return Some(v);
        }
        if jitter >= MAX_JITTER {
            return None;
        }
        jitter = (jitter * 10.0).min(MAX_JITTER);
    }
}
