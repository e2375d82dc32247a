//! Covariance functions: a Matérn-5/2 local term plus a quasi-periodic term
//! (Matérn-5/2 envelope times a periodic factor), optionally extended by a
//! linear term on the log tweet covariate.

use std::f64::consts::PI;
use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Diagonal jitter added to every Gram matrix before factorization.
pub const JITTER: f64 = 1e-8;

const SQRT5: f64 = 2.236_067_977_499_79;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelSpec {
    /// Local Matérn plus quasi-periodic seasonality.
    TemporalOnly,
    /// As `TemporalOnly` plus `x * x' / ell_tw` on the tweet covariate.
    TemporalPlusTweet,
}

impl KernelSpec {
    pub fn uses_covariate(self) -> bool {
        matches!(self, Self::TemporalPlusTweet)
    }

    /// Number of free hyperparameters the optimizer searches over.
    pub fn n_params(self) -> usize {
        match self {
            Self::TemporalOnly => 7,
            Self::TemporalPlusTweet => 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelHyperparams {
    pub sigma2_loc: f64,
    pub ell_loc: f64,
    pub sigma2_qp: f64,
    pub ell_qp: f64,
    pub ell_per: f64,
    pub period_p: f64,
    /// Scale of the tweet term; ignored by [`KernelSpec::TemporalOnly`].
    pub ell_tw: f64,
    pub noise_var: f64,
}

/// Natural-log box constraints used by the optimizer, in the order of
/// [`KernelHyperparams::to_log_vec`].
const VARIANCE_BOUNDS: (f64, f64) = (1e-4, 1e2);
const LENGTH_BOUNDS: (f64, f64) = (0.5, 300.0);
const PERIOD_BOUNDS: (f64, f64) = (20.0, 120.0);
const TWEET_BOUNDS: (f64, f64) = (1e-3, 1e3);

pub const KEYS: [&str; 8] = [
    "sigma2_loc",
    "ell_loc",
    "sigma2_qp",
    "ell_qp",
    "ell_per",
    "period_p",
    "ell_tw",
    "noise_var",
];

impl KernelHyperparams {
    /// Median per-city hyperparameters reported for the Brazilian fits, with a
    /// small observation noise and unit tweet scale.
    pub fn reference_medians() -> Self {
        Self {
            sigma2_loc: 0.101,
            ell_loc: 2.0,
            sigma2_qp: 1.427,
            ell_qp: 58.0,
            ell_per: 1.0,
            period_p: 59.0,
            ell_tw: 1.0,
            noise_var: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("sigma2_loc", self.sigma2_loc),
            ("ell_loc", self.ell_loc),
            ("sigma2_qp", self.sigma2_qp),
            ("ell_qp", self.ell_qp),
            ("ell_per", self.ell_per),
            ("period_p", self.period_p),
            ("ell_tw", self.ell_tw),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::domain(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if !(self.noise_var >= 0.0 && self.noise_var.is_finite()) {
            return Err(Error::domain(format!("noise_var must be non-negative, got {}", self.noise_var)));
        }
        Ok(())
    }

    fn natural(&self) -> [f64; 8] {
        [
            self.sigma2_loc,
            self.ell_loc,
            self.sigma2_qp,
            self.ell_qp,
            self.ell_per,
            self.period_p,
            self.noise_var,
            self.ell_tw,
        ]
    }

    /// Natural-log coordinates; the tweet scale is appended only for
    /// [`KernelSpec::TemporalPlusTweet`].
    pub fn to_log_vec(&self, spec: KernelSpec) -> Vec<f64> {
        self.natural()[..spec.n_params()].iter().map(|v| v.ln()).collect()
    }

    /// Inverse of [`to_log_vec`](Self::to_log_vec). Parameters `spec` does
    /// not use are taken from `base`.
    pub fn from_log_vec(spec: KernelSpec, v: &[f64], base: &Self) -> Self {
        debug_assert_eq!(v.len(), spec.n_params());
        let e = |i: usize| v[i].exp();
        Self {
            sigma2_loc: e(0),
            ell_loc: e(1),
            sigma2_qp: e(2),
            ell_qp: e(3),
            ell_per: e(4),
            period_p: e(5),
            noise_var: e(6),
            ell_tw: if spec.uses_covariate() { e(7) } else { base.ell_tw },
        }
    }

    /// Box constraints in natural-log space.
    pub fn log_bounds(spec: KernelSpec) -> Vec<(f64, f64)> {
        let all = [
            VARIANCE_BOUNDS,
            LENGTH_BOUNDS,
            VARIANCE_BOUNDS,
            LENGTH_BOUNDS,
            LENGTH_BOUNDS,
            PERIOD_BOUNDS,
            VARIANCE_BOUNDS,
            TWEET_BOUNDS,
        ];
        all[..spec.n_params()].iter().map(|(lo, hi)| (lo.ln(), hi.ln())).collect()
    }

    /// Flat `key = value` block, one key per line in a fixed order.
    pub fn to_text(&self) -> String {
        let v = [
            self.sigma2_loc,
            self.ell_loc,
            self.sigma2_qp,
            self.ell_qp,
            self.ell_per,
            self.period_p,
            self.ell_tw,
            self.noise_var,
        ];
        KEYS.iter().zip(v).map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut values: [Option<f64>; 8] = [None; 8];
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            let key = key.trim();
            let idx = KEYS
                .iter()
                .position(|k| *k == key)
                .ok_or_else(|| Error::Config(format!("line {}: unknown key `{key}`", lineno + 1)))?;
            if values[idx].is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", lineno + 1)));
            }
            let parsed: f64 = value
                .trim()
                .parse()
                .map_err(|e| Error::Config(format!("line {}: `{key}`: {e}", lineno + 1)))?;
            values[idx] = Some(parsed);
        }
        let get = |i: usize| values[i].ok_or_else(|| Error::Config(format!("missing key `{}`", KEYS[i])));
        let h = Self {
            sigma2_loc: get(0)?,
            ell_loc: get(1)?,
            sigma2_qp: get(2)?,
            ell_qp: get(3)?,
            ell_per: get(4)?,
            period_p: get(5)?,
            ell_tw: get(6)?,
            noise_var: get(7)?,
        };
        h.validate()?;
        Ok(h)
    }
}

impl fmt::Display for KernelHyperparams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(format!("{name} must be positive, got {v}")))
    }
}

#[inline]
pub(crate) fn matern52_raw(tau: f64, sigma2: f64, ell: f64) -> f64 {
    let r = SQRT5 * tau.abs() / ell;
    sigma2 * (1.0 + r + r * r / 3.0) * (-r).exp()
}

#[inline]
pub(crate) fn quasi_periodic_raw(tau: f64, sigma2: f64, ell_qp: f64, ell_per: f64, period: f64) -> f64 {
    let s = (PI * tau.abs() / period).sin();
    matern52_raw(tau, sigma2, ell_qp) * (-2.0 * s * s / ell_per).exp()
}

#[inline]
pub(crate) fn temporal_cov_raw(tau: f64, h: &KernelHyperparams) -> f64 {
    matern52_raw(tau, h.sigma2_loc, h.ell_loc)
        + quasi_periodic_raw(tau, h.sigma2_qp, h.ell_qp, h.ell_per, h.period_p)
}

/// Matérn-5/2: `sigma2 (1 + r + r²/3) exp(-r)` with `r = √5|τ|/ℓ`.
pub fn matern52(tau: f64, sigma2: f64, ell: f64) -> Result<f64> {
    check_positive("sigma2", sigma2)?;
    check_positive("ell", ell)?;
    Ok(matern52_raw(tau, sigma2, ell))
}

/// Matérn-5/2 envelope times `exp(-2 sin²(π|τ|/p) / ell_per)`.
pub fn quasi_periodic(tau: f64, sigma2: f64, ell_qp: f64, ell_per: f64, period_p: f64) -> Result<f64> {
    check_positive("sigma2", sigma2)?;
    check_positive("ell_qp", ell_qp)?;
    check_positive("ell_per", ell_per)?;
    check_positive("period_p", period_p)?;
    Ok(quasi_periodic_raw(tau, sigma2, ell_qp, ell_per, period_p))
}

pub fn temporal_cov(tau: f64, hyper: &KernelHyperparams) -> Result<f64> {
    hyper.validate()?;
    Ok(temporal_cov_raw(tau, hyper))
}

pub fn tweet_term(x1: f64, x2: f64, ell_tw: f64) -> Result<f64> {
    check_positive("ell_tw", ell_tw)?;
    Ok(x1 * x2 / ell_tw)
}

/// Covariance between two inputs under `spec`, without noise.
#[inline]
pub(crate) fn cross_cov(
    spec: KernelSpec,
    hyper: &KernelHyperparams,
    t1: f64,
    t2: f64,
    x1: f64,
    x2: f64,
) -> f64 {
    let k = temporal_cov_raw(t1 - t2, hyper);
    match spec {
        KernelSpec::TemporalOnly => k,
        KernelSpec::TemporalPlusTweet => k + x1 * x2 / hyper.ell_tw,
    }
}

pub(crate) fn check_covariates(spec: KernelSpec, n: usize, covariates: Option<&[f64]>) -> Result<()> {
    match (spec, covariates) {
        (KernelSpec::TemporalOnly, None) => Ok(()),
        (KernelSpec::TemporalOnly, Some(_)) => Err(Error::Dimension(
            "covariates supplied for a temporal-only kernel".into(),
        )),
        (KernelSpec::TemporalPlusTweet, None) => Err(Error::Dimension(
            "tweet kernel requires a covariate vector".into(),
        )),
        (KernelSpec::TemporalPlusTweet, Some(x)) if x.len() != n => Err(Error::Dimension(format!(
            "{} covariates for {n} inputs",
            x.len()
        ))),
        _ => Ok(()),
    }
}

/// Temporal covariance per integer lag `0..len` when every time is an
/// integer, so Gram construction needs one kernel evaluation per lag.
fn integer_lag_table(times: &[f64], hyper: &KernelHyperparams) -> Option<Vec<f64>> {
    if times.iter().any(|t| t.fract() != 0.0 || !t.is_finite()) {
        return None;
    }
    let (lo, hi) = times
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &t| (lo.min(t), hi.max(t)));
    let span = (hi - lo) as usize;
    if span > 4 * times.len().max(64) {
        return None;
    }
    Some((0..=span).map(|lag| temporal_cov_raw(lag as f64, hyper)).collect())
}

/// Gram matrix with `noise_var + JITTER` on the diagonal.
pub fn gram(
    times: &[f64],
    covariates: Option<&[f64]>,
    spec: KernelSpec,
    hyper: &KernelHyperparams,
) -> Result<DMatrix<f64>> {
    gram_with_jitter(times, covariates, spec, hyper, JITTER)
}

pub fn gram_with_jitter(
    times: &[f64],
    covariates: Option<&[f64]>,
    spec: KernelSpec,
    hyper: &KernelHyperparams,
    jitter: f64,
) -> Result<DMatrix<f64>> {
    hyper.validate()?;
    let n = times.len();
    check_covariates(spec, n, covariates)?;
    let lags = integer_lag_table(times, hyper);
    let mut k = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in j..n {
            let tau = times[i] - times[j];
            let mut v = match &lags {
                Some(table) => table[tau.abs() as usize],
                None => temporal_cov_raw(tau, hyper),
            };
            if let Some(x) = covariates {
                v += x[i] * x[j] / hyper.ell_tw;
            }
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
        k[(j, j)] += hyper.noise_var + jitter;
    }
    Ok(k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn medians() -> KernelHyperparams {
        KernelHyperparams::reference_medians()
    }

    #[test]
    fn matern_examples() {
        assert_eq!(matern52(0.0, 1.0, 5.0).unwrap(), 1.0);
        // high-precision evaluation of the closed form
        let v = matern52(2.0, 0.101, 2.0).unwrap();
        assert!((v - 0.052_923_404_992_013_85).abs() < 1e-15, "{v}");
        assert!(matern52(1.0, 0.0, 1.0).is_err());
        assert!(matern52(1.0, 1.0, -1.0).is_err());
    }

    #[test]
    fn quasi_periodic_examples() {
        assert_eq!(quasi_periodic(0.0, 2.0, 58.0, 1.0, 59.0).unwrap(), 2.0);
        let h = medians();
        let at_p = quasi_periodic(59.0, h.sigma2_qp, h.ell_qp, h.ell_per, 59.0).unwrap();
        let env = matern52(59.0, h.sigma2_qp, h.ell_qp).unwrap();
        assert!((at_p - env).abs() <= 1e-15 * env);
        let k52 = quasi_periodic(52.0, h.sigma2_qp, h.ell_qp, h.ell_per, h.period_p).unwrap();
        let k26 = quasi_periodic(26.0, h.sigma2_qp, h.ell_qp, h.ell_per, h.period_p).unwrap();
        // independent high-precision values
        assert!((k52 - 0.640_498_460_479_426_5).abs() < 1e-12, "{k52}");
        assert!((k26 - 0.177_436_360_132_867_8).abs() < 1e-12, "{k26}");
        assert!(k52 > k26);
        assert!(quasi_periodic(1.0, 1.0, 1.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn temporal_cov_at_zero() {
        let h = medians();
        assert!((temporal_cov(0.0, &h).unwrap() - 1.528).abs() < 1e-12);
    }

    #[test]
    fn tweet_term_examples() {
        assert_eq!(tweet_term(0.0, 123.0, 2.0).unwrap(), 0.0);
        assert_eq!(tweet_term(2.0, 3.0, 2.0).unwrap(), 3.0);
        assert!(tweet_term(1.0, 1.0, 0.0).is_err());
        let (a, x1, x2) = (1.7, 0.3, 2.2);
        assert!((tweet_term(a * x1, x2, 1.3).unwrap() - a * tweet_term(x1, x2, 1.3).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn gram_single_point() {
        let h = medians();
        let k = gram(&[1.0], None, KernelSpec::TemporalOnly, &h).unwrap();
        assert_eq!(k[(0, 0)], 1.528 + h.noise_var + JITTER);
    }

    #[test]
    fn gram_checks_covariates() {
        let h = medians();
        assert!(gram(&[1.0, 2.0], None, KernelSpec::TemporalPlusTweet, &h).is_err());
        assert!(gram(&[1.0, 2.0], Some(&[1.0]), KernelSpec::TemporalPlusTweet, &h).is_err());
        assert!(gram(&[1.0, 2.0], Some(&[1.0, 2.0]), KernelSpec::TemporalOnly, &h).is_err());
    }

    #[test]
    fn lag_table_matches_direct_evaluation() {
        let h = medians();
        let times: Vec<f64> = (1..=40).map(f64::from).collect();
        let fast = gram(&times, None, KernelSpec::TemporalOnly, &h).unwrap();
        let shifted: Vec<f64> = times.iter().map(|t| t + 0.5).collect();
        let direct = gram(&shifted, None, KernelSpec::TemporalOnly, &h).unwrap();
        assert!((fast - direct).amax() < 1e-14);
    }

    #[test]
    fn hyper_text_roundtrip() {
        let h = KernelHyperparams { ell_tw: 3.25, noise_var: 1e-8, ..medians() };
        let text = h.to_text();
        assert!(text.starts_with("sigma2_loc = 0.101\n"));
        assert_eq!(KernelHyperparams::from_text(&text).unwrap(), h);
        assert!(KernelHyperparams::from_text("sigma2_loc = 1\n").is_err());
        let bad = format!("{text}bogus = 1\n");
        assert!(KernelHyperparams::from_text(&bad).unwrap_err().to_string().contains("bogus"));
    }

    #[test]
    fn log_vec_roundtrip() {
        let h = KernelHyperparams { ell_tw: 7.5, ..medians() };
        for spec in [KernelSpec::TemporalOnly, KernelSpec::TemporalPlusTweet] {
            let back = KernelHyperparams::from_log_vec(spec, &h.to_log_vec(spec), &h);
            for (a, b) in back.natural().iter().zip(h.natural()) {
                assert!((a - b).abs() <= 1e-12 * b);
            }
        }
    }

    fn min_eigenvalue(m: DMatrix<f64>) -> f64 {
        m.symmetric_eigen().eigenvalues.min()
    }

    #[test]
    fn random_gram_is_psd_and_symmetric() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let h = medians();
        for _ in 0..20 {
            let times: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..300.0)).collect();
            let k = gram_with_jitter(&times, None, KernelSpec::TemporalOnly, &KernelHyperparams { noise_var: 0.0, ..h }, 0.0)
                .unwrap();
            assert_eq!(k, k.transpose());
            assert!(min_eigenvalue(k) >= -1e-8);
        }
    }

    proptest! {
        #[test]
        fn matern_symmetric(tau in -300.0f64..300.0, s in 1e-3f64..10.0, l in 0.5f64..300.0) {
            prop_assert_eq!(matern52(tau, s, l).unwrap(), matern52(-tau, s, l).unwrap());
        }

        #[test]
        fn matern_strictly_decreasing(a in 0.01f64..200.0, b in 0.01f64..200.0, l in 0.5f64..300.0) {
            prop_assume!((a - b).abs() > 1e-6);
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let (klo, khi) = (matern52(lo, 1.0, l).unwrap(), matern52(hi, 1.0, l).unwrap());
            // Below double precision the tail underflows to 0 for both.
            prop_assert!(klo > khi || (klo < 1e-300 && khi < 1e-300));
        }

        #[test]
        fn temporal_cov_peaks_at_zero(tau in -500.0f64..500.0) {
            let h = medians();
            prop_assert!(temporal_cov(0.0, &h).unwrap() >= temporal_cov(tau, &h).unwrap().abs());
            prop_assert_eq!(temporal_cov(tau, &h).unwrap(), temporal_cov(-tau, &h).unwrap());
        }

        #[test]
        fn quasi_periodic_envelope_decays(tau in 0.0f64..300.0, p in 20.0f64..120.0, lq in 0.5f64..300.0, lp in 0.5f64..10.0) {
            let a = quasi_periodic(tau, 1.0, lq, lp, p).unwrap();
            let b = quasi_periodic(tau + p, 1.0, lq, lp, p).unwrap();
            prop_assert!(b <= a * (1.0 + 1e-12));
        }

        #[test]
        fn tweet_term_adds_psd(seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(2..10);
            let times: Vec<f64> = (0..n).map(|i| i as f64 * 3.0 + rng.random_range(0.0..2.0)).collect();
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..6.0)).collect();
            let h = KernelHyperparams { ell_tw: rng.random_range(0.01..100.0), ..medians() };
            let with = gram(&times, Some(&x), KernelSpec::TemporalPlusTweet, &h).unwrap();
            let without = gram(&times, None, KernelSpec::TemporalOnly, &h).unwrap();
            prop_assert!(min_eigenvalue(with - without) >= -1e-8);
        }
    }
}
