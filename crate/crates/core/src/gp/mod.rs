//! Exact zero-mean Gaussian-process regression on the centered log scale.

mod levinson;
mod optimize;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data_model::{self, TransformedSeries};
use crate::error::{Error, Result};
use crate::kernels::{self, KernelHyperparams, KernelSpec, JITTER};

pub use optimize::{optimize_hyperparameters, OptimizationOutcome, OptimizerConfig};

/// Largest diagonal jitter tried before giving up on a factorization.
pub const MAX_JITTER: f64 = 1e-4;

/// Two-sided 95% standard-normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Training inputs for one city: times, centered log targets and, for the
/// tweet kernel, the log tweet covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingData {
    pub times: Vec<f64>,
    pub y_centered: Vec<f64>,
    pub covariates: Option<Vec<f64>>,
    pub city_mean: f64,
}

impl TrainingData {
    /// Centers `y_raw` on its own mean.
    pub fn from_log_values(times: Vec<f64>, y_raw: &[f64], covariates: Option<Vec<f64>>) -> Self {
        let city_mean = if y_raw.is_empty() { 0.0 } else { data_model::mean(y_raw) };
        Self {
            times,
            y_centered: y_raw.iter().map(|y| y - city_mean).collect(),
            covariates,
            city_mean,
        }
    }

    /// Weeks `1..=training_horizon` of a transformed series. The tweet
    /// covariate is attached only when `spec` uses it.
    pub fn from_series(series: &TransformedSeries, spec: KernelSpec) -> Result<Self> {
        let n = series.training_horizon as usize;
        let covariates = match spec {
            KernelSpec::TemporalOnly => None,
            KernelSpec::TemporalPlusTweet => Some(
                series
                    .x_tweets
                    .as_ref()
                    .ok_or_else(|| Error::Unavailable("series has no tweet covariate".into()))?[..n]
                    .to_vec(),
            ),
        };
        Ok(Self {
            times: (1..=n).map(|w| w as f64).collect(),
            y_centered: series.y_centered[..n].to_vec(),
            covariates,
            city_mean: series.mean,
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    fn check(&self, spec: KernelSpec) -> Result<()> {
        if self.y_centered.len() != self.times.len() {
            return Err(Error::Dimension(format!(
                "{} targets for {} times",
                self.y_centered.len(),
                self.times.len()
            )));
        }
        kernels::check_covariates(spec, self.times.len(), self.covariates.as_deref())
    }
}

/// Posterior summary at one query point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub mean_latent: f64,
    pub var_latent: f64,
    pub mean_dir: f64,
    pub interval95_dir: (f64, f64),
}

impl Prediction {
    /// DIR-scale summaries are `expm1` of the latent quantities shifted by the
    /// city mean, clamped at zero. The point estimate is the log-normal median.
    pub fn from_latent(mean_latent: f64, var_latent: f64, city_mean: f64) -> Self {
        let var_latent = var_latent.max(0.0);
        let m = mean_latent + city_mean;
        let half = Z95 * var_latent.sqrt();
        Self {
            mean_latent,
            var_latent,
            mean_dir: m.exp_m1().max(0.0),
            interval95_dir: ((m - half).exp_m1().max(0.0), (m + half).exp_m1().max(0.0)),
        }
    }

    /// Log-scale predictive mean including the city mean.
    pub fn log_mean(&self, city_mean: f64) -> f64 {
        self.mean_latent + city_mean
    }
}

/// Lower Cholesky factor of `K + (noise + jitter) I`, escalating the jitter
/// tenfold up to [`MAX_JITTER`].
pub(crate) fn factorize(
    times: &[f64],
    covariates: Option<&[f64]>,
    spec: KernelSpec,
    hyper: &KernelHyperparams,
) -> Result<(DMatrix<f64>, f64)> {
    let base = kernels::gram_with_jitter(times, covariates, spec, hyper, 0.0)?;
    let mut jitter = JITTER;
    loop {
        let mut k = base.clone();
        for i in 0..k.nrows() {
            k[(i, i)] += jitter;
        }
        if let Some(chol) = nalgebra::Cholesky::new(k) {
            let l = chol.unpack();
            if l.iter().all(|v| v.is_finite()) {
                return Ok((l, jitter));
            }
        }
        if jitter >= MAX_JITTER {
            return Err(Error::NotPositiveDefinite { jitter });
        }
        jitter = (jitter * 10.0).min(MAX_JITTER);
    }
}

fn solve_with_factor(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let z = l.solve_lower_triangular(b).expect("factor has a positive diagonal");
    l.tr_solve_lower_triangular(&z).expect("factor has a positive diagonal")
}

/// `-½ yᵀK⁻¹y - ½ log|K| - (n/2) log 2π` through a dense Cholesky factor.
pub fn log_marginal_likelihood(
    hyper: &KernelHyperparams,
    spec: KernelSpec,
    times: &[f64],
    covariates: Option<&[f64]>,
    y_centered: &[f64],
) -> Result<f64> {
    if times.is_empty() {
        return Err(Error::domain("log marginal likelihood needs at least one training point"));
    }
    if y_centered.len() != times.len() {
        return Err(Error::Dimension(format!("{} targets for {} times", y_centered.len(), times.len())));
    }
    let (l, _) = factorize(times, covariates, spec, hyper)?;
    let y = DVector::from_column_slice(y_centered);
    let z = l.solve_lower_triangular(&y).expect("factor has a positive diagonal");
    let log_det: f64 = 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Ok(-0.5 * z.norm_squared() - 0.5 * log_det - 0.5 * times.len() as f64 * LN_2PI)
}

/// A conditioned GP for one city.
#[derive(Debug, Clone, PartialEq)]
pub struct GpModel {
    pub spec: KernelSpec,
    pub hyper: KernelHyperparams,
    pub data: TrainingData,
    /// Jitter that made the training Gram factorizable.
    pub jitter: f64,
    chol_lower: DMatrix<f64>,
    alpha: DVector<f64>,
}

const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelBlob {
    version: u32,
    spec: KernelSpec,
    hyper: KernelHyperparams,
    data: TrainingData,
    jitter: f64,
    /// Column-major `n × n` lower factor.
    chol_lower: Vec<f64>,
    alpha: Vec<f64>,
}

impl GpModel {
    /// Factorizes the training Gram at fixed hyperparameters.
    pub fn condition(data: TrainingData, spec: KernelSpec, hyper: KernelHyperparams) -> Result<Self> {
        data.check(spec)?;
        hyper.validate()?;
        let (chol_lower, jitter) = if data.is_empty() {
            (DMatrix::zeros(0, 0), JITTER)
        } else {
            factorize(&data.times, data.covariates.as_deref(), spec, &hyper)?
        };
        let alpha = if data.is_empty() {
            DVector::zeros(0)
        } else {
            solve_with_factor(&chol_lower, &DVector::from_column_slice(&data.y_centered))
        };
        Ok(Self {
            spec,
            hyper,
            data,
            jitter,
            chol_lower,
            alpha,
        })
    }

    /// Optimizes hyperparameters (optionally also from `warm_start`) and
    /// conditions on the result.
    pub fn fit_data(
        data: TrainingData,
        spec: KernelSpec,
        config: &OptimizerConfig,
        warm_start: Option<&KernelHyperparams>,
    ) -> Result<Self> {
        data.check(spec)?;
        let outcome = optimize_hyperparameters(
            spec,
            &data.times,
            data.covariates.as_deref(),
            &data.y_centered,
            config,
            warm_start,
        )?;
        Self::condition(data, spec, outcome.hyper)
    }

    pub fn chol_lower(&self) -> &DMatrix<f64> {
        &self.chol_lower
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    pub fn city_mean(&self) -> f64 {
        self.data.city_mean
    }

    /// Prior variance of a new observation: kernel at zero lag plus noise.
    fn prior_var(&self, x: f64) -> f64 {
        kernels::cross_cov(self.spec, &self.hyper, 0.0, 0.0, x, x) + self.hyper.noise_var
    }

    pub fn predict(&self, query_times: &[f64], query_covariates: Option<&[f64]>) -> Result<Vec<Prediction>> {
        kernels::check_covariates(self.spec, query_times.len(), query_covariates)?;
        let n = self.data.len();
        let train_x = self.data.covariates.as_deref();
        query_times
            .iter()
            .enumerate()
            .map(|(q, &tq)| {
                let xq = query_covariates.map_or(0.0, |x| x[q]);
                if n == 0 {
                    return Ok(Prediction::from_latent(0.0, self.prior_var(xq), self.data.city_mean));
                }
                let kstar = DVector::from_iterator(
                    n,
                    (0..n).map(|i| {
                        kernels::cross_cov(
                            self.spec,
                            &self.hyper,
                            tq,
                            self.data.times[i],
                            xq,
                            train_x.map_or(0.0, |x| x[i]),
                        )
                    }),
                );
                let mean = kstar.dot(&self.alpha);
                let v = self
                    .chol_lower
                    .solve_lower_triangular(&kstar)
                    .ok_or_else(|| Error::NotPositiveDefinite { jitter: self.jitter })?;
                let var = (self.prior_var(xq) - v.norm_squared()).max(0.0);
                Ok(Prediction::from_latent(mean, var, self.data.city_mean))
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let blob = ModelBlob {
            version: MODEL_FORMAT_VERSION,
            spec: self.spec,
            hyper: self.hyper,
            data: self.data.clone(),
            jitter: self.jitter,
            chol_lower: self.chol_lower.as_slice().to_vec(),
            alpha: self.alpha.as_slice().to_vec(),
        };
        Ok(serde_json::to_string(&blob)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let blob: ModelBlob = serde_json::from_str(text)?;
        if blob.version != MODEL_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported model format version {} (expected {MODEL_FORMAT_VERSION})",
                blob.version
            )));
        }
        let n = blob.data.len();
        blob.data.check(blob.spec)?;
        if blob.chol_lower.len() != n * n || blob.alpha.len() != n {
            return Err(Error::Dimension("model blob factor does not match its training data".into()));
        }
        Ok(Self {
            spec: blob.spec,
            hyper: blob.hyper,
            data: blob.data,
            jitter: blob.jitter,
            chol_lower: DMatrix::from_vec(n, n, blob.chol_lower),
            alpha: DVector::from_vec(blob.alpha),
        })
    }
}

/// Where a fit gets its hyperparameters from.
#[derive(Debug, Clone, Copy)]
pub enum HyperSource<'a> {
    Optimize {
        config: &'a OptimizerConfig,
        warm_start: Option<&'a KernelHyperparams>,
    },
    Fixed(KernelHyperparams),
}

impl GpModel {
    pub fn fit_with(data: TrainingData, spec: KernelSpec, source: HyperSource<'_>) -> Result<Self> {
        match source {
            HyperSource::Optimize { config, warm_start } => Self::fit_data(data, spec, config, warm_start),
            HyperSource::Fixed(h) => Self::condition(data, spec, h),
        }
    }
}

/// Fits the model on weeks `1..=training_horizon` of `series`.
pub fn fit(series: &TransformedSeries, spec: KernelSpec, config: &OptimizerConfig) -> Result<GpModel> {
    GpModel::fit_data(TrainingData::from_series(series, spec)?, spec, config, None)
}

pub fn predict(model: &GpModel, query_times: &[f64], query_covariates: Option<&[f64]>) -> Result<Vec<Prediction>> {
    model.predict(query_times, query_covariates)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn medians() -> KernelHyperparams {
        KernelHyperparams::reference_medians()
    }

    #[test]
    fn scalar_lml_matches_gaussian_density() {
        let h = KernelHyperparams { noise_var: 0.2, ..medians() };
        let v = 1.528 + 0.2 + JITTER;
        let a = 0.7;
        let lml = log_marginal_likelihood(&h, KernelSpec::TemporalOnly, &[3.0], None, &[a]).unwrap();
        let expected = -a * a / (2.0 * v) - 0.5 * v.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((lml - expected).abs() < 1e-14);
    }

    #[test]
    fn lml_is_deterministic() {
        let times: Vec<f64> = (1..=30).map(f64::from).collect();
        let y: Vec<f64> = times.iter().map(|t| (t / 5.0).sin()).collect();
        let a = log_marginal_likelihood(&medians(), KernelSpec::TemporalOnly, &times, None, &y).unwrap();
        let b = log_marginal_likelihood(&medians(), KernelSpec::TemporalOnly, &times, None, &y).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn lml_rejects_empty_input() {
        assert!(log_marginal_likelihood(&medians(), KernelSpec::TemporalOnly, &[], None, &[]).is_err());
    }

    #[test]
    fn factor_reconstructs_gram_and_alpha_solves() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let times: Vec<f64> = (1..=25).map(f64::from).collect();
        let y: Vec<f64> = (0..25).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..25).map(|_| rng.random_range(0.0..4.0)).collect();
        let data = TrainingData { times: times.clone(), y_centered: y.clone(), covariates: Some(x.clone()), city_mean: 1.0 };
        let h = KernelHyperparams { ell_tw: 3.0, ..medians() };
        let m = GpModel::condition(data, KernelSpec::TemporalPlusTweet, h).unwrap();
        let k = kernels::gram_with_jitter(&times, Some(&x), KernelSpec::TemporalPlusTweet, &h, m.jitter).unwrap();
        let l = m.chol_lower();
        assert!((l * l.transpose() - &k).amax() < 1e-8);
        let resid = &k * m.alpha() - DVector::from_vec(y.clone());
        assert!(resid.norm() <= 1e-6 * DVector::from_vec(y).norm());
    }

    #[test]
    fn noiseless_gp_interpolates() {
        let times: Vec<f64> = (1..=12).map(f64::from).collect();
        let y: Vec<f64> = times.iter().map(|t| (t / 3.0).cos()).collect();
        let h = KernelHyperparams { noise_var: 0.0, ..medians() };
        let m = GpModel::condition(TrainingData { times, y_centered: y.clone(), covariates: None, city_mean: 0.0 }, KernelSpec::TemporalOnly, h)
            .unwrap();
        let p = m.predict(&[5.0], None).unwrap();
        assert!((p[0].mean_latent - y[4]).abs() < 1e-6);
    }

    #[test]
    fn empty_training_set_returns_prior() {
        let h = medians();
        let m = GpModel::condition(TrainingData::from_log_values(vec![], &[], None), KernelSpec::TemporalOnly, h).unwrap();
        let p = m.predict(&[10.0], None).unwrap();
        assert_eq!(p[0].mean_latent, 0.0);
        assert!((p[0].var_latent - (1.528 + h.noise_var)).abs() < 1e-12);
    }

    #[test]
    fn predict_checks_covariates() {
        let data = TrainingData { times: vec![1.0, 2.0], y_centered: vec![0.1, -0.1], covariates: Some(vec![1.0, 2.0]), city_mean: 0.0 };
        let m = GpModel::condition(data, KernelSpec::TemporalPlusTweet, medians()).unwrap();
        assert!(m.predict(&[3.0], None).is_err());
        assert!(m.predict(&[3.0, 4.0], Some(&[1.0])).is_err());
        assert!(m.predict(&[3.0], Some(&[1.0])).is_ok());
    }

    #[test]
    fn clamping_contract() {
        let p = Prediction::from_latent(-5.0, 4.0, 0.0);
        assert_eq!(p.mean_dir, 0.0);
        assert_eq!(p.interval95_dir.0, 0.0);
        assert!(p.interval95_dir.1 >= p.mean_dir);
        let q = Prediction::from_latent(0.3, 0.2, 2.0);
        assert!(q.interval95_dir.0 <= q.mean_dir && q.mean_dir <= q.interval95_dir.1);
    }

    #[test]
    fn model_json_roundtrip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let times: Vec<f64> = (1..=15).map(f64::from).collect();
        let y: Vec<f64> = (0..15).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m = GpModel::condition(TrainingData::from_log_values(times, &y, None), KernelSpec::TemporalOnly, medians()).unwrap();
        let back = GpModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
        let p1 = m.predict(&[16.0, 20.0], None).unwrap();
        let p2 = back.predict(&[16.0, 20.0], None).unwrap();
        assert_eq!(p1, p2);
        let bumped = m.to_json().unwrap().replace("\"version\":1", "\"version\":99");
        assert!(GpModel::from_json(&bumped).is_err());
    }

    #[test]
    fn posterior_variance_bounded_and_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let h = medians();
        for _ in 0..50 {
            let n = rng.random_range(1..12);
            let mut times: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..150.0)).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let q = rng.random_range(0.0..160.0);
            let m = GpModel::condition(TrainingData::from_log_values(times.clone(), &y, None), KernelSpec::TemporalOnly, h).unwrap();
            let v1 = m.predict(&[q], None).unwrap()[0].var_latent;
            assert!(v1 <= 1.528 + h.noise_var + 1e-9);
            times.push(rng.random_range(0.0..150.0));
            let mut y2 = y.clone();
            y2.push(0.3);
            let m2 = GpModel::condition(TrainingData::from_log_values(times, &y2, None), KernelSpec::TemporalOnly, h).unwrap();
            let v2 = m2.predict(&[q], None).unwrap()[0].var_latent;
            assert!(v2 <= v1 + 1e-9, "{v2} > {v1}");
        }
    }

    #[test]
    fn prediction_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = medians();
        let times: Vec<f64> = (0..10).map(|_| rng.random_range(0.0..100.0)).collect();
        let y: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut idx: Vec<usize> = (0..10).collect();
        idx.reverse();
        idx.swap(2, 7);
        let t2: Vec<f64> = idx.iter().map(|&i| times[i]).collect();
        let y2: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
        let a = GpModel::condition(TrainingData::from_log_values(times, &y, None), KernelSpec::TemporalOnly, h).unwrap();
        let b = GpModel::condition(TrainingData::from_log_values(t2, &y2, None), KernelSpec::TemporalOnly, h).unwrap();
        let q = [3.0, 55.5, 120.0];
        for (pa, pb) in a.predict(&q, None).unwrap().iter().zip(b.predict(&q, None).unwrap()) {
            assert!((pa.mean_latent - pb.mean_latent).abs() < 1e-9);
            assert!((pa.var_latent - pb.var_latent).abs() < 1e-9);
        }
    }
}
