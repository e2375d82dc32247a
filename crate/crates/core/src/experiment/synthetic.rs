//! Synthetic city universes sampled from the temporal GP prior with a
//! log-linear tweet link.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data_model::CitySeries;
use crate::error::{Error, Result};
use crate::gp;
use crate::kernels::{self, KernelHyperparams, KernelSpec};

use super::{mix_seed, BacktestConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_cities: usize,
    pub weeks: u32,
    pub population: u64,
    pub hyper: KernelHyperparams,
    /// Slope of `log1p(tweets)` on `log1p(DIR)`.
    pub tweet_link_slope: f64,
    /// Noise on the log tweet scale. When absent it is derived from
    /// `tweet_correlation_target` and the prior variance of the latent series.
    pub tweet_noise_sd: Option<f64>,
    pub tweet_correlation_target: f64,
    /// Fixed log-scale city mean; when absent each city draws one uniformly
    /// from `[log1p(5), log1p(60)]`.
    pub base_mean: Option<f64>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_cities: 5,
            weeks: 156,
            population: 500_000,
            hyper: KernelHyperparams::reference_medians(),
            tweet_link_slope: 1.0,
            tweet_noise_sd: None,
            tweet_correlation_target: 0.9,
            base_mean: None,
            seed: 1,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_cities == 0 {
            return Err(Error::Config("n_cities must be at least 1".into()));
        }
        if self.weeks < 2 {
            return Err(Error::Config("weeks must be at least 2".into()));
        }
        if self.population == 0 {
            return Err(Error::Config("population must be positive".into()));
        }
        self.hyper.validate()?;
        if !(-1.0..=1.0).contains(&self.tweet_correlation_target) {
            return Err(Error::Config("tweet_correlation_target must lie in [-1, 1]".into()));
        }
        if self.tweet_link_slope * self.tweet_correlation_target < 0.0 {
            return Err(Error::Config(
                "tweet_link_slope and tweet_correlation_target must have the same sign".into(),
            ));
        }
        if let Some(sd) = self.tweet_noise_sd {
            if !(sd >= 0.0 && sd.is_finite()) {
                return Err(Error::Config("tweet_noise_sd must be non-negative".into()));
            }
        }
        Ok(())
    }

    /// Checks the series are long enough for `config`'s backtest.
    pub fn validate_for(&self, config: &BacktestConfig) -> Result<()> {
        self.validate()?;
        let need = config.train_only_weeks + config.beta + config.gamma_grid.iter().max().copied().unwrap_or(0) + 10;
        if self.weeks < need {
            return Err(Error::Config(format!(
                "{} synthetic weeks is too short for the backtest (need at least {need})",
                self.weeks
            )));
        }
        Ok(())
    }

    /// Standard deviation of the log tweet noise actually used.
    pub fn effective_noise_sd(&self) -> f64 {
        if let Some(sd) = self.tweet_noise_sd {
            return sd;
        }
        let rho = self.tweet_correlation_target.abs();
        if rho == 0.0 || self.tweet_link_slope == 0.0 {
            return 1.0;
        }
        let signal_sd = self.tweet_link_slope.abs()
            * (kernels::temporal_cov_raw(0.0, &self.hyper) + self.hyper.noise_var).sqrt();
        signal_sd * (1.0 / (rho * rho) - 1.0).sqrt()
    }
}

/// Draws `spec.n_cities` cities named `city_001`, `city_002`, ...
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<CitySeries>> {
    spec.validate()?;
    let times: Vec<f64> = (1..=spec.weeks).map(f64::from).collect();
    let (chol, _) = gp::factorize(&times, None, KernelSpec::TemporalOnly, &spec.hyper)?;
    let noise_sd = spec.effective_noise_sd();
    let (lo, hi) = (5f64.ln_1p(), 60f64.ln_1p());
    (0..spec.n_cities)
        .map(|i| {
            let city_id = format!("city_{:03}", i + 1);
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, &city_id, 0x5157, 0));
            let base = spec.base_mean.unwrap_or_else(|| rng.random_range(lo..hi));
            let z = DVector::from_iterator(times.len(), (0..times.len()).map(|_| rng.sample::<f64, _>(StandardNormal)));
            let latent = &chol * z;
            let cases: Vec<u64> = latent
                .iter()
                .map(|y| {
                    let dir = (y + base).exp_m1().max(0.0);
                    (dir * spec.population as f64 / crate::data_model::RATE_BASE).round() as u64
                })
                .collect();
            let tweets: Vec<u64> = latent
                .iter()
                .map(|y| {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    let log_t = (spec.tweet_link_slope * (y + base) + noise_sd * noise).max(0.0);
                    log_t.exp_m1().round() as u64
                })
                .collect();
            CitySeries::new(city_id, spec.population, cases)?.with_tweets(tweets)
        })
        .collect()
}
