//! Estimates the delayed weeks `(t - gamma, t]` of a city's log incidence from
//! its tweet covariate with the temporal-plus-tweet GP.

use serde::{Deserialize, Serialize};

use crate::data_model::CitySeries;
use crate::error::{Error, Result};
use crate::gp::{GpModel, HyperSource, OptimizerConfig, Prediction, TrainingData};
use crate::kernels::{KernelHyperparams, KernelSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NowcastResult {
    pub issue_week: u32,
    pub gamma: u32,
    /// `issue_week - gamma + 1 ..= issue_week`.
    pub estimated_weeks: Vec<u32>,
    pub estimates: Vec<Prediction>,
    /// Mean of the observed log incidence the model was centered on.
    pub city_mean: f64,
    pub hyper: KernelHyperparams,
}

impl NowcastResult {
    /// Estimated `log1p(DIR)` per delayed week, floored at zero (the log of a
    /// non-negative rate).
    pub fn log_estimates(&self) -> Vec<f64> {
        self.estimates
            .iter()
            .map(|p| p.log_mean(self.city_mean).max(0.0))
            .collect()
    }
}

/// Nowcast from log-scale inputs. `y_log` holds the observed weeks
/// `1..=issue_week - gamma`; `x_log` must cover weeks `1..=issue_week`.
pub fn nowcast_logs(
    y_log: &[f64],
    x_log: &[f64],
    issue_week: u32,
    gamma: u32,
    source: HyperSource<'_>,
) -> Result<NowcastResult> {
    if gamma == 0 {
        return Err(Error::domain("nowcast with zero delay has nothing to estimate"));
    }
    let observed = issue_week
        .checked_sub(gamma)
        .filter(|&o| o >= 1)
        .ok_or_else(|| Error::domain(format!("no observed weeks before issue week {issue_week} with delay {gamma}")))?
        as usize;
    if y_log.len() < observed {
        return Err(Error::Dimension(format!(
            "{} observed weeks, need {observed}",
            y_log.len()
        )));
    }
    if x_log.len() < issue_week as usize {
        return Err(Error::Unavailable(format!(
            "tweets cover {} weeks, nowcast at week {issue_week} needs them all",
            x_log.len()
        )));
    }
    let times: Vec<f64> = (1..=observed).map(|w| w as f64).collect();
    let data = TrainingData::from_log_values(times, &y_log[..observed], Some(x_log[..observed].to_vec()));
    let city_mean = data.city_mean;
    let model = GpModel::fit_with(data, KernelSpec::TemporalPlusTweet, source)?;
    let estimated_weeks: Vec<u32> = (observed as u32 + 1..=issue_week).collect();
    let qt: Vec<f64> = estimated_weeks.iter().map(|&w| f64::from(w)).collect();
    let qx: Vec<f64> = estimated_weeks.iter().map(|&w| x_log[w as usize - 1]).collect();
    let estimates = model.predict(&qt, Some(&qx))?;
    if estimates.iter().any(|p| !p.var_latent.is_finite()) {
        return Err(Error::domain("non-finite nowcast variance"));
    }
    Ok(NowcastResult {
        issue_week,
        gamma,
        estimated_weeks,
        estimates,
        city_mean,
        hyper: model.hyper,
    })
}

/// Nowcast the delayed weeks of `series` at `issue_week`, optimizing the
/// hyperparameters on the observed weeks.
pub fn nowcast(series: &CitySeries, issue_week: u32, gamma: u32, config: &OptimizerConfig) -> Result<NowcastResult> {
    nowcast_with(series, issue_week, gamma, HyperSource::Optimize { config, warm_start: None })
}

pub fn nowcast_with(series: &CitySeries, issue_week: u32, gamma: u32, source: HyperSource<'_>) -> Result<NowcastResult> {
    let tweets = series
        .tweets()
        .ok_or_else(|| Error::Unavailable(format!("city {} has no tweet series", series.city_id())))?;
    if issue_week as usize > series.n_weeks() {
        return Err(Error::domain(format!(
            "issue week {issue_week} beyond the {} weeks of city {}",
            series.n_weeks(),
            series.city_id()
        )));
    }
    let observed = issue_week.saturating_sub(gamma) as usize;
    let y: Vec<f64> = series.dir()[..observed].iter().map(|d| d.ln_1p()).collect();
    let x: Vec<f64> = tweets[..issue_week as usize].iter().map(|&c| (c as f64).ln_1p()).collect();
    nowcast_logs(&y, &x, issue_week, gamma, source)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixed() -> HyperSource<'static> {
        HyperSource::Fixed(KernelHyperparams { ell_tw: 2.0, ..KernelHyperparams::reference_medians() })
    }

    fn city(n: usize) -> CitySeries {
        let cases: Vec<u64> = (0..n).map(|i| 20 + ((i as f64 / 4.0).sin() * 15.0) as u64).collect();
        let tweets: Vec<u64> = cases.iter().map(|c| c / 2).collect();
        CitySeries::new("c", 100_000, cases).unwrap().with_tweets(tweets).unwrap()
    }

    #[test]
    fn covers_exactly_the_delayed_weeks() {
        let r = nowcast_with(&city(40), 30, 4, fixed()).unwrap();
        assert_eq!(r.estimated_weeks, vec![27, 28, 29, 30]);
        assert_eq!(r.estimates.len(), 4);
        assert_eq!(r.log_estimates().len(), 4);
    }

    #[test]
    fn refuses_zero_delay_and_missing_tweets() {
        assert!(nowcast_with(&city(40), 30, 0, fixed()).is_err());
        let bare = city(40).without_tweets();
        assert!(matches!(nowcast_with(&bare, 30, 2, fixed()), Err(Error::Unavailable(_))));
        assert!(nowcast_with(&city(40), 41, 2, fixed()).is_err());
        assert!(nowcast_with(&city(40), 3, 3, fixed()).is_err());
    }

    #[test]
    fn never_reads_incidence_after_the_delay() {
        let base = city(40);
        let mut cases = base.cases().to_vec();
        for c in &mut cases[26..] {
            *c += 1000;
        }
        let perturbed = CitySeries::new("c", 100_000, cases)
            .unwrap()
            .with_tweets(base.tweets().unwrap().to_vec())
            .unwrap();
        let cfg = OptimizerConfig { restarts: 2, max_evals: 60, ..Default::default() };
        let a = nowcast(&base, 30, 4, &cfg).unwrap();
        let b = nowcast(&perturbed, 30, 4, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_tweets_reduce_to_temporal_model() {
        let cases: Vec<u64> = (0..50).map(|i| 10 + (i * 7 % 23) as u64).collect();
        let series = CitySeries::new("z", 100_000, cases).unwrap().with_tweets(vec![0; 50]).unwrap();
        let cfg = OptimizerConfig { restarts: 2, max_evals: 100, ..Default::default() };
        let r = nowcast(&series, 45, 3, &cfg).unwrap();
        let y: Vec<f64> = series.dir()[..42].iter().map(|d| d.ln_1p()).collect();
        let data = TrainingData::from_log_values((1..=42).map(f64::from).collect(), &y, None);
        let temporal = GpModel::condition(data, KernelSpec::TemporalOnly, r.hyper).unwrap();
        let p = temporal.predict(&[43.0, 44.0, 45.0], None).unwrap();
        for (a, b) in r.estimates.iter().zip(&p) {
            assert!((a.mean_latent - b.mean_latent).abs() < 1e-6);
            assert!((a.var_latent - b.var_latent).abs() < 1e-6);
        }
    }
}
