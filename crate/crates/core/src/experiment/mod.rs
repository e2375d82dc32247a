//! Rolling-origin backtest of the tweet-augmented framework against the
//! increased-antecedence baseline over a universe of cities.

mod report;
mod synthetic;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data_model::{filter_cities, incidence_level, CitySeries, IncidenceLevel};
use crate::error::{Error, Result};
use crate::evaluation::{mean_ci95, mean_level_auc, wilcoxon_signed_rank, bonferroni};
use crate::forecaster::{level_probabilities, PredictionRecord, ScoreMode, Strategy};
use crate::gate::{self, GateDecision, Verdict};
use crate::gp::{GpModel, HyperSource, OptimizerConfig, TrainingData};
use crate::kernels::{KernelHyperparams, KernelSpec};
use crate::nowcaster::{nowcast_with, NowcastResult};
use crate::par;

pub use report::{
    parse_report_json, plot_data, report_json, write_city_csv, write_predictions_csv, PlotKind, ReportGrid,
};
pub use synthetic::{generate_synthetic, SyntheticSpec};

const KIND_FORECAST: u64 = 1;
const KIND_NOWCAST: u64 = 2;

/// Seed for one optimization, a function of the run seed, the city, the model
/// kind and the week only. Both strategies therefore draw the same restarts
/// for the same training set.
pub(crate) fn mix_seed(seed: u64, city_id: &str, kind: u64, week: u32) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in city_id.bytes() {
        h = (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed
        ^ h.rotate_left(17)
        ^ kind.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ u64::from(week).wrapping_mul(0xd1b5_4a32_d192_ed03);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BacktestConfig {
    /// Forecast horizon in weeks.
    pub beta: u32,
    /// Reporting delays to evaluate. Zero is allowed and makes both strategies coincide.
    pub gamma_grid: Vec<u32>,
    pub threshold_grid: Vec<f64>,
    /// Weeks `1..=train_only_weeks` are never forecast.
    pub train_only_weeks: u32,
    /// Hyperparameters are re-optimized every `refit_stride` issue weeks and
    /// only conditioned in between.
    pub refit_stride: u32,
    pub seed: u64,
    pub score_mode: ScoreMode,
    /// Family-wise level before Bonferroni correction.
    pub alpha: f64,
    /// Random starts for the first fit of each chain.
    pub restarts: usize,
    pub max_evals: usize,
    /// Random starts added to the warm start at later refits.
    pub refit_restarts: usize,
    pub refit_max_evals: usize,
    pub tolerance: f64,
    pub min_population: u64,
    pub min_peak_level: IncidenceLevel,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        Self {
            beta: 4,
            gamma_grid: vec![2, 4, 6, 8],
            threshold_grid: vec![0.3, 0.4, 0.5, 0.6],
            train_only_weeks: 104,
            refit_stride: 4,
            seed: 0,
            score_mode: ScoreMode::Probability,
            alpha: 0.05,
            restarts: 8,
            max_evals: 500,
            refit_restarts: 0,
            refit_max_evals: 200,
            tolerance: 1e-6,
            min_population: 100_000,
            min_peak_level: IncidenceLevel::Medium,
        }
    }
}

impl BacktestConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.beta == 0 {
            return fail("beta must be positive");
        }
        if self.gamma_grid.is_empty() {
            return fail("gamma_grid is empty");
        }
        if self.threshold_grid.is_empty() {
            return fail("threshold_grid is empty");
        }
        if self.threshold_grid.iter().any(|t| t.is_nan()) {
            return fail("threshold_grid contains NaN");
        }
        if self.refit_stride == 0 {
            return fail("refit_stride must be positive");
        }
        let max_gamma = self.gamma_grid.iter().copied().max().unwrap_or(0);
        if self.train_only_weeks < max_gamma + 3 {
            return fail("train_only_weeks must exceed the largest gamma by at least 3");
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return fail("alpha must lie in (0, 1)");
        }
        if self.restarts == 0 || self.max_evals == 0 || self.refit_max_evals == 0 {
            return fail("optimizer budgets must be positive");
        }
        if !(self.tolerance > 0.0) {
            return fail("tolerance must be positive");
        }
        Ok(())
    }

    /// Issue weeks `train_only_weeks + 1 ..= n_weeks - beta` for a series of `n_weeks`.
    pub fn issue_weeks(&self, n_weeks: usize) -> Result<std::ops::RangeInclusive<u32>> {
        let first = self.train_only_weeks + 1;
        let last = (n_weeks as u32).checked_sub(self.beta).unwrap_or(0);
        if n_weeks as u32 <= self.train_only_weeks || last < first {
            return Err(Error::Config(format!(
                "{n_weeks} weeks leave no issue week after {} training weeks with beta {}",
                self.train_only_weeks, self.beta
            )));
        }
        Ok(first..=last)
    }

    fn optimizer(&self, city_id: &str, kind: u64, week: u32, first: bool) -> OptimizerConfig {
        OptimizerConfig {
            restarts: if first { self.restarts } else { self.refit_restarts },
            max_evals: if first { self.max_evals } else { self.refit_max_evals },
            tolerance: self.tolerance,
            seed: mix_seed(self.seed, city_id, kind, week),
            ..OptimizerConfig::default()
        }
    }
}

/// One city and delay. Holds the hyperparameter chains shared by every
/// threshold so that runs at different thresholds reuse the same nowcasts.
struct CityRun<'a> {
    series: &'a CitySeries,
    config: &'a BacktestConfig,
    gamma: u32,
    y_log: Vec<f64>,
    weeks: std::ops::RangeInclusive<u32>,
    nowcast_anchors: Vec<KernelHyperparams>,
    nowcasts: BTreeMap<u32, NowcastResult>,
}

/// Sequence of forecaster hyperparameters along the issue weeks of one run.
struct ForecastChain {
    last: Option<KernelHyperparams>,
}

impl<'a> CityRun<'a> {
    fn new(series: &'a CitySeries, config: &'a BacktestConfig, gamma: u32) -> Result<Self> {
        let weeks = config.issue_weeks(series.n_weeks())?;
        if *weeks.start() <= gamma + 2 {
            return Err(Error::Config(format!("gamma {gamma} leaves too few observed weeks")));
        }
        Ok(Self {
            series,
            config,
            gamma,
            y_log: series.dir().iter().map(|d| d.ln_1p()).collect(),
            weeks,
            nowcast_anchors: Vec::new(),
            nowcasts: BTreeMap::new(),
        })
    }

    fn anchor_index(&self, t: u32) -> usize {
        ((t - self.weeks.start()) / self.config.refit_stride) as usize
    }

    fn is_anchor(&self, t: u32) -> bool {
        (t - self.weeks.start()) % self.config.refit_stride == 0
    }

    fn fit_forecaster(&self, chain: &mut ForecastChain, t: u32, data: TrainingData) -> Result<GpModel> {
        match chain.last {
            Some(h) if !self.is_anchor(t) => GpModel::condition(data, KernelSpec::TemporalOnly, h),
            prev => {
                let cfg = self.config.optimizer(self.series.city_id(), KIND_FORECAST, t, prev.is_none());
                let source = HyperSource::Optimize { config: &cfg, warm_start: prev.as_ref() };
                let model = GpModel::fit_with(data, KernelSpec::TemporalOnly, source)?;
                chain.last = Some(model.hyper);
                Ok(model)
            }
        }
    }

    /// Nowcast at `t` with the hyperparameters of the latest anchor at or before
    /// `t`. Anchors are optimized in order, each warm-started from the previous
    /// one, so the result does not depend on which weeks asked for it.
    fn nowcast(&mut self, t: u32) -> Result<&NowcastResult> {
        let k = self.anchor_index(t);
        while self.nowcast_anchors.len() <= k {
            let j = self.nowcast_anchors.len();
            let r = self.weeks.start() + j as u32 * self.config.refit_stride;
            let cfg = self.config.optimizer(self.series.city_id(), KIND_NOWCAST, r, j == 0);
            let source = HyperSource::Optimize { config: &cfg, warm_start: self.nowcast_anchors.last() };
            let result = nowcast_with(self.series, r, self.gamma, source)?;
            self.nowcast_anchors.push(result.hyper);
            self.nowcasts.insert(r, result);
        }
        if !self.nowcasts.contains_key(&t) {
            let h = self.nowcast_anchors[k];
            let result = nowcast_with(self.series, t, self.gamma, HyperSource::Fixed(h))?;
            self.nowcasts.insert(t, result);
        }
        Ok(&self.nowcasts[&t])
    }

    fn observed(&self, t: u32) -> TrainingData {
        let n = (t - self.gamma) as usize;
        TrainingData::from_log_values((1..=n).map(|w| w as f64).collect(), &self.y_log[..n], None)
    }

    fn record(
        &self,
        strategy: Strategy,
        t: u32,
        threshold: Option<f64>,
        gate: Option<GateDecision>,
        model: &GpModel,
    ) -> Result<PredictionRecord> {
        let target = t + self.config.beta;
        let prediction = model.predict(&[f64::from(target)], None)?[0];
        let city_mean = model.city_mean();
        let true_dir = self.series.dir_at(target);
        Ok(PredictionRecord {
            city_id: self.series.city_id().to_string(),
            strategy,
            issue_week: t,
            target_week: target,
            gamma: self.gamma,
            threshold,
            prediction,
            city_mean,
            level_probs: level_probabilities(&prediction, city_mean)?,
            true_dir,
            true_level: true_dir.map(incidence_level).transpose()?,
            gate,
            training_weeks: model.data.len(),
        })
    }

    fn baseline(&self) -> Result<Vec<PredictionRecord>> {
        let mut chain = ForecastChain { last: None };
        self.weeks
            .clone()
            .map(|t| {
                let model = self.fit_forecaster(&mut chain, t, self.observed(t))?;
                self.record(Strategy::IncreasedAntecedence, t, None, None, &model)
            })
            .collect()
    }

    fn framework(&mut self, threshold: f64) -> Result<Vec<PredictionRecord>> {
        let mut chain = ForecastChain { last: None };
        let mut out = Vec::with_capacity(self.weeks.clone().count());
        for t in self.weeks.clone() {
            let decision = gate::decide(self.series, t, self.gamma, threshold)?;
            let data = if decision.verdict == Verdict::Use && self.gamma > 0 {
                let mut y = self.y_log[..(t - self.gamma) as usize].to_vec();
                y.extend(self.nowcast(t)?.log_estimates());
                TrainingData::from_log_values((1..=t).map(f64::from).collect(), &y, None)
            } else {
                self.observed(t)
            };
            let model = self.fit_forecaster(&mut chain, t, data)?;
            out.push(self.record(Strategy::Framework, t, Some(threshold), Some(decision), &model)?);
        }
        Ok(out)
    }
}

/// Backtest one city under one strategy. `threshold` is ignored by the baseline.
pub fn run_strategy(
    series: &CitySeries,
    strategy: Strategy,
    config: &BacktestConfig,
    gamma: u32,
    threshold: f64,
) -> Result<Vec<PredictionRecord>> {
    let mut run = CityRun::new(series, config, gamma)?;
    match strategy {
        Strategy::IncreasedAntecedence => run.baseline(),
        Strategy::Framework => run.framework(threshold),
    }
}

/// Outcome of one city at one delay: the baseline and one framework run per threshold.
struct CityGamma {
    baseline: Result<Vec<PredictionRecord>, String>,
    framework: Vec<Result<Vec<PredictionRecord>, String>>,
}

fn run_city_gamma(series: &CitySeries, config: &BacktestConfig, gamma: u32) -> CityGamma {
    let mut run = match CityRun::new(series, config, gamma) {
        Ok(r) => r,
        Err(e) => {
            let msg = e.to_string();
            return CityGamma {
                baseline: Err(msg.clone()),
                framework: config.threshold_grid.iter().map(|_| Err(msg.clone())).collect(),
            };
        }
    };
    let baseline = run.baseline().map_err(|e| e.to_string());
    let framework = config
        .threshold_grid
        .iter()
        .map(|&thr| run.framework(thr).map_err(|e| e.to_string()))
        .collect();
    CityGamma { baseline, framework }
}

/// Per-cell comparison of the two strategies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub gamma: u32,
    pub threshold: f64,
    /// Framework mean level AUC per retained city.
    pub per_city_auc: BTreeMap<String, f64>,
    pub per_city_auc_baseline: BTreeMap<String, f64>,
    pub mean_auc: Option<f64>,
    pub mean_auc_baseline: Option<f64>,
    /// Framework minus baseline.
    pub auc_differences: BTreeMap<String, f64>,
    pub mean_difference: Option<f64>,
    pub ci95: Option<(f64, f64)>,
    /// Fraction of issue weeks whose gate said Use.
    pub gate_use_fraction: BTreeMap<String, f64>,
    pub wilcoxon_p: f64,
    pub wilcoxon_statistic: f64,
    pub wilcoxon_n_nonzero: usize,
    /// Set when the test could not run (no or too few non-zero differences); `wilcoxon_p` is then 1.
    pub wilcoxon_degenerate: bool,
    /// Per-test level after Bonferroni correction across all cells.
    pub bonferroni_alpha: f64,
    pub significant: bool,
    /// Cities left out of this cell and why.
    pub excluded: BTreeMap<String, String>,
    /// Framework log-scale residuals of the retained cities.
    pub residuals: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Comparison {
    /// One report per (gamma, threshold), gamma-major in grid order.
    pub reports: Vec<EvalReport>,
    /// Records of every successful run, ordered by city, gamma, strategy
    /// (baseline first), threshold and issue week.
    pub records: Vec<PredictionRecord>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn build_report(
    gamma: u32,
    threshold: f64,
    runs: &[(&CitySeries, &CityGamma, usize)],
    prefiltered: &BTreeMap<String, String>,
    mode: ScoreMode,
) -> EvalReport {
    let mut per_city_auc = BTreeMap::new();
    let mut per_city_auc_baseline = BTreeMap::new();
    let mut auc_differences = BTreeMap::new();
    let mut gate_use_fraction = BTreeMap::new();
    let mut excluded = prefiltered.clone();
    let mut residuals = Vec::new();
    for (series, run, ti) in runs {
        let id = series.city_id().to_string();
        let (base, fw) = match (&run.baseline, &run.framework[*ti]) {
            (Ok(b), Ok(f)) => (b, f),
            (Err(e), _) => {
                excluded.insert(id, format!("baseline failed: {e}"));
                continue;
            }
            (_, Err(e)) => {
                excluded.insert(id, format!("framework failed: {e}"));
                continue;
            }
        };
        let used = fw.iter().filter(|r| r.gate.is_some_and(|g| g.verdict == Verdict::Use)).count();
        gate_use_fraction.insert(id.clone(), used as f64 / fw.len().max(1) as f64);
        let (a_fw, a_base) = match (mean_level_auc(fw, mode), mean_level_auc(base, mode)) {
            (Ok(a), Ok(b)) => (a.mean, b.mean),
            (Err(e), _) | (_, Err(e)) => {
                excluded.insert(id, format!("AUC undefined: {e}"));
                continue;
            }
        };
        per_city_auc.insert(id.clone(), a_fw);
        per_city_auc_baseline.insert(id.clone(), a_base);
        auc_differences.insert(id, a_fw - a_base);
        residuals.extend(fw.iter().filter_map(PredictionRecord::log_residual));
    }
    let diffs: Vec<f64> = auc_differences.values().copied().collect();
    let ci = mean_ci95(&diffs);
    let (wilcoxon_p, wilcoxon_statistic, wilcoxon_n_nonzero, wilcoxon_degenerate) = match wilcoxon_signed_rank(&diffs) {
        Ok(w) => (w.p_value, w.statistic, w.n_nonzero, w.degenerate),
        Err(_) => (1.0, f64::NAN, diffs.iter().filter(|d| **d != 0.0).count(), true),
    };
    EvalReport {
        gamma,
        threshold,
        mean_auc: mean(per_city_auc.values().copied()),
        mean_auc_baseline: mean(per_city_auc_baseline.values().copied()),
        per_city_auc,
        per_city_auc_baseline,
        auc_differences,
        mean_difference: ci.map(|c| c.0),
        ci95: ci.map(|c| (c.1, c.2)),
        gate_use_fraction,
        wilcoxon_p,
        wilcoxon_statistic,
        wilcoxon_n_nonzero,
        wilcoxon_degenerate,
        bonferroni_alpha: f64::NAN,
        significant: false,
        excluded,
        residuals,
    }
}

/// Backtests every city under both strategies for every (gamma, threshold)
/// cell and tests the paired AUC differences. Cities failing the population
/// and peak-level filter are listed as excluded in every cell. `jobs` caps
/// the worker count (0 = all cores); the output does not depend on it.
pub fn compare(dataset: &[CitySeries], config: &BacktestConfig, jobs: usize) -> Result<Comparison> {
    config.validate()?;
    let mut cities: Vec<CitySeries> = filter_cities(dataset.to_vec(), config.min_population, config.min_peak_level);
    cities.sort_by(|a, b| a.city_id().cmp(b.city_id()));
    let prefiltered: BTreeMap<String, String> = dataset
        .iter()
        .filter(|c| !cities.iter().any(|k| k.city_id() == c.city_id()))
        .map(|c| (c.city_id().to_string(), "below population or peak-level filter".to_string()))
        .collect();
    if cities.len() < 5 {
        return Err(Error::domain(format!(
            "{} cities pass the filter, the paired test needs at least 5",
            cities.len()
        )));
    }

    let items: Vec<(usize, u32)> = (0..cities.len())
        .flat_map(|c| config.gamma_grid.iter().map(move |&g| (c, g)))
        .collect();
    let results = par::map_ordered(&items, jobs, |&(c, g)| run_city_gamma(&cities[c], config, g));

    let n_gamma = config.gamma_grid.len();
    let mut reports = Vec::with_capacity(n_gamma * config.threshold_grid.len());
    for (gi, &gamma) in config.gamma_grid.iter().enumerate() {
        for (ti, &threshold) in config.threshold_grid.iter().enumerate() {
            let runs: Vec<(&CitySeries, &CityGamma, usize)> = cities
                .iter()
                .enumerate()
                .map(|(ci, c)| (c, &results[ci * n_gamma + gi], ti))
                .collect();
            reports.push(build_report(gamma, threshold, &runs, &prefiltered, config.score_mode));
        }
    }
    let p: Vec<f64> = reports.iter().map(|r| r.wilcoxon_p).collect();
    let cutoff = config.alpha / reports.len() as f64;
    for (r, sig) in reports.iter_mut().zip(bonferroni(&p, config.alpha)) {
        r.bonferroni_alpha = cutoff;
        r.significant = sig;
    }

    let mut records = Vec::new();
    for run in results {
        records.extend(run.baseline.into_iter().flatten());
        for fw in run.framework {
            records.extend(fw.into_iter().flatten());
        }
    }
    Ok(Comparison { reports, records })
}
