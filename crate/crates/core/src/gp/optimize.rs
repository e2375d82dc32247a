//! Multi-start Nelder–Mead over log hyperparameters inside box constraints.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{KernelHyperparams, KernelSpec};

use super::levinson;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    /// Local searches from random points of the box.
    pub restarts: usize,
    /// Candidates screened per local search. The log-period range is cut into
    /// `restarts` equal slices; each search starts from the best of `screen`
    /// log-uniform draws whose period lies in its slice.
    pub screen: usize,
    /// Objective evaluations per local search.
    pub max_evals: usize,
    /// A local search stops once the simplex's objective spread falls below this.
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            restarts: 8,
            screen: 32,
            max_evals: 500,
            tolerance: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizationOutcome {
    pub hyper: KernelHyperparams,
    /// Log marginal likelihood at `hyper`.
    pub objective: f64,
    /// Log marginal likelihood at the start of every local search, `-inf`
    /// where the Gram could not be factorized.
    pub start_objectives: Vec<f64>,
    pub evaluations: usize,
}

struct Objective<'a> {
    spec: KernelSpec,
    times: &'a [f64],
    covariates: Option<&'a [f64]>,
    y: &'a [f64],
    grid: bool,
    base: KernelHyperparams,
    bounds: Vec<(f64, f64)>,
}

impl Objective<'_> {
    fn hyper(&self, v: &[f64]) -> KernelHyperparams {
        KernelHyperparams::from_log_vec(self.spec, v, &self.base)
    }

    /// Negative log marginal likelihood; `+inf` when not factorizable.
    fn cost(&self, v: &[f64]) -> f64 {
        let h = self.hyper(v);
        let lml = if self.grid {
            levinson::log_marginal_likelihood_grid(self.spec, &h, self.covariates, self.y)
        } else {
            super::log_marginal_likelihood(&h, self.spec, self.times, self.covariates, self.y).ok()
        };
        match lml {
            Some(v) if v.is_finite() => -v,
            _ => f64::INFINITY,
        }
    }

    fn clamp(&self, v: &mut [f64]) {
        for (x, (lo, hi)) in v.iter_mut().zip(&self.bounds) {
            *x = x.clamp(*lo, *hi);
        }
    }
}

/// Bounded Nelder–Mead from `x0`. Returns the best vertex, its cost and the
/// number of evaluations spent.
fn nelder_mead(obj: &Objective<'_>, x0: &[f64], max_evals: usize, tol: f64) -> (Vec<f64>, f64, usize) {
    let d = x0.len();
    let mut evals = 0usize;
    let eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        obj.cost(x)
    };

    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(d + 1);
    let mut start = x0.to_vec();
    obj.clamp(&mut start);
    let f0 = eval(&start, &mut evals);
    simplex.push((start.clone(), f0));
    for i in 0..d {
        if evals >= max_evals {
            break;
        }
        let (lo, hi) = obj.bounds[i];
        let step = 0.1 * (hi - lo);
        let mut x = start.clone();
        x[i] = if x[i] + step <= hi { x[i] + step } else { x[i] - step };
        let f = eval(&x, &mut evals);
        simplex.push((x, f));
    }
    let best = |s: &[(Vec<f64>, f64)]| {
        s.iter()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(x, f)| (x.clone(), *f))
            .expect("simplex is non-empty")
    };
    if simplex.len() < d + 1 {
        let (x, f) = best(&simplex);
        return (x, f, evals);
    }

    while evals < max_evals {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let f_best = simplex[0].1;
        let f_worst = simplex[d].1;
        if f_best.is_finite() && (f_worst - f_best).abs() <= tol {
            break;
        }
        let mut centroid = vec![0.0; d];
        for (x, _) in &simplex[..d] {
            for (c, xi) in centroid.iter_mut().zip(x) {
                *c += xi / d as f64;
            }
        }
        let along = |t: f64| -> Vec<f64> {
            let mut p: Vec<f64> = centroid
                .iter()
                .zip(&simplex[d].0)
                .map(|(c, w)| c + t * (w - c))
                .collect();
            obj.clamp(&mut p);
            p
        };

        let xr = along(-1.0);
        // Dimension-adaptive coefficients (Gao and Han, 2012).
        let (expand, contract, shrink) = (1.0 + 2.0 / d as f64, 0.75 - 0.5 / d as f64, 1.0 - 1.0 / d as f64);
        let fr = eval(&xr, &mut evals);
        if fr < simplex[0].1 {
            if evals >= max_evals {
                simplex[d] = (xr, fr);
                break;
            }
            let xe = along(-expand);
            let fe = eval(&xe, &mut evals);
            simplex[d] = if fe < fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr < simplex[d - 1].1 {
            simplex[d] = (xr, fr);
            continue;
        }
        if evals >= max_evals {
            break;
        }
        let (xc, fc) = if fr < simplex[d].1 {
            let xc = along(-contract);
            let fc = eval(&xc, &mut evals);
            (xc, fc)
        } else {
            let xc = along(contract);
            let fc = eval(&xc, &mut evals);
            (xc, fc)
        };
        if fc < simplex[d].1.min(fr) {
            simplex[d] = (xc, fc);
            continue;
        }
        // shrink toward the best vertex
        let x0 = simplex[0].0.clone();
        for vertex in simplex.iter_mut().skip(1) {
            if evals >= max_evals {
                break;
            }
            let mut x: Vec<f64> = x0.iter().zip(&vertex.0).map(|(b, v)| b + shrink * (v - b)).collect();
            obj.clamp(&mut x);
            let f = eval(&x, &mut evals);
            *vertex = (x, f);
        }
    }
    let (x, f) = best(&simplex);
    (x, f, evals)
}

/// Position of `period_p` in the log parameter vector, the most multimodal
/// direction of the likelihood.
const PERIOD: usize = 5;

/// Nelder–Mead restarted from its own result with a fresh simplex until a
/// restart stops improving or the budget runs out.
fn local_search(obj: &Objective<'_>, x0: &[f64], max_evals: usize, tol: f64) -> (Vec<f64>, f64, usize) {
    let (mut x, mut f, mut used) = nelder_mead(obj, x0, max_evals, tol);
    while used + x0.len() + 1 < max_evals {
        let (nx, nf, n) = nelder_mead(obj, &x, max_evals - used, tol);
        used += n;
        let gained = f - nf;
        if nf < f {
            x = nx;
            f = nf;
        }
        if !(gained > tol) {
            break;
        }
    }
    (x, f, used)
}

/// Maximizes the log marginal likelihood from `config.restarts` random
/// starts (plus `warm_start` when given, tried first).
pub fn optimize_hyperparameters(
    spec: KernelSpec,
    times: &[f64],
    covariates: Option<&[f64]>,
    y_centered: &[f64],
    config: &OptimizerConfig,
    warm_start: Option<&KernelHyperparams>,
) -> Result<OptimizationOutcome> {
    if times.is_empty() {
        return Err(Error::Optimization("no training data".into()));
    }
    if config.max_evals == 0 || (config.restarts == 0 && warm_start.is_none()) {
        return Err(Error::Config("optimizer needs at least one start and one evaluation".into()));
    }
    let base = warm_start.copied().unwrap_or_else(KernelHyperparams::reference_medians);
    let obj = Objective {
        spec,
        times,
        covariates,
        y: y_centered,
        grid: levinson::is_unit_grid(times),
        base,
        bounds: KernelHyperparams::log_bounds(spec),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut starts: Vec<Vec<f64>> = Vec::with_capacity(config.restarts + 1);
    if let Some(w) = warm_start {
        starts.push(w.to_log_vec(spec));
    }
    let mut evaluations = 0;
    let (p_lo, p_hi) = obj.bounds[PERIOD];
    let width = (p_hi - p_lo) / config.restarts.max(1) as f64;
    for slice in 0..config.restarts {
        let lo = p_lo + width * slice as f64;
        let best = (0..config.screen.max(1))
            .map(|_| {
                let mut x: Vec<f64> = obj.bounds.iter().map(|&(lo, hi)| rng.random_range(lo..hi)).collect();
                x[PERIOD] = rng.random_range(lo..lo + width);
                evaluations += 1;
                (obj.cost(&x), x)
            })
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .expect("at least one candidate");
        starts.push(best.1);
    }

    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut start_objectives = Vec::with_capacity(starts.len());
    for start in &starts {
        let mut clamped = start.clone();
        obj.clamp(&mut clamped);
        start_objectives.push(-obj.cost(&clamped));
        let (x, f, n) = local_search(&obj, start, config.max_evals, config.tolerance);
        evaluations += n;
        if f.is_finite() && best.as_ref().is_none_or(|(_, bf)| f < *bf) {
            best = Some((x, f));
        }
    }
    let (x, f) = best.ok_or_else(|| {
        Error::Optimization("no start produced a factorizable Gram matrix".into())
    })?;
    Ok(OptimizationOutcome {
        hyper: obj.hyper(&x),
        objective: -f,
        start_objectives,
        evaluations,
    })
}
