//! Learning-rate calibration by bootstrap coverage.
//!
//! β is tuned so that bootstrap posteriors cover the point estimate θ̂ at
//! the nominal `1 − α` rate. With a conjugate model every bootstrap
//! posterior is closed-form; otherwise one MCMC run is importance-reweighted
//! per bootstrap and refreshed when the weights degenerate.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::loss::{conj_terms, nsm_contributions, ConjTerms};
use crate::posterior::{
    nsm_conj_posterior, nsm_sample, theta_hat_closed_form, GaussianPosterior, GaussianPrior,
};
use crate::rng::{substream, Stage};
use crate::sampler::SliceConfig;
use crate::stats::{chi2_quantile, weighted_quantile};
use crate::surrogate::{ConditionalDensitySurrogate, ExponentialFamily};
use crate::weights::WeightFunction;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibConfig {
    pub alpha: f64,
    pub bootstraps: usize,
    pub steps: usize,
    pub beta0: f64,
    /// Retained draws per MCMC run.
    pub draws: usize,
    pub warmup: usize,
    /// Refresh the chain when the mean ESS fraction drops below this.
    pub ess_floor: f64,
    /// Abort when the mean ESS fraction right after a refresh is below this.
    pub ess_collapse: f64,
    pub seed: u64,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            bootstraps: 100,
            steps: 20,
            beta0: 1.0,
            draws: 500,
            warmup: 500,
            ess_floor: 0.30,
            ess_collapse: 0.01,
            seed: 0,
        }
    }
}

impl CalibConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha > 0.0
            && self.alpha < 1.0
            && self.bootstraps >= 1
            && self.steps >= 1
            && self.draws >= 1
            && self.beta0 > 0.0
            && self.beta0.is_finite()
            && (0.0..=1.0).contains(&self.ess_floor)
            && self.ess_collapse <= self.ess_floor;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "invalid calibration configuration {self:?}"
            )))
        }
    }

    pub fn beta_floor(&self) -> f64 {
        self.beta0 / 100.0
    }
}

/// One row of the calibration trace: coverage `ĉ(β_t)` at `β_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibStep {
    pub t: usize,
    pub beta: f64,
    pub coverage: f64,
    /// Mean ESS fraction over bootstraps (reweighting runs only).
    pub ess: Option<f64>,
    pub refreshed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub beta: f64,
    /// Coverage at the returned β.
    pub coverage: f64,
    pub theta_hat: Vec<f64>,
    pub trace: Vec<CalibStep>,
}

/// True iff `(θ − μ)ᵀ Σ⁻¹ (θ − μ) ≤ χ²_{1−α, d}`.
pub fn credible_region_contains(
    post: &GaussianPosterior,
    theta: &[f64],
    alpha: f64,
) -> Result<bool> {
    Ok(post.mahalanobis_sq(theta)? <= chi2_quantile(1.0 - alpha, post.dim())?)
}

/// `β_{t+1} = exp(log β_t + κ_t (ĉ − (1 − α)))`, `κ_t = 10/(t + 10)` with
/// `t ≥ 1`, clamped below at `floor`.
pub fn update_beta(beta: f64, coverage: f64, t: usize, alpha: f64, floor: f64) -> f64 {
    let kappa = 10.0 / (t as f64 + 10.0);
    (beta.ln() + kappa * (coverage - (1.0 - alpha)))
        .exp()
        .max(floor)
}

/// Multinomial resampling counts `N_b` (sum `n`) for bootstrap `b` of step `t`.
pub fn bootstrap_counts(seed: u64, t: usize, b: usize, n: usize) -> Vec<f64> {
    let mut rng = substream(seed, Stage::Calibrate, ((t as u64) << 32) | b as u64);
    let mut counts = vec![0.0; n];
    for _ in 0..n {
        counts[rng.random_range(0..n)] += 1.0;
    }
    counts
}

/// Fraction of bootstrap posteriors at β whose credible region holds θ̂.
pub fn conjugate_coverage(
    terms: &ConjTerms,
    prior: &GaussianPrior,
    theta_hat: &[f64],
    beta: f64,
    t: usize,
    cfg: &CalibConfig,
) -> Result<f64> {
    let n = terms.len();
    let hits: Vec<Option<bool>> = (0..cfg.bootstraps)
        .into_par_iter()
        .map(|b| {
            let counts = bootstrap_counts(cfg.seed, t, b, n);
            let post = terms
                .weighted(&counts)
                .and_then(|c| nsm_conj_posterior(prior, &c, beta, n))
                .ok()?;
            credible_region_contains(&post, theta_hat, cfg.alpha).ok()
        })
        .collect();
    let valid: Vec<bool> = hits.into_iter().flatten().collect();
    if valid.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "all bootstrap posteriors degenerate at β = {beta}"
        )));
    }
    Ok(valid.iter().filter(|h| **h).count() as f64 / valid.len() as f64)
}

/// Stochastic-approximation calibration with closed-form bootstrap posteriors.
pub fn calibrate_conjugate(
    data: &Dataset,
    model: &(impl ExponentialFamily + ?Sized),
    weight: &WeightFunction,
    prior: &GaussianPrior,
    cfg: &CalibConfig,
) -> Result<Calibration> {
    cfg.validate()?;
    let terms = conj_terms(data, model, weight)?;
    let theta_hat: Vec<f64> = theta_hat_closed_form(&terms.mean()?, None)?
        .iter()
        .copied()
        .collect();
    let mut beta = cfg.beta0;
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    for t in 1..=cfg.steps {
        let coverage = conjugate_coverage(&terms, prior, &theta_hat, beta, t, cfg)?;
        trace.push(CalibStep {
            t,
            beta,
            coverage,
            ess: None,
            refreshed: false,
        });
        beta = update_beta(beta, coverage, t, cfg.alpha, cfg.beta_floor());
    }
    let coverage = conjugate_coverage(&terms, prior, &theta_hat, beta, cfg.steps + 1, cfg)?;
    trace.push(CalibStep {
        t: cfg.steps + 1,
        beta,
        coverage,
        ess: None,
        refreshed: false,
    });
    Ok(Calibration {
        beta,
        coverage,
        theta_hat,
        trace,
    })
}

/// `(Σw)² / Σw²`.
pub fn effective_sample_size(weights: &[f64]) -> f64 {
    let s: f64 = weights.iter().sum();
    let s2: f64 = weights.iter().map(|w| w * w).sum();
    s * s / s2
}

/// Self-normalised weights `W_i ∝ exp(−β Σⱼ Nⱼ Lᵢⱼ + β_curr Σⱼ Lᵢⱼ)` for
/// draws taken at `beta_curr` with per-observation losses `losses` (M × n).
pub fn importance_weights(
    losses: &DMatrix<f64>,
    counts: &[f64],
    beta: f64,
    beta_curr: f64,
) -> Vec<f64> {
    let nb = DVector::from_column_slice(counts);
    let weighted = losses * &nb;
    let plain = losses.column_sum();
    let log_w: Vec<f64> = (0..losses.nrows())
        .map(|i| -beta * weighted[i] + beta_curr * plain[i])
        .collect();
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// Whether θ̂ lies inside the weighted `1 − α` Mahalanobis region of the draws.
pub fn weighted_region_contains(
    draws: &DMatrix<f64>,
    weights: &[f64],
    theta_hat: &[f64],
    alpha: f64,
) -> Result<bool> {
    let d = draws.ncols();
    let total: f64 = weights.iter().sum();
    let mut mean = DVector::zeros(d);
    for (i, w) in weights.iter().enumerate() {
        mean += draws.row(i).transpose() * (w / total);
    }
    let mut cov = DMatrix::zeros(d, d);
    for (i, w) in weights.iter().enumerate() {
        let r = draws.row(i).transpose() - &mean;
        cov += &r * r.transpose() * (w / total);
    }
    let chol = cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite {
            context: "weighted draw covariance".into(),
            condition: crate::stats::condition_number(&cov),
        })?;
    let dist = |x: DVector<f64>| {
        let z = chol
            .l()
            .solve_lower_triangular(&(x - &mean))
            .expect("cholesky factor is invertible");
        z.norm_squared()
    };
    let d2: Vec<f64> = (0..draws.nrows())
        .map(|i| dist(draws.row(i).transpose()))
        .collect();
    let tau = weighted_quantile(&d2, weights, 1.0 - alpha);
    Ok(dist(DVector::from_column_slice(theta_hat)) <= tau)
}

struct Cache {
    beta: f64,
    draws: DMatrix<f64>,
    losses: DMatrix<f64>,
}

#[allow(clippy::too_many_arguments)]
fn run_chain(
    data: &Dataset,
    model: &(impl ConditionalDensitySurrogate + ?Sized),
    weight: &WeightFunction,
    prior: &GaussianPrior,
    beta: f64,
    cfg: &CalibConfig,
    refresh: u64,
) -> Result<Cache> {
    let slice = SliceConfig {
        warmup: cfg.warmup,
        ..prior.slice_config()
    };
    let mut rng = substream(cfg.seed, Stage::Infer, refresh);
    let draws = nsm_sample(
        prior, data, model, weight, beta, cfg.draws, &slice, &mut rng,
    )?;
    let rows: Vec<Vec<f64>> = (0..draws.nrows())
        .into_par_iter()
        .map(|i| {
            let th: Vec<f64> = draws.row(i).iter().copied().collect();
            nsm_contributions(&th, data, model, weight)
        })
        .collect::<Result<Vec<_>>>()?;
    let losses = DMatrix::from_fn(draws.nrows(), data.len(), |i, j| rows[i][j]);
    Ok(Cache {
        beta,
        draws,
        losses,
    })
}

/// `(coverage, mean ESS fraction)` of the reweighted bootstraps at β.
fn reweighted_coverage(
    cache: &Cache,
    theta_hat: &[f64],
    beta: f64,
    t: usize,
    cfg: &CalibConfig,
) -> Result<(f64, f64)> {
    let n = cache.losses.ncols();
    let m = cache.draws.nrows() as f64;
    let results: Vec<(Option<bool>, f64)> = (0..cfg.bootstraps)
        .into_par_iter()
        .map(|b| {
            let counts = bootstrap_counts(cfg.seed, t, b, n);
            let w = importance_weights(&cache.losses, &counts, beta, cache.beta);
            let ess = effective_sample_size(&w) / m;
            (
                weighted_region_contains(&cache.draws, &w, theta_hat, cfg.alpha).ok(),
                ess,
            )
        })
        .collect();
    let ess = results.iter().map(|r| r.1).sum::<f64>() / results.len() as f64;
    let valid: Vec<bool> = results.iter().filter_map(|r| r.0).collect();
    if valid.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "all reweighted bootstraps degenerate at β = {beta}"
        )));
    }
    Ok((
        valid.iter().filter(|h| **h).count() as f64 / valid.len() as f64,
        ess,
    ))
}

/// Calibration for sampled posteriors by importance-reweighting one chain
/// per refresh. `theta_hat` is the loss minimiser.
pub fn calibrate_mcmc_is(
    data: &Dataset,
    model: &(impl ConditionalDensitySurrogate + ?Sized),
    weight: &WeightFunction,
    prior: &GaussianPrior,
    theta_hat: &[f64],
    cfg: &CalibConfig,
) -> Result<Calibration> {
    cfg.validate()?;
    if theta_hat.len() != prior.dim() {
        return Err(Error::dim("θ̂", prior.dim(), theta_hat.len()));
    }
    let mut refreshes = 0u64;
    let mut cache = run_chain(data, model, weight, prior, cfg.beta0, cfg, refreshes)?;
    let mut beta = cfg.beta0;
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    for t in 1..=cfg.steps + 1 {
        let (mut coverage, mut ess) = reweighted_coverage(&cache, theta_hat, beta, t, cfg)?;
        let mut refreshed = false;
        if ess < cfg.ess_floor {
            refreshes += 1;
            cache = run_chain(data, model, weight, prior, beta, cfg, refreshes)?;
            (coverage, ess) = reweighted_coverage(&cache, theta_hat, beta, t, cfg)?;
            refreshed = true;
            if ess < cfg.ess_collapse {
                return Err(Error::EssCollapse {
                    beta,
                    ess_fraction: ess,
                    trace: trace
                        .iter()
                        .map(|s: &CalibStep| (s.beta, s.coverage))
                        .collect(),
                });
            }
        }
        trace.push(CalibStep {
            t,
            beta,
            coverage,
            ess: Some(ess),
            refreshed,
        });
        if t <= cfg.steps {
            beta = update_beta(beta, coverage, t, cfg.alpha, cfg.beta_floor());
        }
    }
    let coverage = trace.last().expect("at least one step").coverage;
    Ok(Calibration {
        beta,
        coverage,
        theta_hat: theta_hat.to_vec(),
        trace,
    })
}
