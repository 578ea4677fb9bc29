//! Evaluation metrics and the closed-form posterior influence probe.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrate::credible_region_contains;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::loss::{conj_point_terms, conj_terms};
use crate::posterior::{nsm_conj_posterior, GaussianPosterior, GaussianPrior};
use crate::stats::{median, pairwise_sum, sample_moments};
use crate::surrogate::ExponentialFamily;
use crate::weights::WeightFunction;

/// Gaussian-kernel settings; `None` selects the median heuristic.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Mmd2Config {
    pub lengthscale: Option<f64>,
}

fn sq_dist(a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize) -> f64 {
    (0..a.ncols())
        .map(|k| (a[(i, k)] - b[(j, k)]).powi(2))
        .sum()
}

/// `ℓ = √(median ‖zᵢ − zⱼ‖² / 2)` over distinct pairs of the pooled set.
pub fn median_heuristic(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    let pooled = DMatrix::from_fn(a.nrows() + b.nrows(), a.ncols(), |i, k| {
        if i < a.nrows() {
            a[(i, k)]
        } else {
            b[(i - a.nrows(), k)]
        }
    });
    let n = pooled.nrows();
    let d2: Vec<f64> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            let p = &pooled;
            (i + 1..n).map(move |j| sq_dist(p, i, p, j))
        })
        .collect();
    if d2.is_empty() {
        return Err(Error::InvalidArgument(
            "median heuristic needs at least two points".into(),
        ));
    }
    let l = (median(&d2) / 2.0).sqrt();
    if l > 0.0 {
        Ok(l)
    } else {
        Err(Error::InvalidArgument(
            "median heuristic lengthscale is zero".into(),
        ))
    }
}

const BLOCK: usize = 64;

/// `Σᵢⱼ exp(−‖aᵢ − bⱼ‖²/2ℓ²)` by row blocks, reduced in block order.
fn kernel_sum(a: &DMatrix<f64>, b: &DMatrix<f64>, l: f64) -> f64 {
    let inv = 1.0 / (2.0 * l * l);
    let starts: Vec<usize> = (0..a.nrows()).step_by(BLOCK).collect();
    let partial: Vec<f64> = starts
        .par_iter()
        .map(|&s| {
            let rows: Vec<f64> = (s..(s + BLOCK).min(a.nrows()))
                .map(|i| {
                    let v: Vec<f64> = (0..b.nrows())
                        .map(|j| (-sq_dist(a, i, b, j) * inv).exp())
                        .collect();
                    pairwise_sum(&v)
                })
                .collect();
            pairwise_sum(&rows)
        })
        .collect();
    pairwise_sum(&partial)
}

fn check_samples(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::InvalidArgument(
            "MMD needs at least one sample per set".into(),
        ));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::dim("MMD sample width", a.ncols(), b.ncols()));
    }
    Ok(())
}

fn lengthscale(a: &DMatrix<f64>, b: &DMatrix<f64>, cfg: &Mmd2Config) -> Result<f64> {
    match cfg.lengthscale {
        Some(l) if l > 0.0 => Ok(l),
        Some(l) => Err(Error::InvalidArgument(format!(
            "lengthscale must be positive, got {l}"
        ))),
        None => median_heuristic(a, b),
    }
}

/// V-statistic `(1/n₁²)Σk(a,a) − (2/n₁n₂)Σk(a,b) + (1/n₂²)Σk(b,b)`.
pub fn mmd2(a: &DMatrix<f64>, b: &DMatrix<f64>, cfg: &Mmd2Config) -> Result<f64> {
    check_samples(a, b)?;
    let l = lengthscale(a, b, cfg)?;
    let (n1, n2) = (a.nrows() as f64, b.nrows() as f64);
    Ok(
        kernel_sum(a, a, l) / (n1 * n1) - 2.0 * kernel_sum(a, b, l) / (n1 * n2)
            + kernel_sum(b, b, l) / (n2 * n2),
    )
}

/// The same estimator by a plain double loop.
pub fn mmd2_naive(a: &DMatrix<f64>, b: &DMatrix<f64>, l: f64) -> Result<f64> {
    check_samples(a, b)?;
    let k = |x: &DMatrix<f64>, i, y: &DMatrix<f64>, j| (-sq_dist(x, i, y, j) / (2.0 * l * l)).exp();
    let (n1, n2) = (a.nrows(), b.nrows());
    let mut saa = 0.0;
    for i in 0..n1 {
        for j in 0..n1 {
            saa += k(a, i, a, j);
        }
    }
    let mut sab = 0.0;
    for i in 0..n1 {
        for j in 0..n2 {
            sab += k(a, i, b, j);
        }
    }
    let mut sbb = 0.0;
    for i in 0..n2 {
        for j in 0..n2 {
            sbb += k(b, i, b, j);
        }
    }
    let (n1, n2) = (n1 as f64, n2 as f64);
    Ok(saa / (n1 * n1) - 2.0 * sab / (n1 * n2) + sbb / (n2 * n2))
}

fn check_theta(d: usize, theta_star: &[f64]) -> Result<()> {
    if d != theta_star.len() {
        return Err(Error::dim("θ*", d, theta_star.len()));
    }
    Ok(())
}

/// `mean ‖θᵢ − θ*‖²` over sample rows.
pub fn mse_samples(samples: &DMatrix<f64>, theta_star: &[f64]) -> Result<f64> {
    check_theta(samples.ncols(), theta_star)?;
    let t = DVector::from_column_slice(theta_star);
    let v: Vec<f64> = (0..samples.nrows())
        .map(|i| (samples.row(i).transpose() - &t).norm_squared())
        .collect();
    Ok(pairwise_sum(&v) / v.len() as f64)
}

/// `‖μ − θ*‖² + tr Σ`.
pub fn mse_conjugate(post: &GaussianPosterior, theta_star: &[f64]) -> Result<f64> {
    check_theta(post.dim(), theta_star)?;
    Ok((&post.mean - DVector::from_column_slice(theta_star)).norm_squared() + post.cov.trace())
}

/// Gaussian summary (sample mean and covariance) of posterior draws.
pub fn gaussian_summary(samples: &DMatrix<f64>, beta: f64) -> GaussianPosterior {
    let (mean, cov) = sample_moments(samples);
    GaussianPosterior {
        mean,
        cov,
        beta,
        n: 0,
        provenance: "sample moments".into(),
    }
}

/// Fraction of posteriors whose `1 − α` credible ellipsoid contains θ*.
pub fn empirical_coverage(
    posteriors: &[GaussianPosterior],
    theta_star: &[f64],
    alpha: f64,
) -> Result<f64> {
    if posteriors.is_empty() {
        return Err(Error::InvalidArgument(
            "coverage needs at least one posterior".into(),
        ));
    }
    let mut hits = 0;
    for p in posteriors {
        if credible_region_contains(p, theta_star, alpha)? {
            hits += 1;
        }
    }
    Ok(hits as f64 / posteriors.len() as f64)
}

/// `KL(N(μ₀, Σ₀) ‖ N(μ₁, Σ₁))`.
pub fn gaussian_kl(p: &GaussianPosterior, q: &GaussianPosterior) -> Result<f64> {
    let d = p.dim();
    check_theta(d, q.mean.as_slice())?;
    let chol_q = q
        .cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite {
            context: "KL covariance".into(),
            condition: crate::stats::condition_number(&q.cov),
        })?;
    let chol_p = p
        .cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite {
            context: "KL covariance".into(),
            condition: crate::stats::condition_number(&p.cov),
        })?;
    let trace = chol_q.solve(&p.cov).trace();
    let dm = &q.mean - &p.mean;
    let quad = dm.dot(&chol_q.solve(&dm));
    let log_det = |c: &nalgebra::Cholesky<f64, nalgebra::Dyn>| {
        2.0 * c.l().diagonal().iter().map(|v| v.ln()).sum::<f64>()
    };
    Ok(0.5 * (trace - d as f64 + quad + log_det(&chol_q) - log_det(&chol_p)))
}

/// One point of a contamination sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PifPoint {
    pub contaminant: Vec<f64>,
    pub kl: f64,
}

/// For each contaminant `x_c`, replace row `j` by `x_c`, rebuild the
/// conjugate posterior and report `KL(clean ‖ contaminated)`. The weight
/// function is held fixed.
#[allow(clippy::too_many_arguments)]
pub fn pif_kl_probe(
    prior: &GaussianPrior,
    data: &Dataset,
    model: &(impl ExponentialFamily + ?Sized),
    weight: &WeightFunction,
    beta: f64,
    j: usize,
    contaminants: &[Vec<f64>],
) -> Result<Vec<PifPoint>> {
    if j >= data.len() {
        return Err(Error::InvalidArgument(format!(
            "row {j} outside dataset of {} rows",
            data.len()
        )));
    }
    let terms = conj_terms(data, model, weight)?;
    let n = data.len();
    let clean = nsm_conj_posterior(prior, &terms.mean()?, beta, n)?;
    contaminants
        .iter()
        .map(|xc| {
            let f = model.features(xc)?;
            let (a, b, c) = conj_point_terms(&f, weight.weight_sq(xc), &weight.weight_sq_grad(xc));
            let mut t = terms.clone();
            t.a[j] = a;
            t.b[j] = b;
            t.c[j] = c;
            let post = nsm_conj_posterior(prior, &t.mean()?, beta, n)?;
            Ok(PifPoint {
                contaminant: xc.clone(),
                kl: gaussian_kl(&clean, &post)?,
            })
        })
        .collect()
}
