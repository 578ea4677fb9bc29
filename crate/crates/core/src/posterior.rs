//! Posterior assembly: the closed-form conjugate update, point estimates,
//! and slice-sampled generalised and likelihood posteriors.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::loss::{nsm_loss, ConjCoefficients};
use crate::sampler::{slice_sample, SliceConfig};
use crate::stats::{condition_number, LN_2PI};
use crate::surrogate::ConditionalDensitySurrogate;
use crate::weights::WeightFunction;

fn spd_cholesky(m: &DMatrix<f64>, context: &'static str) -> Result<Cholesky<f64, Dyn>> {
    let sym = (m + m.transpose()) * 0.5;
    if sym.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite(context));
    }
    sym.clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite {
            context: context.into(),
            condition: condition_number(&sym),
        })
}

fn log_normal_density(chol: &Cholesky<f64, Dyn>, mean: &DVector<f64>, theta: &[f64]) -> f64 {
    let r = DVector::from_column_slice(theta) - mean;
    let z = chol
        .l()
        .solve_lower_triangular(&r)
        .expect("cholesky factor is invertible");
    let log_det: f64 = chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
    -0.5 * (z.norm_squared() + log_det + mean.len() as f64 * LN_2PI)
}

fn normal_samples(
    chol: &Cholesky<f64, Dyn>,
    mean: &DVector<f64>,
    count: usize,
    rng: &mut impl Rng,
) -> DMatrix<f64> {
    let d = mean.len();
    let l = chol.l();
    let mut out = DMatrix::zeros(count, d);
    for i in 0..count {
        let z = DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
        let draw = mean + &l * z;
        out.row_mut(i).copy_from(&draw.transpose());
    }
    out
}

/// `N(μ, Σ)` prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrior {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianPrior {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::dim("prior covariance", mean.len(), cov.nrows()));
        }
        spd_cholesky(&cov, "prior covariance")?;
        Ok(Self { mean, cov })
    }

    pub fn diagonal(mean: &[f64], variances: &[f64]) -> Result<Self> {
        if mean.len() != variances.len() {
            return Err(Error::dim("prior variances", mean.len(), variances.len()));
        }
        Self::new(
            DVector::from_column_slice(mean),
            DMatrix::from_diagonal(&DVector::from_column_slice(variances)),
        )
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn chol(&self) -> Cholesky<f64, Dyn> {
        spd_cholesky(&self.cov, "prior covariance").expect("validated at construction")
    }

    pub fn precision(&self) -> DMatrix<f64> {
        self.chol().inverse()
    }

    pub fn log_density(&self, theta: &[f64]) -> f64 {
        log_normal_density(&self.chol(), &self.mean, theta)
    }

    pub fn marginal_sd(&self) -> Vec<f64> {
        self.cov.diagonal().iter().map(|v| v.sqrt()).collect()
    }

    pub fn sample(&self, count: usize, rng: &mut impl Rng) -> DMatrix<f64> {
        normal_samples(&self.chol(), &self.mean, count, rng)
    }

    /// Slice settings with widths equal to the prior marginal sd.
    pub fn slice_config(&self) -> SliceConfig {
        SliceConfig::new(self.marginal_sd())
    }
}

/// Closed-form Gaussian posterior with the learning rate and weight it was
/// built with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPosterior {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub beta: f64,
    pub n: usize,
    #[serde(default)]
    pub provenance: String,
}

impl GaussianPosterior {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_density(&self, theta: &[f64]) -> Result<f64> {
        Ok(log_normal_density(
            &spd_cholesky(&self.cov, "posterior covariance")?,
            &self.mean,
            theta,
        ))
    }

    pub fn sample(&self, count: usize, rng: &mut impl Rng) -> Result<DMatrix<f64>> {
        Ok(normal_samples(
            &spd_cholesky(&self.cov, "posterior covariance")?,
            &self.mean,
            count,
            rng,
        ))
    }

    /// `(θ − μ)ᵀ Σ⁻¹ (θ − μ)`.
    pub fn mahalanobis_sq(&self, theta: &[f64]) -> Result<f64> {
        if theta.len() != self.dim() {
            return Err(Error::dim("posterior θ", self.dim(), theta.len()));
        }
        let chol = spd_cholesky(&self.cov, "posterior covariance")?;
        let r = DVector::from_column_slice(theta) - &self.mean;
        let z = chol
            .l()
            .solve_lower_triangular(&r)
            .expect("cholesky factor is invertible");
        Ok(z.norm_squared())
    }
}

/// Precision `Σ⁻¹ + 2βnA`, mean `Σ_post (Σ⁻¹μ − 2βnB)`.
pub fn nsm_conj_posterior(
    prior: &GaussianPrior,
    coeffs: &ConjCoefficients,
    beta: f64,
    n: usize,
) -> Result<GaussianPosterior> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "β must be positive and finite, got {beta}"
        )));
    }
    if coeffs.theta_dim() != prior.dim() {
        return Err(Error::dim(
            "coefficients vs prior",
            prior.dim(),
            coeffs.theta_dim(),
        ));
    }
    let prior_prec = prior.precision();
    let k = 2.0 * beta * n as f64;
    let precision = &prior_prec + &coeffs.a * k;
    let chol = spd_cholesky(&precision, "posterior precision")?;
    let rhs = &prior_prec * &prior.mean - &coeffs.b * k;
    let mean = chol.solve(&rhs);
    let cov = chol.inverse();
    Ok(GaussianPosterior {
        mean,
        cov: (&cov + cov.transpose()) * 0.5,
        beta,
        n,
        provenance: String::new(),
    })
}

/// `10⁻² Tr(A)/d_Θ + 10⁻¹²`.
pub fn ridge_lambda(a: &DMatrix<f64>) -> f64 {
    1e-2 * a.trace() / a.nrows() as f64 + 1e-12
}

/// `θ̂ = −(A + λI)⁻¹ B`, with `λ` from [`ridge_lambda`] when `None`.
pub fn theta_hat_closed_form(
    coeffs: &ConjCoefficients,
    ridge: Option<f64>,
) -> Result<DVector<f64>> {
    let lambda = ridge.unwrap_or_else(|| ridge_lambda(&coeffs.a));
    let d = coeffs.theta_dim();
    let m = &coeffs.a + DMatrix::identity(d, d) * lambda;
    let chol = spd_cholesky(&m, "ridge system")?;
    Ok(-chol.solve(&coeffs.b))
}

/// Nelder-Mead settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NelderMeadConfig {
    pub max_evals: usize,
    /// Stop once the simplex diameter falls below this.
    pub tol: f64,
    /// Initial simplex edge per coordinate.
    pub initial_step: Vec<f64>,
}

impl NelderMeadConfig {
    pub fn new(initial_step: Vec<f64>) -> Self {
        Self {
            max_evals: 5000,
            tol: 1e-6,
            initial_step,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub theta: DVector<f64>,
    pub value: f64,
    pub evals: usize,
    pub converged: bool,
}

/// Derivative-free simplex minimisation; non-finite values count as `+∞`.
pub fn theta_hat_optimize<F>(mut loss: F, init: &[f64], cfg: &NelderMeadConfig) -> Result<Minimum>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let d = init.len();
    if cfg.initial_step.len() != d {
        return Err(Error::dim("simplex steps", d, cfg.initial_step.len()));
    }
    let evals = std::cell::Cell::new(0usize);
    let mut f = |x: &DVector<f64>| -> Result<f64> {
        evals.set(evals.get() + 1);
        let v = loss(x.as_slice())?;
        Ok(if v.is_finite() { v } else { f64::INFINITY })
    };
    let x0 = DVector::from_column_slice(init);
    let f0 = f(&x0)?;
    if !f0.is_finite() {
        return Err(Error::InvalidInitialPoint);
    }
    let mut simplex: Vec<(DVector<f64>, f64)> = vec![(x0.clone(), f0)];
    for i in 0..d {
        let mut v = x0.clone();
        v[i] += cfg.initial_step[i];
        let fv = f(&v)?;
        simplex.push((v, fv));
    }
    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    let mut converged = false;
    loop {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let diameter = simplex[1..]
            .iter()
            .map(|(v, _)| (v - &simplex[0].0).amax())
            .fold(0.0, f64::max);
        if diameter < cfg.tol {
            converged = true;
            break;
        }
        if evals.get() >= cfg.max_evals {
            break;
        }
        let centroid = simplex[..d]
            .iter()
            .fold(DVector::zeros(d), |acc, (v, _)| acc + v)
            / d as f64;
        let worst = simplex[d].clone();
        let xr = &centroid + (&centroid - &worst.0) * alpha;
        let fr = f(&xr)?;
        if fr < simplex[0].1 {
            let xe = &centroid + (&xr - &centroid) * gamma;
            let fe = f(&xe)?;
            simplex[d] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[d - 1].1 {
            simplex[d] = (xr, fr);
        } else {
            let (xc, fc) = if fr < worst.1 {
                let xc = &centroid + (&xr - &centroid) * rho;
                let fc = f(&xc)?;
                (xc, fc)
            } else {
                let xc = &centroid + (&worst.0 - &centroid) * rho;
                let fc = f(&xc)?;
                (xc, fc)
            };
            if fc < worst.1.min(fr) {
                simplex[d] = (xc, fc);
            } else {
                let best = simplex[0].0.clone();
                for vertex in simplex.iter_mut().skip(1) {
                    let v = &best + (&vertex.0 - &best) * sigma;
                    let fv = f(&v)?;
                    *vertex = (v, fv);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (theta, value) = simplex.swap_remove(0);
    Ok(Minimum {
        theta,
        value,
        evals: evals.get(),
        converged,
    })
}

/// Samples `∝ exp(−β n L(θ)) π(θ)` with `L` the weighted score-matching loss.
#[allow(clippy::too_many_arguments)]
pub fn nsm_sample(
    prior: &GaussianPrior,
    data: &Dataset,
    model: &(impl ConditionalDensitySurrogate + ?Sized),
    weight: &WeightFunction,
    beta: f64,
    count: usize,
    cfg: &SliceConfig,
    rng: &mut impl Rng,
) -> Result<DMatrix<f64>> {
    let n = data.len() as f64;
    let init: Vec<f64> = prior.mean.iter().copied().collect();
    slice_sample(
        |theta| {
            let lp = prior.log_density(theta);
            if n == 0.0 {
                return Ok(lp);
            }
            Ok(lp - beta * n * nsm_loss(theta, data, model, weight)?)
        },
        &init,
        count,
        cfg,
        rng,
    )
}

/// Samples `∝ Πᵢ q(xᵢ | θ) π(θ)`.
pub fn nle_sample(
    prior: &GaussianPrior,
    data: &Dataset,
    model: &(impl ConditionalDensitySurrogate + ?Sized),
    count: usize,
    cfg: &SliceConfig,
    rng: &mut impl Rng,
) -> Result<DMatrix<f64>> {
    let init: Vec<f64> = prior.mean.iter().copied().collect();
    slice_sample(
        |theta| {
            let lp = prior.log_density(theta);
            if data.is_empty() {
                return Ok(lp);
            }
            Ok(lp + model.log_likelihood(&data.values, theta)?)
        },
        &init,
        count,
        cfg,
        rng,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::{conj_coefficients, conj_point_terms, conj_terms};
    use crate::stats::{batch_means_se, sym_eigenvalues};
    use crate::surrogate::{ExponentialFamily, GaussianLinearModel};
    use crate::weights::ImqWeight;
    use proptest::prelude::*;

    fn coeffs(a: &[f64], b: &[f64], c: f64, n: usize) -> ConjCoefficients {
        let d = b.len();
        ConjCoefficients {
            a: DMatrix::from_row_slice(d, d, a),
            b: DVector::from_column_slice(b),
            c,
            n,
        }
    }

    fn column_mean(s: &DMatrix<f64>, j: usize) -> (f64, f64) {
        let col: Vec<f64> = s.column(j).iter().copied().collect();
        (
            col.iter().sum::<f64>() / col.len() as f64,
            batch_means_se(&col, 40),
        )
    }

    #[test]
    fn vanishing_learning_rate_returns_prior() {
        let prior = GaussianPrior::diagonal(&[1.0, -2.0], &[2.0, 0.5]).unwrap();
        let post = nsm_conj_posterior(
            &prior,
            &coeffs(&[3.0, 1.0, 1.0, 2.0], &[0.4, -1.0], 0.0, 50),
            1e-15,
            50,
        )
        .unwrap();
        assert!((&post.mean - &prior.mean).amax() < 1e-10);
        assert!((&post.cov - &prior.cov).amax() < 1e-10);
    }

    #[test]
    fn one_dimensional_posterior_matches_quadrature() {
        let (a, b, c, n, beta) = (1.7, -0.6, 0.3, 25usize, 0.4);
        let (mu0, var0) = (0.5, 2.0);
        let prior = GaussianPrior::diagonal(&[mu0], &[var0]).unwrap();
        let post = nsm_conj_posterior(&prior, &coeffs(&[a], &[b], c, n), beta, n).unwrap();
        let log_p = |t: f64| {
            -beta * n as f64 * (a * t * t + 2.0 * b * t + c) - 0.5 * (t - mu0).powi(2) / var0
        };
        let (lo, hi, m) = (-3.0, 3.0, 200_001);
        let h = (hi - lo) / (m - 1) as f64;
        let peak = log_p(post.mean[0]);
        let (mut z, mut s1, mut s2) = (0.0, 0.0, 0.0);
        for i in 0..m {
            let t = lo + h * i as f64;
            let w = if i == 0 || i == m - 1 { 0.5 } else { 1.0 } * (log_p(t) - peak).exp();
            z += w;
            s1 += w * t;
            s2 += w * t * t;
        }
        let mean = s1 / z;
        let var = s2 / z - mean * mean;
        assert!(
            (post.mean[0] - mean).abs() <= 1e-6 * mean.abs(),
            "{} vs {mean}",
            post.mean[0]
        );
        assert!(
            (post.cov[(0, 0)] - var).abs() <= 1e-6 * var,
            "{} vs {var}",
            post.cov[(0, 0)]
        );
    }

    fn location_data(n: usize, seed: u64) -> Dataset {
        let mut rng = crate::rng::seeded(seed);
        Dataset::new(DMatrix::from_fn(n, 2, |_, j| {
            0.5 * j as f64 + {
                let z: f64 = StandardNormal.sample(&mut rng);
                z
            }
        }))
    }

    #[test]
    fn zero_weight_datum_changes_nothing() {
        let model = GaussianLinearModel::location(2);
        let w = WeightFunction::Imq(
            ImqWeight::new(1.0, DVector::zeros(2), &DMatrix::identity(2, 2)).unwrap(),
        );
        let data = location_data(30, 1);
        let prior = GaussianPrior::diagonal(&[0.0, 0.0], &[4.0, 4.0]).unwrap();
        let mut terms = conj_terms(&data, &model, &w).unwrap();
        let before = nsm_conj_posterior(&prior, &terms.mean().unwrap(), 0.7, 30).unwrap();
        let f = model.features(&[100.0, -3.0]).unwrap();
        let (a, b, c) = conj_point_terms(&f, 0.0, &DVector::zeros(2));
        terms.a.push(a);
        terms.b.push(b);
        terms.c.push(c);
        let after = nsm_conj_posterior(&prior, &terms.mean().unwrap(), 0.7, 31).unwrap();
        assert!((&before.mean - &after.mean).amax() < 1e-12);
        assert!((&before.cov - &after.cov).amax() < 1e-12);
    }

    proptest! {
        #[test]
        fn adding_data_never_widens_the_posterior(n in 1usize..20, seed in 0u64..500, beta in 0.01f64..5.0) {
            let model = GaussianLinearModel::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.3, -0.2, 0.8]));
            let w = WeightFunction::Imq(ImqWeight::new(1.0, DVector::zeros(2), &DMatrix::identity(2, 2)).unwrap());
            let prior = GaussianPrior::diagonal(&[0.0, 1.0], &[3.0, 0.5]).unwrap();
            let data = location_data(n + 1, seed);
            let sub = Dataset::new(data.values.rows(0, n).into_owned());
            let small = nsm_conj_posterior(&prior, &conj_coefficients(&sub, &model, &w).unwrap(), beta, n).unwrap();
            let big = nsm_conj_posterior(&prior, &conj_coefficients(&data, &model, &w).unwrap(), beta, n + 1).unwrap();
            prop_assert!(sym_eigenvalues(&(&small.cov - &big.cov))[0] >= -1e-10);
            prop_assert!(sym_eigenvalues(&(&prior.cov - &small.cov))[0] >= -1e-10);
            let (es, eb) = (sym_eigenvalues(&small.cov), sym_eigenvalues(&big.cov));
            for (s, b) in es.iter().zip(&eb) {
                prop_assert!(*b <= s + 1e-10);
            }
        }
    }

    #[test]
    fn ridge_estimator() {
        let v = [1.5, -0.5, 2.0];
        let c = coeffs(
            &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            &[-1.5, 0.5, -2.0],
            0.0,
            1,
        );
        let t = theta_hat_closed_form(&c, Some(0.0)).unwrap();
        assert!((t - DVector::from_column_slice(&v)).amax() < 1e-14);
        assert_eq!(ridge_lambda(&DMatrix::identity(4, 4)), 0.01 + 1e-12);
    }

    #[test]
    fn ridge_estimator_matches_grid_search() {
        let c = coeffs(&[2.0, 0.7, 0.7, 1.0], &[-0.9, 0.4], 0.0, 1);
        let lambda = ridge_lambda(&c.a);
        let t = theta_hat_closed_form(&c, None).unwrap();
        let step = 1e-3;
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for i in 0..=4000 {
            for j in 0..=4000 {
                let th = [-2.0 + step * i as f64, -2.0 + step * j as f64];
                let v = c.loss(&th) + lambda * (th[0] * th[0] + th[1] * th[1]);
                if v < best.0 {
                    best = (v, th[0], th[1]);
                }
            }
        }
        assert!(
            (t[0] - best.1).abs() <= step && (t[1] - best.2).abs() <= step,
            "{t} vs {best:?}"
        );
    }

    #[test]
    fn nelder_mead_quadratic_rosenbrock_and_fixed_point() {
        let bowl = |x: &[f64]| {
            Ok((x[0] - 1.0).powi(2) + 3.0 * (x[1] + 2.0).powi(2) + (x[0] - 1.0) * (x[1] + 2.0))
        };
        let m =
            theta_hat_optimize(bowl, &[0.0, 0.0], &NelderMeadConfig::new(vec![0.5, 0.5])).unwrap();
        assert!(
            (m.theta[0] - 1.0).abs() < 1e-5 && (m.theta[1] + 2.0).abs() < 1e-5,
            "{}",
            m.theta
        );

        let rosen = |x: &[f64]| Ok(100.0 * (x[1] - x[0] * x[0]).powi(2) + (1.0 - x[0]).powi(2));
        let cfg = NelderMeadConfig::new(vec![0.5, 0.5]);
        let m = theta_hat_optimize(rosen, &[-1.2, 1.0], &cfg).unwrap();
        assert!(m.value < 1e-6 && m.evals <= 5000, "{m:?}");

        let first =
            theta_hat_optimize(bowl, &[0.0, 0.0], &NelderMeadConfig::new(vec![0.5, 0.5])).unwrap();
        let restart = theta_hat_optimize(
            bowl,
            first.theta.as_slice(),
            &NelderMeadConfig::new(vec![0.5, 0.5]),
        )
        .unwrap();
        assert!((&restart.theta - &first.theta).amax() < 1e-5);
        assert!(restart.converged);
        assert!(matches!(
            theta_hat_optimize(|_| Ok(f64::NAN), &[0.0], &NelderMeadConfig::new(vec![1.0])),
            Err(Error::InvalidInitialPoint)
        ));
    }

    #[test]
    fn tiny_learning_rate_samples_prior() {
        let prior = GaussianPrior::diagonal(&[1.0, -1.0], &[0.25, 4.0]).unwrap();
        let data = location_data(20, 2);
        let mut rng = crate::rng::seeded(3);
        let s = nsm_sample(
            &prior,
            &data,
            &GaussianLinearModel::location(2),
            &WeightFunction::Unit,
            1e-12,
            4000,
            &prior.slice_config(),
            &mut rng,
        )
        .unwrap();
        for j in 0..2 {
            let (m, se) = column_mean(&s, j);
            assert!((m - prior.mean[j]).abs() < 4.0 * se, "{m} ± {se}");
        }
    }

    #[test]
    fn sampled_generalised_posterior_matches_closed_form() {
        let model = GaussianLinearModel::location(2);
        let w = WeightFunction::Imq(
            ImqWeight::new(
                1.0,
                DVector::from_column_slice(&[0.0, 0.5]),
                &DMatrix::identity(2, 2),
            )
            .unwrap(),
        );
        let data = location_data(40, 4);
        let prior = GaussianPrior::diagonal(&[0.0, 0.0], &[4.0, 4.0]).unwrap();
        let beta = 0.5;
        let exact = nsm_conj_posterior(
            &prior,
            &conj_coefficients(&data, &model, &w).unwrap(),
            beta,
            40,
        )
        .unwrap();
        let mut rng = crate::rng::seeded(5);
        let s = nsm_sample(
            &prior,
            &data,
            &model,
            &w,
            beta,
            8000,
            &prior.slice_config(),
            &mut rng,
        )
        .unwrap();
        let (_, cov) = crate::stats::sample_moments(&s);
        for j in 0..2 {
            let (m, se) = column_mean(&s, j);
            assert!(
                (m - exact.mean[j]).abs() < 4.0 * se,
                "mean {j}: {m} ± {se} vs {}",
                exact.mean[j]
            );
            // variance of a sample variance is about 2σ⁴/n_eff
            let var_se = exact.cov[(j, j)] * (2.0 / 8000.0f64).sqrt() * 2.0;
            assert!((cov[(j, j)] - exact.cov[(j, j)]).abs() < 4.0 * var_se);
        }
    }

    #[test]
    fn one_dimensional_samples_match_quadrature() {
        let model = GaussianLinearModel::location(1);
        let w = WeightFunction::Imq(
            ImqWeight::new(1.0, DVector::from_element(1, 0.2), &DMatrix::identity(1, 1)).unwrap(),
        );
        let data =
            Dataset::from_rows(&[vec![0.1], vec![-0.8], vec![1.4], vec![0.3], vec![6.0]]).unwrap();
        let prior = GaussianPrior::diagonal(&[0.0], &[1.0]).unwrap();
        let beta = 1.0;
        let mut rng = crate::rng::seeded(6);
        let cfg = SliceConfig {
            thin: 5,
            ..prior.slice_config()
        };
        let mut s: Vec<f64> = nsm_sample(&prior, &data, &model, &w, beta, 4000, &cfg, &mut rng)
            .unwrap()
            .iter()
            .copied()
            .collect();
        s.sort_by(f64::total_cmp);
        let log_p = |t: f64| {
            prior.log_density(&[t]) - beta * 5.0 * nsm_loss(&[t], &data, &model, &w).unwrap()
        };
        let (lo, hi, m) = (-5.0, 5.0, 20_001);
        let h = (hi - lo) / (m - 1) as f64;
        let dens: Vec<f64> = (0..m).map(|i| log_p(lo + h * i as f64).exp()).collect();
        let total: f64 = dens.windows(2).map(|p| 0.5 * (p[0] + p[1]) * h).sum();
        let (mut cdf, mut k, mut ks) = (0.0, 0, 0.0f64);
        for i in 1..m {
            cdf += 0.5 * (dens[i - 1] + dens[i]) * h / total;
            let t = lo + h * i as f64;
            while k < s.len() && s[k] <= t {
                let emp = (k + 1) as f64 / s.len() as f64;
                ks = ks.max((emp - cdf).abs());
                k += 1;
            }
        }
        assert!(ks < 0.03, "Kolmogorov distance {ks}");
    }

    #[test]
    fn likelihood_posterior_matches_normal_normal() {
        let model = GaussianLinearModel::location(1);
        let prior = GaussianPrior::diagonal(&[0.0], &[2.0]).unwrap();
        let data = Dataset::from_rows(
            &(0..15)
                .map(|i| vec![0.8 + 0.1 * (i as f64 - 7.0)])
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let n = 15.0;
        let post_var = 1.0 / (1.0 / 2.0 + n);
        let post_mean = post_var * data.values.sum();
        let run = |seed| {
            let mut rng = crate::rng::seeded(seed);
            nle_sample(&prior, &data, &model, 6000, &prior.slice_config(), &mut rng).unwrap()
        };
        let s = run(7);
        assert_eq!(s, run(7));
        let (m, se) = column_mean(&s, 0);
        assert!(
            (m - post_mean).abs() < 4.0 * se,
            "{m} ± {se} vs {post_mean}"
        );

        let empty = Dataset::new(DMatrix::zeros(0, 1));
        let mut rng = crate::rng::seeded(8);
        let p = nle_sample(
            &prior,
            &empty,
            &model,
            4000,
            &prior.slice_config(),
            &mut rng,
        )
        .unwrap();
        let (m, se) = column_mean(&p, 0);
        assert!(m.abs() < 4.0 * se);
    }

    #[test]
    fn singular_precision_reports_condition() {
        let prior = GaussianPrior::diagonal(&[0.0, 0.0], &[1.0, 1.0]).unwrap();
        let c = coeffs(&[-1e3, 0.0, 0.0, 1.0], &[0.0, 0.0], 0.0, 1);
        assert!(matches!(
            nsm_conj_posterior(&prior, &c, 1.0, 1),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }
}
