//! Inverse multi-quadratic weights with robust centring.
//!
//! `w(x) = (1 + r²)^(−1/ζ)` with `r² = (x − ν)ᵀ Ξ⁻¹ (x − ν)`, where `ν` and
//! `Ξ` come from a robust location/scatter estimate of the observed data.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{chi2_quantile, median};

/// Diagonal floor applied to degenerate scatter estimates.
pub const SCATTER_FLOOR: f64 = 1e-8;
/// Normal-consistency factor for the median absolute deviation.
pub const MAD_SCALE: f64 = 1.4826;
pub const MCD_STARTS: usize = 200;
pub const MCD_MAX_CSTEPS: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScatterMethod {
    Mcd,
    MedianMad,
}

impl ScatterMethod {
    /// MCD when it is well posed and affordable, median-MAD otherwise.
    pub fn default_for(n: usize, d: usize) -> Self {
        if d <= 10 && n >= 50 {
            ScatterMethod::Mcd
        } else {
            ScatterMethod::MedianMad
        }
    }
}

impl fmt::Display for ScatterMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScatterMethod::Mcd => "mcd",
            ScatterMethod::MedianMad => "median-mad",
        })
    }
}

impl FromStr for ScatterMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mcd" => Ok(ScatterMethod::Mcd),
            "median-mad" => Ok(ScatterMethod::MedianMad),
            other => Err(Error::InvalidArgument(format!(
                "unknown scatter method `{other}`"
            ))),
        }
    }
}

/// Robust location `ν̂` and scatter `Ξ̂`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationScatter {
    pub location: DVector<f64>,
    pub scatter: DMatrix<f64>,
    pub method: ScatterMethod,
    /// Set when the diagonal floor had to be applied.
    pub floored: bool,
}

fn floor_scatter(mut s: DMatrix<f64>, context: &str) -> (DMatrix<f64>, bool) {
    let mut floored = false;
    for i in 0..s.nrows() {
        if !(s[(i, i)] >= SCATTER_FLOOR) {
            s[(i, i)] = SCATTER_FLOOR;
            floored = true;
        }
    }
    if s.clone().cholesky().is_none() {
        s += DMatrix::identity(s.nrows(), s.nrows()) * SCATTER_FLOOR;
        floored = true;
    }
    if floored {
        log::warn!("{context}: degenerate scatter, diagonal floored at {SCATTER_FLOOR:e}");
    }
    (s, floored)
}

/// Coordinate-wise median and diagonal `(1.4826·MAD)²` scatter.
pub fn median_mad(data: &DMatrix<f64>) -> Result<LocationScatter> {
    let (n, d) = data.shape();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "median-mad needs n ≥ 2, got {n}"
        )));
    }
    let mut loc = DVector::zeros(d);
    let mut scatter = DMatrix::zeros(d, d);
    for j in 0..d {
        let col: Vec<f64> = data.column(j).iter().copied().collect();
        let m = median(&col);
        let dev: Vec<f64> = col.iter().map(|v| (v - m).abs()).collect();
        let s = MAD_SCALE * median(&dev);
        loc[j] = m;
        scatter[(j, j)] = s * s;
    }
    let (scatter, floored) = floor_scatter(scatter, "median-mad");
    Ok(LocationScatter {
        location: loc,
        scatter,
        method: ScatterMethod::MedianMad,
        floored,
    })
}

fn subset_moments(data: &DMatrix<f64>, idx: &[usize]) -> (DVector<f64>, DMatrix<f64>) {
    let d = data.ncols();
    let h = idx.len() as f64;
    let mut mean = DVector::zeros(d);
    for &i in idx {
        mean += data.row(i).transpose();
    }
    mean /= h;
    let mut cov = DMatrix::zeros(d, d);
    for &i in idx {
        let r = data.row(i).transpose() - &mean;
        cov += &r * r.transpose();
    }
    cov /= h;
    (mean, cov)
}

/// Squared Mahalanobis distances of every row; `None` if `cov` is singular.
fn mahalanobis_all(
    data: &DMatrix<f64>,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
) -> Option<Vec<f64>> {
    let prec = cov.clone().cholesky()?.inverse();
    let d = data.ncols();
    let mut r = vec![0.0; d];
    Some(
        (0..data.nrows())
            .map(|i| {
                for j in 0..d {
                    r[j] = data[(i, j)] - mean[j];
                }
                let mut q = 0.0;
                for a in 0..d {
                    let mut s = 0.0;
                    for b in 0..d {
                        s += prec[(a, b)] * r[b];
                    }
                    q += r[a] * s;
                }
                q
            })
            .collect(),
    )
}

fn log_det(cov: &DMatrix<f64>) -> f64 {
    match cov.clone().cholesky() {
        Some(c) => 2.0 * c.l().diagonal().iter().map(|v| v.ln()).sum::<f64>(),
        None => f64::NEG_INFINITY,
    }
}

fn smallest(dist: &[f64], h: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dist.len()).collect();
    idx.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
    idx.truncate(h);
    idx.sort_unstable();
    idx
}

/// Runs at most `steps` C-steps from a subset; returns `(log det, subset)`.
fn concentrate(
    data: &DMatrix<f64>,
    mut subset: Vec<usize>,
    h: usize,
    steps: usize,
) -> (f64, Vec<usize>) {
    let (mut mean, mut cov) = subset_moments(data, &subset);
    let mut ld = log_det(&cov);
    for _ in 0..steps {
        if ld == f64::NEG_INFINITY {
            break;
        }
        let Some(dist) = mahalanobis_all(data, &mean, &cov) else {
            break;
        };
        let next = smallest(&dist, h);
        if next == subset {
            break;
        }
        let (m2, c2) = subset_moments(data, &next);
        let ld2 = log_det(&c2);
        if ld2 >= ld {
            break;
        }
        subset = next;
        mean = m2;
        cov = c2;
        ld = ld2;
    }
    (ld, subset)
}

/// Rescales `cov` so the median squared distance matches `χ²_{d, 0.5}`.
fn consistency_scaled(
    data: &DMatrix<f64>,
    mean: &DVector<f64>,
    cov: DMatrix<f64>,
    d: usize,
) -> Result<DMatrix<f64>> {
    let dist = mahalanobis_all(data, mean, &cov).expect("floored scatter is positive definite");
    let factor = median(&dist) / chi2_quantile(0.5, d)?;
    Ok(if factor.is_finite() && factor > 0.0 {
        cov * factor
    } else {
        cov
    })
}

/// FAST-MCD with elemental starts, C-steps, consistency scaling and one
/// reweighting step.
pub fn fast_mcd(data: &DMatrix<f64>, rng: &mut impl Rng) -> Result<LocationScatter> {
    let (n, d) = data.shape();
    if n < d + 2 {
        return Err(Error::InvalidArgument(format!(
            "mcd needs n ≥ d + 2 (n={n}, d={d})"
        )));
    }
    let h = (n + d + 1).div_ceil(2);
    // elemental (d+1)-subsets, grown until their covariance is non-singular
    let starts: Vec<Vec<usize>> = (0..MCD_STARTS)
        .map(|_| {
            let mut order: Vec<usize> = sample(rng, n, (d + 1).min(n)).into_vec();
            loop {
                let mut idx = order.clone();
                idx.sort_unstable();
                let (_, cov) = subset_moments(data, &idx);
                if cov.cholesky().is_some() || order.len() >= n {
                    break;
                }
                // grow a singular elemental set by one unused point
                let extra = loop {
                    let c = rng.random_range(0..n);
                    if !order.contains(&c) {
                        break c;
                    }
                };
                order.push(extra);
            }
            order
        })
        .collect();
    // two C-steps per start, then the ten best are iterated to convergence
    let mut candidates: Vec<(f64, usize, Vec<usize>)> = starts
        .into_par_iter()
        .enumerate()
        .map(|(s, start)| {
            let (mean, cov) = subset_moments(data, &start);
            let subset = match mahalanobis_all(data, &mean, &cov) {
                Some(dist) => smallest(&dist, h),
                None => {
                    let mut idx = start.clone();
                    idx.truncate(h);
                    idx.sort_unstable();
                    idx
                }
            };
            let (ld, subset) = concentrate(data, subset, h, 2);
            (ld, s, subset)
        })
        .collect();
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    candidates.truncate(10);
    let best = candidates
        .into_par_iter()
        .map(|(_, s, subset)| {
            let (ld, subset) = concentrate(data, subset, h, MCD_MAX_CSTEPS);
            (ld, s, subset)
        })
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .expect("at least one start");
    let (mean, raw) = subset_moments(data, &best.2);
    let (raw, floored) = floor_scatter(raw, "mcd");
    let raw = consistency_scaled(data, &mean, raw, d)?;
    // reweighting: moments of the points inside the 97.5% ellipsoid
    let cutoff = chi2_quantile(0.975, d)?;
    let dist = mahalanobis_all(data, &mean, &raw).expect("floored scatter is positive definite");
    let inliers: Vec<usize> = (0..n).filter(|&i| dist[i] <= cutoff).collect();
    let (location, scatter, floored2) = if inliers.len() > d {
        let (m, c) = subset_moments(data, &inliers);
        let (c, f) = floor_scatter(c, "mcd");
        let c = consistency_scaled(data, &m, c, d)?;
        (m, c, f)
    } else {
        (mean, raw, false)
    };
    let (scatter, floored3) = floor_scatter(scatter, "mcd");
    Ok(LocationScatter {
        location,
        scatter,
        method: ScatterMethod::Mcd,
        floored: floored || floored2 || floored3,
    })
}

pub fn robust_location_scatter(
    data: &DMatrix<f64>,
    method: ScatterMethod,
    rng: &mut impl Rng,
) -> Result<LocationScatter> {
    match method {
        ScatterMethod::Mcd => fast_mcd(data, rng),
        ScatterMethod::MedianMad => median_mad(data),
    }
}

/// `w(x) = (1 + (x−ν)ᵀP(x−ν))^(−1/ζ)` with precision `P = Ξ⁻¹`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImqWeight {
    pub zeta: f64,
    pub location: DVector<f64>,
    pub precision: DMatrix<f64>,
}

impl ImqWeight {
    pub fn new(zeta: f64, location: DVector<f64>, scatter: &DMatrix<f64>) -> Result<Self> {
        if !(zeta > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "ζ must be positive, got {zeta}"
            )));
        }
        let chol = scatter
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite {
                context: "IMQ scatter".into(),
                condition: crate::stats::condition_number(scatter),
            })?;
        let precision = chol.inverse();
        let precision = 0.5 * (&precision + precision.transpose());
        Ok(Self {
            zeta,
            location,
            precision,
        })
    }

    pub fn from_estimate(zeta: f64, est: &LocationScatter) -> Result<Self> {
        Self::new(zeta, est.location.clone(), &est.scatter)
    }

    /// Fits `ν̂, Ξ̂` on `data` with `method` (default choice when `None`).
    pub fn fit(
        data: &DMatrix<f64>,
        zeta: f64,
        method: Option<ScatterMethod>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let method =
            method.unwrap_or_else(|| ScatterMethod::default_for(data.nrows(), data.ncols()));
        Self::from_estimate(zeta, &robust_location_scatter(data, method, rng)?)
    }

    pub fn radius_sq(&self, x: &[f64]) -> f64 {
        let r = DVector::from_column_slice(x) - &self.location;
        r.dot(&(&self.precision * &r))
    }

    pub fn weight(&self, x: &[f64]) -> f64 {
        (1.0 + self.radius_sq(x)).powf(-1.0 / self.zeta)
    }

    /// `∇ₓ w² = −(4/ζ)(1 + r²)^(−2/ζ − 1) P (x − ν)`.
    pub fn weight_sq_grad(&self, x: &[f64]) -> DVector<f64> {
        let r = DVector::from_column_slice(x) - &self.location;
        let pr = &self.precision * &r;
        let r2 = r.dot(&pr);
        pr * (-(4.0 / self.zeta) * (1.0 + r2).powf(-2.0 / self.zeta - 1.0))
    }

    /// `(4/ζ) λ_max(P) / √λ_min(P)`, an upper bound on `‖∇w²‖`.
    pub fn grad_bound(&self) -> f64 {
        let ev = crate::stats::sym_eigenvalues(&self.precision);
        (4.0 / self.zeta) * ev[ev.len() - 1] / ev[0].sqrt()
    }
}

/// Weight used by the score-matching loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum WeightFunction {
    Imq(ImqWeight),
    /// `w ≡ 1`, the unweighted objective.
    Unit,
}

impl WeightFunction {
    pub fn weight(&self, x: &[f64]) -> f64 {
        match self {
            WeightFunction::Imq(w) => w.weight(x),
            WeightFunction::Unit => 1.0,
        }
    }

    pub fn weight_sq(&self, x: &[f64]) -> f64 {
        let w = self.weight(x);
        w * w
    }

    pub fn weight_sq_grad(&self, x: &[f64]) -> DVector<f64> {
        match self {
            WeightFunction::Imq(w) => w.weight_sq_grad(x),
            WeightFunction::Unit => DVector::zeros(x.len()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn identical_points_give_that_point_and_floored_scatter() {
        let data = DMatrix::from_fn(60, 2, |_, j| [1.5, -2.0][j]);
        for method in [ScatterMethod::Mcd, ScatterMethod::MedianMad] {
            let est = robust_location_scatter(&data, method, &mut seeded(0)).unwrap();
            assert_eq!(est.location.as_slice(), &[1.5, -2.0]);
            assert!(est.floored);
            assert!(est.scatter.diagonal().iter().all(|&v| v >= SCATTER_FLOOR));
        }
    }

    #[test]
    fn median_mad_hand_example() {
        let data = DMatrix::from_column_slice(5, 1, &[1.0, 2.0, 3.0, 4.0, 100.0]);
        let est = median_mad(&data).unwrap();
        assert_eq!(est.location[0], 3.0);
        assert!((est.scatter[(0, 0)] - MAD_SCALE * MAD_SCALE).abs() < 1e-15);
    }

    #[test]
    fn mcd_resists_ten_percent_contamination() {
        let (n, d) = (500, 2);
        let se = 1.0 / (n as f64).sqrt();
        let mut robust_ok = 0;
        let mut mean_ok = 0;
        for seed in 0..100 {
            let mut rng = seeded(seed);
            let data = DMatrix::from_fn(n, d, |i, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                if i < n / 10 {
                    8.0 + z
                } else {
                    z
                }
            });
            let est = fast_mcd(&data, &mut rng).unwrap();
            if est.location.norm() < 5.0 * se {
                robust_ok += 1;
            }
            let (mean, _) = crate::stats::sample_moments(&data);
            if mean.norm() < 5.0 * se {
                mean_ok += 1;
            }
        }
        assert_eq!(robust_ok, 100);
        assert_eq!(mean_ok, 0);
    }

    #[test]
    fn mcd_scatter_is_consistent_on_clean_gaussians() {
        let mut rng = seeded(3);
        let data = DMatrix::from_fn(2000, 2, |_, j| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * [1.0, 3.0][j]
        });
        let est = fast_mcd(&data, &mut rng).unwrap();
        assert!((est.scatter[(0, 0)] - 1.0).abs() < 0.15, "{}", est.scatter);
        assert!((est.scatter[(1, 1)] - 9.0).abs() < 1.35);
    }

    #[test]
    fn weight_at_centre_and_plug_in() {
        let w = ImqWeight::new(2.0, DVector::zeros(2), &DMatrix::identity(2, 2)).unwrap();
        assert_eq!(w.weight(&[0.0, 0.0]), 1.0);
        assert!(w.weight_sq_grad(&[0.0, 0.0]).iter().all(|&v| v == 0.0));
        assert!((w.weight(&[0.6, 0.8]) - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn unit_weight_is_one_with_zero_gradient() {
        let w = WeightFunction::Unit;
        assert_eq!(w.weight(&[1e9]), 1.0);
        assert_eq!(w.weight_sq_grad(&[1e9])[0], 0.0);
    }

    fn random_weight(seed: u64, zeta: f64) -> ImqWeight {
        let mut rng = seeded(seed);
        let a = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
        let scatter = &a * a.transpose() + DMatrix::identity(3, 3) * 0.2;
        let loc = DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
        ImqWeight::new(zeta, loc, &scatter).unwrap()
    }

    proptest! {
        #[test]
        fn weight_sq_gradient_matches_finite_differences(
            seed in 0u64..1000,
            zeta in 0.3f64..3.0,
            x in proptest::collection::vec(-4.0f64..4.0, 3),
        ) {
            let w = random_weight(seed, zeta);
            let g = w.weight_sq_grad(&x);
            let h = 1e-3;
            let w2 = |x: &[f64], i: usize, t: f64| {
                let mut p = x.to_vec();
                p[i] += t;
                w.weight(&p).powi(2)
            };
            for i in 0..3 {
                // five-point stencil: truncation O(h⁴)
                let fd = (8.0 * (w2(&x, i, h) - w2(&x, i, -h)) - (w2(&x, i, 2.0 * h) - w2(&x, i, -2.0 * h)))
                    / (12.0 * h);
                let rel = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1e-6);
                prop_assert!(rel < 1e-8, "{} vs {}", g[i], fd);
            }
        }

        #[test]
        fn weight_is_in_unit_interval_and_decreasing_in_radius(
            seed in 0u64..1000,
            zeta in 0.3f64..3.0,
            dir in proptest::collection::vec(-1.0f64..1.0, 3),
            t in 0.01f64..100.0,
        ) {
            let w = random_weight(seed, zeta);
            let x1: Vec<f64> = (0..3).map(|i| w.location[i] + t * dir[i]).collect();
            let x2: Vec<f64> = (0..3).map(|i| w.location[i] + 2.0 * t * dir[i]).collect();
            let (w1, w2) = (w.weight(&x1), w.weight(&x2));
            prop_assert!(w1 > 0.0 && w1 <= 1.0);
            prop_assert!(w2 <= w1);
        }
    }

    #[test]
    fn weight_gradient_never_exceeds_analytic_bound() {
        for seed in 0..20 {
            let w = random_weight(seed, [0.5, 1.0, 2.0][seed as usize % 3]);
            let bound = w.grad_bound();
            let mut rng = seeded(seed + 99);
            for k in 0..=16 {
                let r = 10f64.powf(k as f64 / 2.0);
                for _ in 0..20 {
                    let u: Vec<f64> = (0..3).map(|_| StandardNormal.sample(&mut rng)).collect();
                    let norm = u.iter().map(|v: &f64| v * v).sum::<f64>().sqrt();
                    let x: Vec<f64> = (0..3).map(|i| w.location[i] + r * u[i] / norm).collect();
                    assert!(w.weight_sq_grad(&x).norm() <= bound);
                }
            }
        }
    }
}
