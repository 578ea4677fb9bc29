//! The weighted neural score-matching loss and its quadratic form for
//! exponential-family surrogates.
//!
//! Per datum the loss is `w²‖s‖² + 2(∇w²)ᵀs + 2w² Δ log q` with `s` the
//! surrogate score in x. For `log q = T(x)ᵀθ + b(x)` it is quadratic in θ:
//! `θᵀAθ + 2θᵀB + C`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::stats::pairwise_sum;
use crate::surrogate::{ConditionalDensitySurrogate, EbmFeatures, ExponentialFamily};
use crate::weights::WeightFunction;

/// Loss contribution of one datum given its score and Laplacian.
pub fn point_loss(weight: &WeightFunction, x: &[f64], score: &DVector<f64>, trace: f64) -> f64 {
    let w2 = weight.weight_sq(x);
    let g = weight.weight_sq_grad(x);
    w2 * score.norm_squared() + 2.0 * g.dot(score) + 2.0 * w2 * trace
}

fn check_data(data: &Dataset, x_dim: usize) -> Result<()> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    if data.dim() != x_dim {
        return Err(Error::dim("dataset columns", x_dim, data.dim()));
    }
    Ok(())
}

fn at_datum(i: usize) -> impl FnOnce(Error) -> Error {
    move |e| match e {
        Error::NonFinite { context } => Error::non_finite(format!("datum {i}: {context}")),
        other => other,
    }
}

/// Collects in index order so the first failing datum is reported.
fn first_error<T>(results: Vec<Result<T>>) -> Result<Vec<T>> {
    results.into_iter().collect()
}

/// Per-datum loss contributions at θ, in data order.
pub fn nsm_contributions(
    theta: &[f64],
    data: &Dataset,
    model: &(impl ConditionalDensitySurrogate + ?Sized),
    weight: &WeightFunction,
) -> Result<Vec<f64>> {
    check_data(data, model.x_dim())?;
    let results: Vec<Result<f64>> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let x = data.row(i);
            let (score, trace) = model.score_and_trace(&x, theta).map_err(at_datum(i))?;
            let l = point_loss(weight, &x, &score, trace);
            if l.is_finite() {
                Ok(l)
            } else {
                Err(Error::non_finite(format!("loss contribution of datum {i}")))
            }
        })
        .collect();
    first_error(results)
}

/// `(1/n) Σᵢ [w²‖s‖² + 2(∇w²)ᵀs + 2w² Δ log q]` at θ.
pub fn nsm_loss(
    theta: &[f64],
    data: &Dataset,
    model: &(impl ConditionalDensitySurrogate + ?Sized),
    weight: &WeightFunction,
) -> Result<f64> {
    let c = nsm_contributions(theta, data, model, weight)?;
    Ok(pairwise_sum(&c) / c.len() as f64)
}

/// Quadratic-form coefficients: loss(θ) = `θᵀAθ + 2θᵀB + C`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConjCoefficients {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub c: f64,
    pub n: usize,
}

impl ConjCoefficients {
    pub fn loss(&self, theta: &[f64]) -> f64 {
        let t = DVector::from_column_slice(theta);
        t.dot(&(&self.a * &t)) + 2.0 * t.dot(&self.b) + self.c
    }

    pub fn theta_dim(&self) -> usize {
        self.b.len()
    }
}

/// Per-datum quadratic terms; averaging them gives [`ConjCoefficients`].
#[derive(Debug, Clone, PartialEq)]
pub struct ConjTerms {
    pub a: Vec<DMatrix<f64>>,
    pub b: Vec<DVector<f64>>,
    pub c: Vec<f64>,
}

/// `(A_i, B_i, C_i)` for one datum. `B_i` includes the divergence term
/// `d_k = ∇w²·(∇T)_k + w² Δ T_k`.
pub fn conj_point_terms(
    f: &EbmFeatures,
    w2: f64,
    grad_w2: &DVector<f64>,
) -> (DMatrix<f64>, DVector<f64>, f64) {
    let g = &f.grad_t;
    let a = g * g.transpose() * w2;
    let b = g * &f.grad_b * w2 + g * grad_w2 + &f.trace_t * w2;
    let c = w2 * f.grad_b.norm_squared() + 2.0 * grad_w2.dot(&f.grad_b) + 2.0 * w2 * f.trace_b;
    (a, b, c)
}

fn tree_sum<T: Clone>(items: &[T], add: &impl Fn(&T, &T) -> T) -> T {
    match items.len() {
        1 => items[0].clone(),
        n => {
            let (l, r) = items.split_at(n / 2);
            add(&tree_sum(l, add), &tree_sum(r, add))
        }
    }
}

impl ConjTerms {
    pub fn len(&self) -> usize {
        self.c.len()
    }

    pub fn is_empty(&self) -> bool {
        self.c.is_empty()
    }

    /// `(1/n) Σᵢ cᵢ (Aᵢ, Bᵢ, Cᵢ)` with multiplicities `cᵢ` summing to `n`.
    pub fn weighted(&self, counts: &[f64]) -> Result<ConjCoefficients> {
        if counts.len() != self.len() {
            return Err(Error::dim("bootstrap counts", self.len(), counts.len()));
        }
        let total: f64 = counts.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidArgument(
                "bootstrap counts sum to zero".into(),
            ));
        }
        let scale = |m: &DMatrix<f64>, k: f64| m * k;
        let a: Vec<DMatrix<f64>> = self
            .a
            .iter()
            .zip(counts)
            .map(|(m, k)| scale(m, *k))
            .collect();
        let b: Vec<DVector<f64>> = self.b.iter().zip(counts).map(|(v, k)| v * *k).collect();
        let c: Vec<f64> = self.c.iter().zip(counts).map(|(v, k)| v * k).collect();
        let a = tree_sum(&a, &|x, y| x + y) / total;
        let b = tree_sum(&b, &|x, y| x + y) / total;
        Ok(ConjCoefficients {
            a: (&a + a.transpose()) * 0.5,
            b,
            c: pairwise_sum(&c) / total,
            n: self.len(),
        })
    }

    pub fn mean(&self) -> Result<ConjCoefficients> {
        self.weighted(&vec![1.0; self.len()])
    }
}

/// Per-datum quadratic terms over a dataset.
pub fn conj_terms(
    data: &Dataset,
    model: &(impl ExponentialFamily + ?Sized),
    weight: &WeightFunction,
) -> Result<ConjTerms> {
    check_data(data, model.x_dim())?;
    let results: Vec<Result<(DMatrix<f64>, DVector<f64>, f64)>> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let x = data.row(i);
            let f = model.features(&x).map_err(at_datum(i))?;
            let terms = conj_point_terms(&f, weight.weight_sq(&x), &weight.weight_sq_grad(&x));
            if terms.0.iter().chain(terms.1.iter()).all(|v| v.is_finite()) && terms.2.is_finite() {
                Ok(terms)
            } else {
                Err(Error::non_finite(format!("quadratic terms of datum {i}")))
            }
        })
        .collect();
    let mut out = ConjTerms {
        a: Vec::with_capacity(data.len()),
        b: Vec::with_capacity(data.len()),
        c: Vec::with_capacity(data.len()),
    };
    for (a, b, c) in first_error(results)? {
        out.a.push(a);
        out.b.push(b);
        out.c.push(c);
    }
    Ok(out)
}

/// `A_n`, `B_n`, `C_n` averaged over the dataset.
pub fn conj_coefficients(
    data: &Dataset,
    model: &(impl ExponentialFamily + ?Sized),
    weight: &WeightFunction,
) -> Result<ConjCoefficients> {
    conj_terms(data, model, weight)?.mean()
}
