//! Conditional density surrogates `q(x | θ)`.
//!
//! Three families share one interface: a Gaussian mixture density network,
//! a masked autoregressive flow and an exponential-family energy model
//! `q(x | θ) ∝ exp(T(x)ᵀθ + b(x))`. Every model carries its standardisers
//! and reports log-densities, scores and Laplacians in the original data
//! coordinates; the affine maps are folded into the derivative seeds.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{ln_derivs, recip_derivs, HeadSpec, Jet, Mlp, NetManifest, Order};
use crate::stats::{pairwise_sum, LN_2PI};
use crate::train::Standardizer;

/// A fitted conditional density model.
pub trait ConditionalDensitySurrogate: Send + Sync {
    fn family(&self) -> Family;
    fn x_dim(&self) -> usize;
    fn theta_dim(&self) -> usize;

    /// Normalised `log q(x | θ)`; energy models return [`Error::NotNormalised`].
    fn log_density(&self, x: &[f64], theta: &[f64]) -> Result<f64>;

    /// `(∇ₓ log q, Tr ∇²ₓ log q)` at `(x, θ)`.
    fn score_and_trace(&self, x: &[f64], theta: &[f64]) -> Result<(DVector<f64>, f64)>;

    fn score_x(&self, x: &[f64], theta: &[f64]) -> Result<DVector<f64>> {
        Ok(self.score_and_trace(x, theta)?.0)
    }

    fn hessian_trace_x(&self, x: &[f64], theta: &[f64]) -> Result<f64> {
        Ok(self.score_and_trace(x, theta)?.1)
    }

    /// `Σᵢ log q(xᵢ | θ)` over the rows of `data`.
    fn log_likelihood(&self, data: &DMatrix<f64>, theta: &[f64]) -> Result<f64> {
        let terms = (0..data.nrows())
            .map(|i| {
                let x: Vec<f64> = data.row(i).iter().copied().collect();
                self.log_density(&x, theta)
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(pairwise_sum(&terms))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Mdn,
    Maf,
    Ebm,
    GaussianLinear,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Mdn => "mdn",
            Family::Maf => "maf",
            Family::Ebm => "ebm",
            Family::GaussianLinear => "gaussian-linear",
        })
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mdn" => Ok(Family::Mdn),
            "maf" => Ok(Family::Maf),
            "ebm" => Ok(Family::Ebm),
            "gaussian-linear" => Ok(Family::GaussianLinear),
            other => Err(Error::InvalidArgument(format!(
                "unknown surrogate family `{other}`"
            ))),
        }
    }
}

fn check_dims(model: &impl ConditionalDensitySurrogate, x: &[f64], theta: &[f64]) -> Result<()> {
    if x.len() != model.x_dim() {
        return Err(Error::dim("surrogate x", model.x_dim(), x.len()));
    }
    if theta.len() != model.theta_dim() {
        return Err(Error::dim("surrogate θ", model.theta_dim(), theta.len()));
    }
    Ok(())
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

// ---- mixture density network ------------------------------------------------

/// Default number of mixture components.
pub const MDN_COMPONENTS: usize = 10;
/// Floor added to every diagonal variance (standardised units).
pub const MDN_VAR_FLOOR: f64 = 1e-4;

/// Gaussian mixture with diagonal covariances whose parameters are an MLP of θ.
#[derive(Debug, Clone, PartialEq)]
pub struct Mdn {
    pub net: Mlp,
    pub components: usize,
    pub var_floor: f64,
    pub x_std: Standardizer,
    pub theta_std: Standardizer,
}

/// A mixture evaluated at one θ, in original x coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub log_weights: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    pub vars: Vec<DVector<f64>>,
}

impl Mixture {
    /// `log ω_k + log f_k(x)` for each component.
    pub fn joint_log_terms(&self, x: &[f64]) -> Vec<f64> {
        let d = x.len() as f64;
        self.means
            .iter()
            .zip(&self.vars)
            .zip(&self.log_weights)
            .map(|((m, v), lw)| {
                let mut q = 0.0;
                let mut ld = 0.0;
                for i in 0..x.len() {
                    q += (x[i] - m[i]).powi(2) / v[i];
                    ld += v[i].ln();
                }
                lw - 0.5 * (q + ld + d * LN_2PI)
            })
            .collect()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        log_sum_exp(&self.joint_log_terms(x))
    }

    /// Posterior component probabilities `ρ_k(x)`; they sum to one.
    pub fn responsibilities(&self, x: &[f64]) -> Vec<f64> {
        let terms = self.joint_log_terms(x);
        let lse = log_sum_exp(&terms);
        terms.iter().map(|t| (t - lse).exp()).collect()
    }

    /// Score `Σ ρ_k g_k` and Laplacian `Σ ρ_k tr H_k + Σ ρ_k‖g_k‖² − ‖Σ ρ_k g_k‖²`.
    pub fn score_and_trace(&self, x: &[f64]) -> (DVector<f64>, f64) {
        let rho = self.responsibilities(x);
        let d = x.len();
        let mut score = DVector::zeros(d);
        let mut trace = 0.0;
        for ((r, m), v) in rho.iter().zip(&self.means).zip(&self.vars) {
            let g = DVector::from_fn(d, |i, _| -(x[i] - m[i]) / v[i]);
            let tr_h: f64 = v.iter().map(|vi| -1.0 / vi).sum();
            trace += r * (tr_h + g.norm_squared());
            score += &g * *r;
        }
        trace -= score.norm_squared();
        (score, trace)
    }

    pub fn min_variance(&self) -> f64 {
        self.vars
            .iter()
            .flat_map(|v| v.iter().copied())
            .fold(f64::INFINITY, f64::min)
    }

    pub fn max_mean_norm(&self) -> f64 {
        self.means.iter().map(|m| m.norm()).fold(0.0, f64::max)
    }
}

impl Mdn {
    pub fn new(
        x_dim: usize,
        theta_dim: usize,
        components: usize,
        hidden: &[usize],
        x_std: Standardizer,
        theta_std: Standardizer,
        rng: &mut impl Rng,
    ) -> Self {
        let heads = [
            HeadSpec::linear("logits", components),
            HeadSpec::linear("means", components * x_dim),
            HeadSpec::positive("vars", components * x_dim),
        ];
        Self {
            net: Mlp::new(theta_dim, 0, hidden, &heads, rng),
            components,
            var_floor: MDN_VAR_FLOOR,
            x_std,
            theta_std,
        }
    }

    /// Mixture parameters in standardised coordinates:
    /// `(log ω, means, variances)` with means/variances `K × d` row-major.
    pub fn standardized_mixture(&self, theta: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        if theta.len() != self.theta_std.dim() {
            return Err(Error::dim("mdn θ", self.theta_std.dim(), theta.len()));
        }
        let phi = self.theta_std.transform(theta);
        let out = self.net.forward(&phi, &[])?;
        let logits: Vec<f64> = out[0].iter().copied().collect();
        let lse = log_sum_exp(&logits);
        let log_w = logits.iter().map(|l| l - lse).collect();
        let vars = out[2].iter().map(|v| v + self.var_floor).collect();
        Ok((log_w, out[1].iter().copied().collect(), vars))
    }

    /// The mixture at θ, mapped to original x coordinates.
    pub fn mixture(&self, theta: &[f64]) -> Result<Mixture> {
        let d = self.x_std.dim();
        let (log_weights, means, vars) = self.standardized_mixture(theta)?;
        let (c, s) = (&self.x_std.shift, &self.x_std.scale);
        Ok(Mixture {
            log_weights,
            means: (0..self.components)
                .map(|k| DVector::from_fn(d, |i, _| c[i] + s[i] * means[k * d + i]))
                .collect(),
            vars: (0..self.components)
                .map(|k| DVector::from_fn(d, |i, _| s[i] * s[i] * vars[k * d + i]))
                .collect(),
        })
    }
}

impl ConditionalDensitySurrogate for Mdn {
    fn family(&self) -> Family {
        Family::Mdn
    }
    fn x_dim(&self) -> usize {
        self.x_std.dim()
    }
    fn theta_dim(&self) -> usize {
        self.theta_std.dim()
    }

    fn log_density(&self, x: &[f64], theta: &[f64]) -> Result<f64> {
        check_dims(self, x, theta)?;
        let v = self.mixture(theta)?.log_density(x);
        if v.is_nan() {
            return Err(Error::non_finite("mdn log-density"));
        }
        Ok(v)
    }

    fn score_and_trace(&self, x: &[f64], theta: &[f64]) -> Result<(DVector<f64>, f64)> {
        check_dims(self, x, theta)?;
        Ok(self.mixture(theta)?.score_and_trace(x))
    }

    fn log_likelihood(&self, data: &DMatrix<f64>, theta: &[f64]) -> Result<f64> {
        if data.ncols() != self.x_dim() {
            return Err(Error::dim("mdn data", self.x_dim(), data.ncols()));
        }
        let mix = self.mixture(theta)?;
        let terms: Vec<f64> = (0..data.nrows())
            .map(|i| {
                let x: Vec<f64> = data.row(i).iter().copied().collect();
                mix.log_density(&x)
            })
            .collect();
        Ok(pairwise_sum(&terms))
    }
}

// ---- masked autoregressive flow ------------------------------------------------

pub const MAF_TRANSFORMS: usize = 5;
pub const MAF_HIDDEN: usize = 50;

/// Stack of affine autoregressive transforms `z_i = (h_i − μ_i)/σ_i` with the
/// coordinate order reversed between transforms and a standard normal base.
#[derive(Debug, Clone, PartialEq)]
pub struct Maf {
    pub transforms: Vec<Mlp>,
    pub x_std: Standardizer,
    pub theta_std: Standardizer,
}

impl Maf {
    pub fn new(
        x_dim: usize,
        theta_dim: usize,
        transforms: usize,
        hidden: &[usize],
        x_std: Standardizer,
        theta_std: Standardizer,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let heads = [
            HeadSpec::linear("mu", x_dim),
            HeadSpec::positive("sigma", x_dim),
        ];
        let transforms = (0..transforms)
            .map(|_| Mlp::made(x_dim, theta_dim, hidden, &heads, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            transforms,
            x_std,
            theta_std,
        })
    }

    /// Flow whose transforms are all the identity (`μ ≡ 0`, `σ ≡ 1`).
    pub fn identity(
        x_dim: usize,
        theta_dim: usize,
        transforms: usize,
        hidden: &[usize],
    ) -> Result<Self> {
        let mut rng = crate::rng::seeded(0);
        let mut maf = Self::new(
            x_dim,
            theta_dim,
            transforms,
            hidden,
            Standardizer::identity(x_dim),
            Standardizer::identity(theta_dim),
            &mut rng,
        )?;
        let inv_softplus_one = (std::f64::consts::E - 1.0).ln();
        for net in &mut maf.transforms {
            for h in &mut net.heads {
                h.layer.weight.fill(0.0);
                if let Some(c) = h.layer.cond.as_mut() {
                    c.fill(0.0);
                }
                let b = if h.spec.softplus {
                    inv_softplus_one
                } else {
                    0.0
                };
                h.layer.bias.fill(b);
            }
        }
        Ok(maf)
    }

    fn reversal(d: usize) -> Vec<usize> {
        (0..d).rev().collect()
    }

    /// Jet of `log q(x | θ)` with derivatives in original x coordinates.
    pub fn log_density_jet(&self, x: &[f64], theta: &[f64], order: Order) -> Result<Jet> {
        check_dims(self, x, theta)?;
        let d = x.len();
        let phi = self.theta_std.transform(theta);
        let rev = Self::reversal(d);
        let mut h = Jet::seed_affine(x, &self.x_std.shift, &self.x_std.scale, order);
        let mut log_sigma = Jet::constant(&[0.0], &h);
        for (l, net) in self.transforms.iter().enumerate() {
            if l > 0 {
                h = h.select(&rev);
            }
            let out = net.forward_jet(&h, &phi)?;
            let (mu, sigma) = (&out[0], &out[1]);
            log_sigma = log_sigma.axpy(1.0, &sigma.map(ln_derivs).sum());
            h = h.sub(mu).mul(&sigma.map(recip_derivs));
        }
        let base = h.map(|z| (-0.5 * z * z, -z, -1.0)).sum();
        let constant = -0.5 * d as f64 * LN_2PI - self.x_std.log_scale_sum();
        let mut out = base.sub(&log_sigma);
        out.value[0] += constant;
        if !out.value[0].is_finite() {
            return Err(Error::non_finite("maf log-density"));
        }
        Ok(out)
    }

    /// Full `d×d` Hessian of `log q` in x.
    pub fn hessian_x(&self, x: &[f64], theta: &[f64]) -> Result<DMatrix<f64>> {
        let jet = self.log_density_jet(x, theta, Order::Hessian)?;
        Ok(jet.hessian(0).expect("hessian requested"))
    }

    /// Standardised base variable `z` for data `x`.
    pub fn to_base(&self, x: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
        check_dims(self, x, theta)?;
        let phi = self.theta_std.transform(theta);
        let rev = Self::reversal(x.len());
        let mut h = self.x_std.transform(x);
        for (l, net) in self.transforms.iter().enumerate() {
            if l > 0 {
                h = rev.iter().map(|&i| h[i]).collect();
            }
            let out = net.forward(&h, &phi)?;
            h = (0..h.len())
                .map(|i| (h[i] - out[0][i]) / out[1][i])
                .collect();
        }
        Ok(h)
    }

    /// Inverse of [`Self::to_base`]: one sequential pass per coordinate and transform.
    pub fn from_base(&self, z: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
        check_dims(self, z, theta)?;
        let phi = self.theta_std.transform(theta);
        let d = z.len();
        let rev = Self::reversal(d);
        let mut a = z.to_vec();
        for (l, net) in self.transforms.iter().enumerate().rev() {
            let mut h = vec![0.0; d];
            for i in 0..d {
                let out = net.forward(&h, &phi)?;
                h[i] = out[0][i] + out[1][i] * a[i];
            }
            a = if l > 0 {
                rev.iter().map(|&i| h[i]).collect()
            } else {
                h
            };
        }
        Ok(self.x_std.inverse(&a))
    }

    /// `count × d` draws from `q(· | θ)`.
    pub fn sample(&self, theta: &[f64], count: usize, rng: &mut impl Rng) -> Result<DMatrix<f64>> {
        let d = self.x_dim();
        let mut out = DMatrix::zeros(count, d);
        for r in 0..count {
            let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            let x = self.from_base(&z, theta)?;
            for (j, v) in x.into_iter().enumerate() {
                out[(r, j)] = v;
            }
        }
        Ok(out)
    }
}

impl ConditionalDensitySurrogate for Maf {
    fn family(&self) -> Family {
        Family::Maf
    }
    fn x_dim(&self) -> usize {
        self.x_std.dim()
    }
    fn theta_dim(&self) -> usize {
        self.theta_std.dim()
    }

    fn log_density(&self, x: &[f64], theta: &[f64]) -> Result<f64> {
        Ok(self.log_density_jet(x, theta, Order::Value)?.value[0])
    }

    fn score_and_trace(&self, x: &[f64], theta: &[f64]) -> Result<(DVector<f64>, f64)> {
        let jet = self.log_density_jet(x, theta, Order::Trace)?;
        let score = jet
            .jac
            .as_ref()
            .expect("jacobian requested")
            .row(0)
            .transpose();
        Ok((score, jet.laplacian(0).expect("trace requested")))
    }

    fn score_x(&self, x: &[f64], theta: &[f64]) -> Result<DVector<f64>> {
        let jet = self.log_density_jet(x, theta, Order::Jacobian)?;
        Ok(jet
            .jac
            .as_ref()
            .expect("jacobian requested")
            .row(0)
            .transpose())
    }
}

// ---- exponential-family energy models --------------------------------------------

/// Sufficient-statistic features of an exponential-family model at one x.
#[derive(Debug, Clone, PartialEq)]
pub struct EbmFeatures {
    /// `T(x)`, length `d_Θ`.
    pub t: DVector<f64>,
    pub b: f64,
    /// `∇ₓT(x)`, `d_Θ × d_X` (row k is the gradient of `T_k`).
    pub grad_t: DMatrix<f64>,
    pub grad_b: DVector<f64>,
    /// `Tr ∇²ₓ T_k(x)` for each k.
    pub trace_t: DVector<f64>,
    pub trace_b: f64,
}

impl EbmFeatures {
    pub fn score(&self, theta: &[f64]) -> DVector<f64> {
        self.grad_t.tr_mul(&DVector::from_column_slice(theta)) + &self.grad_b
    }

    pub fn trace(&self, theta: &[f64]) -> f64 {
        self.trace_t.dot(&DVector::from_column_slice(theta)) + self.trace_b
    }
}

/// Models with `log q(x | θ) = T(x)ᵀθ + b(x) − log Z(θ)`.
pub trait ExponentialFamily: Send + Sync {
    fn x_dim(&self) -> usize;
    fn theta_dim(&self) -> usize;
    fn features(&self, x: &[f64]) -> Result<EbmFeatures>;
    /// Full Hessians `(∇²ₓT_k for each k, ∇²ₓb)`.
    fn feature_hessians(&self, x: &[f64]) -> Result<(Vec<DMatrix<f64>>, DMatrix<f64>)>;

    fn log_unnormalised(&self, x: &[f64], theta: &[f64]) -> Result<f64> {
        let f = self.features(x)?;
        Ok(f.t.dot(&DVector::from_column_slice(theta)) + f.b)
    }
}

pub const EBM_HIDDEN: usize = 128;

/// Energy model with `T` and `b` given by tanh MLPs with linear heads.
///
/// Internally `T` acts on standardised θ: `T̃(u)ᵀ (θ − m)/s`. The reported
/// features are re-expressed for raw θ, `T = T̃/s` and `b = b̃ − T̃ᵀ(m/s)`,
/// which keeps the model exponential-family in θ.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpFamEbm {
    pub t_net: Mlp,
    pub b_net: Mlp,
    pub x_std: Standardizer,
    pub theta_std: Standardizer,
}

impl ExpFamEbm {
    /// `t_hidden = None` gives a `T` that is affine in standardised x.
    pub fn new(
        x_dim: usize,
        theta_dim: usize,
        t_hidden: Option<usize>,
        b_hidden: usize,
        x_std: Standardizer,
        theta_std: Standardizer,
        rng: &mut impl Rng,
    ) -> Self {
        let t_layers: Vec<usize> = t_hidden.into_iter().collect();
        Self {
            t_net: Mlp::new(
                x_dim,
                0,
                &t_layers,
                &[HeadSpec::linear("T", theta_dim)],
                rng,
            ),
            b_net: Mlp::new(x_dim, 0, &[b_hidden], &[HeadSpec::linear("b", 1)], rng),
            x_std,
            theta_std,
        }
    }

    fn feature_jets(&self, x: &[f64], order: Order) -> Result<(Jet, Jet)> {
        if x.len() != self.x_std.dim() {
            return Err(Error::dim("ebm x", self.x_std.dim(), x.len()));
        }
        let seed = Jet::seed_affine(x, &self.x_std.shift, &self.x_std.scale, order);
        let t_std = self.t_net.forward_jet(&seed, &[])?.remove(0);
        let b_std = self.b_net.forward_jet(&seed, &[])?.remove(0);
        let inv_s: Vec<f64> = self.theta_std.scale.iter().map(|s| 1.0 / s).collect();
        let m_over_s: Vec<f64> = self
            .theta_std
            .shift
            .iter()
            .zip(&self.theta_std.scale)
            .map(|(m, s)| m / s)
            .collect();
        let t = t_std.mul(&Jet::constant(&inv_s, &t_std));
        let b = b_std.sub(&t_std.mul(&Jet::constant(&m_over_s, &t_std)).sum());
        Ok((t, b))
    }
}

impl ExponentialFamily for ExpFamEbm {
    fn x_dim(&self) -> usize {
        self.x_std.dim()
    }
    fn theta_dim(&self) -> usize {
        self.theta_std.dim()
    }

    fn features(&self, x: &[f64]) -> Result<EbmFeatures> {
        let (t, b) = self.feature_jets(x, Order::Trace)?;
        Ok(EbmFeatures {
            t: t.value.clone(),
            b: b.value[0],
            grad_t: t.jac.clone().expect("jacobian requested"),
            grad_b: b
                .jac
                .as_ref()
                .expect("jacobian requested")
                .row(0)
                .transpose(),
            trace_t: t.trace.clone().expect("trace requested"),
            trace_b: b.trace.as_ref().expect("trace requested")[0],
        })
    }

    fn feature_hessians(&self, x: &[f64]) -> Result<(Vec<DMatrix<f64>>, DMatrix<f64>)> {
        let (t, b) = self.feature_jets(x, Order::Hessian)?;
        let ht = (0..t.len())
            .map(|k| t.hessian(k).expect("hessian requested"))
            .collect();
        Ok((ht, b.hessian(0).expect("hessian requested")))
    }
}

fn ebm_score_and_trace(
    model: &(impl ExponentialFamily + ?Sized),
    x: &[f64],
    theta: &[f64],
) -> Result<(DVector<f64>, f64)> {
    if theta.len() != model.theta_dim() {
        return Err(Error::dim("ebm θ", model.theta_dim(), theta.len()));
    }
    let f = model.features(x)?;
    Ok((f.score(theta), f.trace(theta)))
}

impl ConditionalDensitySurrogate for ExpFamEbm {
    fn family(&self) -> Family {
        Family::Ebm
    }
    fn x_dim(&self) -> usize {
        self.x_std.dim()
    }
    fn theta_dim(&self) -> usize {
        self.theta_std.dim()
    }

    fn log_density(&self, _x: &[f64], _theta: &[f64]) -> Result<f64> {
        Err(Error::NotNormalised)
    }

    fn score_and_trace(&self, x: &[f64], theta: &[f64]) -> Result<(DVector<f64>, f64)> {
        ebm_score_and_trace(self, x, theta)
    }
}

/// `q(x | θ) = N(x; Mᵀθ, I)`, i.e. `T(x) = Mx`, `b(x) = −½‖x‖²`.
///
/// A normalised exponential-family model with closed-form everything, used
/// as a reference surrogate.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLinearModel {
    /// `d_Θ × d_X`
    pub m: DMatrix<f64>,
}

impl GaussianLinearModel {
    pub fn new(m: DMatrix<f64>) -> Self {
        Self { m }
    }

    /// `T(x) = x` on `d` dimensions: `q(x | θ) = N(x; θ, I)`.
    pub fn location(d: usize) -> Self {
        Self::new(DMatrix::identity(d, d))
    }
}

impl ExponentialFamily for GaussianLinearModel {
    fn x_dim(&self) -> usize {
        self.m.ncols()
    }
    fn theta_dim(&self) -> usize {
        self.m.nrows()
    }

    fn features(&self, x: &[f64]) -> Result<EbmFeatures> {
        if x.len() != self.m.ncols() {
            return Err(Error::dim("gaussian-linear x", self.m.ncols(), x.len()));
        }
        let xv = DVector::from_column_slice(x);
        Ok(EbmFeatures {
            t: &self.m * &xv,
            b: -0.5 * xv.norm_squared(),
            grad_t: self.m.clone(),
            grad_b: -xv,
            trace_t: DVector::zeros(self.m.nrows()),
            trace_b: -(x.len() as f64),
        })
    }

    fn feature_hessians(&self, x: &[f64]) -> Result<(Vec<DMatrix<f64>>, DMatrix<f64>)> {
        let d = x.len();
        Ok((
            vec![DMatrix::zeros(d, d); self.m.nrows()],
            -DMatrix::identity(d, d),
        ))
    }
}

impl ConditionalDensitySurrogate for GaussianLinearModel {
    fn family(&self) -> Family {
        Family::GaussianLinear
    }
    fn x_dim(&self) -> usize {
        self.m.ncols()
    }
    fn theta_dim(&self) -> usize {
        self.m.nrows()
    }

    fn log_density(&self, x: &[f64], theta: &[f64]) -> Result<f64> {
        check_dims(self, x, theta)?;
        let mean = self.m.tr_mul(&DVector::from_column_slice(theta));
        let r = DVector::from_column_slice(x) - mean;
        Ok(-0.5 * r.norm_squared() - 0.5 * x.len() as f64 * LN_2PI)
    }

    fn score_and_trace(&self, x: &[f64], theta: &[f64]) -> Result<(DVector<f64>, f64)> {
        ebm_score_and_trace(self, x, theta)
    }
}

// ---- growth scans -------------------------------------------------------------

/// Largest observed `‖score‖/(1+‖x‖²)` and `|trace|/(1+‖x‖²)` over a scan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrowthReport {
    pub k1: f64,
    pub k2: f64,
    pub max_radius: f64,
}

impl GrowthReport {
    pub fn is_finite(&self) -> bool {
        self.k1.is_finite() && self.k2.is_finite()
    }
}

/// Scans `x = centre + r·u` for every radius and unit direction `u`.
pub fn growth_scan(
    model: &dyn ConditionalDensitySurrogate,
    theta: &[f64],
    centre: &[f64],
    directions: &[DVector<f64>],
    radii: &[f64],
) -> Result<GrowthReport> {
    let mut k1 = 0.0f64;
    let mut k2 = 0.0f64;
    for u in directions {
        let u = u.normalize();
        for &r in radii {
            let x: Vec<f64> = centre
                .iter()
                .zip(u.iter())
                .map(|(c, ui)| c + r * ui)
                .collect();
            let (s, t) = model.score_and_trace(&x, theta)?;
            let nx2 = x.iter().map(|v| v * v).sum::<f64>();
            k1 = k1.max(s.norm() / (1.0 + nx2));
            k2 = k2.max(t.abs() / (1.0 + nx2));
        }
    }
    Ok(GrowthReport {
        k1,
        k2,
        max_radius: radii.iter().copied().fold(0.0, f64::max),
    })
}

// ---- persistence ---------------------------------------------------------------

/// Any fitted surrogate, for storage and dynamic dispatch.
#[derive(Debug, Clone, PartialEq)]
pub enum Surrogate {
    Mdn(Mdn),
    Maf(Maf),
    Ebm(ExpFamEbm),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredNet {
    pub role: String,
    pub offset: usize,
    pub len: usize,
    pub manifest: NetManifest,
}

/// JSON sidecar of a model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub family: Family,
    pub x_dim: usize,
    pub theta_dim: usize,
    pub x_std: Standardizer,
    pub theta_std: Standardizer,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub components: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub var_floor: Option<f64>,
    pub nets: Vec<StoredNet>,
}

impl Surrogate {
    pub fn as_dyn(&self) -> &dyn ConditionalDensitySurrogate {
        match self {
            Surrogate::Mdn(m) => m,
            Surrogate::Maf(m) => m,
            Surrogate::Ebm(m) => m,
        }
    }

    pub fn as_ebm(&self) -> Option<&ExpFamEbm> {
        match self {
            Surrogate::Ebm(m) => Some(m),
            _ => None,
        }
    }

    fn nets(&self) -> Vec<(String, &Mlp)> {
        match self {
            Surrogate::Mdn(m) => vec![("mdn".into(), &m.net)],
            Surrogate::Maf(m) => m
                .transforms
                .iter()
                .enumerate()
                .map(|(i, n)| (format!("transform{i}"), n))
                .collect(),
            Surrogate::Ebm(m) => vec![("T".into(), &m.t_net), ("b".into(), &m.b_net)],
        }
    }

    pub fn to_parts(&self) -> (ModelManifest, Vec<u8>) {
        let mut bytes = Vec::new();
        let mut nets = Vec::new();
        for (role, net) in self.nets() {
            let b = net.to_le_bytes();
            nets.push(StoredNet {
                role,
                offset: bytes.len(),
                len: b.len(),
                manifest: net.manifest(),
            });
            bytes.extend(b);
        }
        let (x_std, theta_std) = match self {
            Surrogate::Mdn(m) => (&m.x_std, &m.theta_std),
            Surrogate::Maf(m) => (&m.x_std, &m.theta_std),
            Surrogate::Ebm(m) => (&m.x_std, &m.theta_std),
        };
        let (components, var_floor) = match self {
            Surrogate::Mdn(m) => (Some(m.components), Some(m.var_floor)),
            _ => (None, None),
        };
        let manifest = ModelManifest {
            family: self.as_dyn().family(),
            x_dim: x_std.dim(),
            theta_dim: theta_std.dim(),
            x_std: x_std.clone(),
            theta_std: theta_std.clone(),
            components,
            var_floor,
            nets,
        };
        (manifest, bytes)
    }

    pub fn from_parts(manifest: &ModelManifest, bytes: &[u8]) -> Result<Self> {
        let mut nets = manifest
            .nets
            .iter()
            .map(|s| {
                let chunk = bytes.get(s.offset..s.offset + s.len).ok_or_else(|| {
                    Error::ManifestMismatch(format!("net `{}` out of range", s.role))
                })?;
                Mlp::from_parts(&s.manifest, chunk)
            })
            .collect::<Result<Vec<_>>>()?;
        let (x_std, theta_std) = (manifest.x_std.clone(), manifest.theta_std.clone());
        let need = |n: usize| {
            if manifest.nets.len() == n {
                Ok(())
            } else {
                Err(Error::ManifestMismatch(format!(
                    "{} model expects {n} networks, found {}",
                    manifest.family,
                    manifest.nets.len()
                )))
            }
        };
        match manifest.family {
            Family::Mdn => {
                need(1)?;
                Ok(Surrogate::Mdn(Mdn {
                    net: nets.remove(0),
                    components: manifest.components.ok_or_else(|| {
                        Error::ManifestMismatch("mdn without component count".into())
                    })?,
                    var_floor: manifest.var_floor.unwrap_or(MDN_VAR_FLOOR),
                    x_std,
                    theta_std,
                }))
            }
            Family::Maf => Ok(Surrogate::Maf(Maf {
                transforms: nets,
                x_std,
                theta_std,
            })),
            Family::Ebm => {
                need(2)?;
                let b_net = nets.remove(1);
                Ok(Surrogate::Ebm(ExpFamEbm {
                    t_net: nets.remove(0),
                    b_net,
                    x_std,
                    theta_std,
                }))
            }
            Family::GaussianLinear => Err(Error::ManifestMismatch(
                "gaussian-linear models are not stored".into(),
            )),
        }
    }

    /// Writes `<stem>.bin` and `<stem>.json` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let (manifest, bytes) = self.to_parts();
        std::fs::write(dir.join(format!("{stem}.bin")), bytes)?;
        std::fs::write(
            dir.join(format!("{stem}.json")),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let manifest: ModelManifest =
            serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
        let bytes = std::fs::read(dir.join(format!("{stem}.bin")))?;
        Self::from_parts(&manifest, &bytes)
    }
}

impl ConditionalDensitySurrogate for Surrogate {
    fn family(&self) -> Family {
        self.as_dyn().family()
    }
    fn x_dim(&self) -> usize {
        self.as_dyn().x_dim()
    }
    fn theta_dim(&self) -> usize {
        self.as_dyn().theta_dim()
    }
    fn log_density(&self, x: &[f64], theta: &[f64]) -> Result<f64> {
        self.as_dyn().log_density(x, theta)
    }
    fn score_and_trace(&self, x: &[f64], theta: &[f64]) -> Result<(DVector<f64>, f64)> {
        self.as_dyn().score_and_trace(x, theta)
    }
    fn score_x(&self, x: &[f64], theta: &[f64]) -> Result<DVector<f64>> {
        self.as_dyn().score_x(x, theta)
    }
    fn log_likelihood(&self, data: &DMatrix<f64>, theta: &[f64]) -> Result<f64> {
        self.as_dyn().log_likelihood(data, theta)
    }
}
