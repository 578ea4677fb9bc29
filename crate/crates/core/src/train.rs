//! Fitting surrogates on simulated `(θ, x)` pairs.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{substream, Stage};
use crate::stats::LN_2PI;
use crate::surrogate::{
    ExpFamEbm, Family, Maf, Mdn, Surrogate, EBM_HIDDEN, MAF_HIDDEN, MAF_TRANSFORMS, MDN_COMPONENTS,
};

/// Per-dimension z-scoring. Scales are strictly positive; a constant column
/// gets scale 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            shift: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    /// Column means and (n-1)-normalised standard deviations of `data`.
    pub fn fit(data: &DMatrix<f64>) -> Self {
        let (mean, cov) = crate::stats::sample_moments(data);
        let scale = (0..data.ncols())
            .map(|j| {
                let s = cov[(j, j)].sqrt();
                if s.is_finite() && s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self {
            shift: mean.iter().copied().collect(),
            scale,
        }
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.shift.iter().zip(&self.scale))
            .map(|(v, (c, s))| (v - c) / s)
            .collect()
    }

    pub fn inverse(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(self.shift.iter().zip(&self.scale))
            .map(|(v, (c, s))| c + s * v)
            .collect()
    }

    pub fn transform_rows(&self, data: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(data.nrows(), data.ncols(), |i, j| {
            (data[(i, j)] - self.shift[j]) / self.scale[j]
        })
    }

    /// `Σ ln scale`, the log-Jacobian of the inverse map.
    pub fn log_scale_sum(&self) -> f64 {
        self.scale.iter().map(|s| s.ln()).sum()
    }
}

/// Optimiser and schedule settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub val_fraction: f64,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            weight_decay: 1e-5,
            batch_size: 128,
            max_epochs: 1000,
            val_fraction: 0.2,
            patience: 20,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.weight_decay >= 0.0
            && self.batch_size > 0
            && self.max_epochs > 0
            && self.patience > 0
            && self.val_fraction > 0.0
            && self.val_fraction < 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "invalid training configuration {self:?}"
            )))
        }
    }
}

/// Architecture of the surrogate to fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum SurrogateSpec {
    Mdn {
        components: usize,
        hidden: Vec<usize>,
    },
    Maf {
        transforms: usize,
        hidden: Vec<usize>,
    },
    Ebm {
        /// `None` makes `T` affine in x.
        t_hidden: Option<usize>,
        b_hidden: usize,
        standardize_theta: bool,
    },
}

impl SurrogateSpec {
    pub fn default_mdn() -> Self {
        SurrogateSpec::Mdn {
            components: MDN_COMPONENTS,
            hidden: vec![50, 50],
        }
    }

    pub fn default_maf() -> Self {
        SurrogateSpec::Maf {
            transforms: MAF_TRANSFORMS,
            hidden: vec![MAF_HIDDEN, MAF_HIDDEN],
        }
    }

    pub fn default_ebm() -> Self {
        SurrogateSpec::Ebm {
            t_hidden: Some(EBM_HIDDEN),
            b_hidden: EBM_HIDDEN,
            standardize_theta: false,
        }
    }

    pub fn family(&self) -> Family {
        match self {
            SurrogateSpec::Mdn { .. } => Family::Mdn,
            SurrogateSpec::Maf { .. } => Family::Maf,
            SurrogateSpec::Ebm { .. } => Family::Ebm,
        }
    }
}

/// Loss curves and provenance of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub family: Family,
    pub objective: String,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub epochs_run: usize,
    pub simulations: usize,
    pub config: TrainConfig,
    pub x_std: Standardizer,
    pub theta_std: Standardizer,
}

/// Adam with L2 weight decay folded into the gradient.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<DMatrix<f64>>,
    v: Vec<DMatrix<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64, shapes: &[(usize, usize)]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: shapes.iter().map(|&(r, c)| DMatrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| DMatrix::zeros(r, c)).collect(),
            t: 0,
        }
    }

    /// One update; entries where `masks` is zero never move.
    pub fn step(
        &mut self,
        params: &mut [DMatrix<f64>],
        grads: &[DMatrix<f64>],
        masks: &[Option<DMatrix<f64>>],
    ) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (k, p) in params.iter_mut().enumerate() {
            let mut g = &grads[k] + &*p * self.weight_decay;
            if let Some(mask) = &masks[k] {
                g.component_mul_assign(mask);
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p[i] -= self.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
            }
        }
    }
}

/// A minibatch objective recorded on a tape.
trait TapeObjective {
    fn params(&self) -> Vec<DMatrix<f64>>;
    fn masks(&self) -> Vec<Option<DMatrix<f64>>>;
    fn set_params(&mut self, params: &[DMatrix<f64>]) -> Result<()>;
    fn rows(&self) -> usize;
    /// Mean loss over `rows`, with `leaves` holding the parameters.
    fn record(&self, tape: &mut Tape, leaves: &[Var], rows: &[usize]) -> Result<Var>;
}

fn gather(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

fn evaluate(
    obj: &dyn TapeObjective,
    params: &[DMatrix<f64>],
    rows: &[usize],
    chunk: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for c in rows.chunks(chunk.max(1)) {
        let mut tape = Tape::new();
        let leaves = params
            .iter()
            .map(|p| tape.constant(p.clone()))
            .collect::<Result<Vec<_>>>()?;
        let v = obj.record(&mut tape, &leaves, c)?;
        total += tape.scalar(v) * c.len() as f64;
    }
    Ok(total / rows.len() as f64)
}

fn value_and_grad(
    obj: &dyn TapeObjective,
    params: &[DMatrix<f64>],
    rows: &[usize],
) -> Result<(f64, Vec<DMatrix<f64>>)> {
    crate::diff::grad(params, |tape, leaves| obj.record(tape, leaves, rows))
}

fn run_training(
    obj: &mut dyn TapeObjective,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<(Vec<f64>, Vec<f64>, usize, f64)> {
    cfg.validate()?;
    let m = obj.rows();
    let n_val = ((m as f64) * cfg.val_fraction).ceil() as usize;
    if m < cfg.batch_size || n_val == 0 || n_val >= m {
        return Err(Error::InvalidArgument(format!(
            "need at least batch_size = {} simulations with a non-empty split, got {m}",
            cfg.batch_size
        )));
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(rng);
    let val: Vec<usize> = order[..n_val].to_vec();
    let mut train: Vec<usize> = order[n_val..].to_vec();

    let mut params = obj.params();
    let masks = obj.masks();
    let shapes: Vec<(usize, usize)> = params.iter().map(|p| p.shape()).collect();
    let mut adam = Adam::new(cfg.learning_rate, cfg.weight_decay, &shapes);
    let mut best = (f64::INFINITY, 0usize, params.clone());
    let (mut train_curve, mut val_curve) = (Vec::new(), Vec::new());
    for epoch in 0..cfg.max_epochs {
        train.shuffle(rng);
        let mut acc = 0.0;
        for (b, batch) in train.chunks(cfg.batch_size).enumerate() {
            let (loss, grads) = value_and_grad(&*obj, &params, batch).map_err(|e| match e {
                Error::NonFinite { context } => Error::NonFinite {
                    context: format!("epoch {epoch}, batch {b}: {context}"),
                },
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(Error::non_finite(format!("epoch {epoch}, batch {b}: loss")));
            }
            acc += loss * batch.len() as f64;
            adam.step(&mut params, &grads, &masks);
        }
        train_curve.push(acc / train.len() as f64);
        let v = evaluate(&*obj, &params, &val, 2048)?;
        if !v.is_finite() {
            return Err(Error::non_finite(format!("epoch {epoch}: validation loss")));
        }
        val_curve.push(v);
        if v < best.0 {
            best = (v, epoch, params.clone());
        } else if epoch - best.1 >= cfg.patience {
            break;
        }
    }
    obj.set_params(&best.2)?;
    Ok((train_curve, val_curve, best.1, best.0))
}

// ---- objectives ----------------------------------------------------------------

struct MdnNll {
    model: Mdn,
    u: DMatrix<f64>,
    phi: DMatrix<f64>,
}

/// Mean negative log-likelihood of a mixture network in standardised units.
pub(crate) fn record_mdn_nll(
    tape: &mut Tape,
    model: &Mdn,
    leaves: &[Var],
    phi: &DMatrix<f64>,
    u: &DMatrix<f64>,
) -> Result<Var> {
    let (b, d, k) = (u.nrows(), u.ncols(), model.components);
    let phi = tape.constant(phi.clone())?;
    let u = tape.constant(u.clone())?;
    let outs = model.net.record(tape, leaves, phi, None, b)?;
    let (logits, means, vraw) = (outs[0], outs[1], outs[2]);
    let vars = tape.add_scalar(vraw, model.var_floor)?;
    let tile = tape.constant(DMatrix::from_fn(d, k * d, |i, c| {
        f64::from(u8::from(c % d == i))
    }))?;
    let ut = tape.matmul(u, tile)?;
    let diff = tape.sub(ut, means)?;
    let sq = tape.square(diff)?;
    let inv = tape.recip(vars)?;
    let quad = tape.mul(sq, inv)?;
    let lv = tape.ln(vars)?;
    let per_coord = tape.add(quad, lv)?;
    let block = tape.constant(DMatrix::from_fn(k * d, k, |c, j| {
        f64::from(u8::from(c / d == j))
    }))?;
    let per_comp = tape.matmul(per_coord, block)?;
    let comp = tape.scale(per_comp, -0.5)?;
    let comp = tape.add_scalar(comp, -0.5 * d as f64 * LN_2PI)?;
    let lse = tape.log_sum_exp(logits)?;
    let ones = tape.filled(1, k, 1.0)?;
    let lse_b = tape.matmul(lse, ones)?;
    let log_w = tape.sub(logits, lse_b)?;
    let joint = tape.add(log_w, comp)?;
    let ll = tape.log_sum_exp(joint)?;
    let total = tape.sum(ll)?;
    tape.scale(total, -1.0 / b as f64)
}

impl TapeObjective for MdnNll {
    fn params(&self) -> Vec<DMatrix<f64>> {
        self.model.net.param_matrices()
    }
    fn masks(&self) -> Vec<Option<DMatrix<f64>>> {
        self.model.net.grad_masks()
    }
    fn set_params(&mut self, params: &[DMatrix<f64>]) -> Result<()> {
        self.model.net.set_param_matrices(params)
    }
    fn rows(&self) -> usize {
        self.u.nrows()
    }
    fn record(&self, tape: &mut Tape, leaves: &[Var], rows: &[usize]) -> Result<Var> {
        record_mdn_nll(
            tape,
            &self.model,
            leaves,
            &gather(&self.phi, rows),
            &gather(&self.u, rows),
        )
    }
}

struct MafNll {
    model: Maf,
    u: DMatrix<f64>,
    phi: DMatrix<f64>,
}

/// Mean negative log-likelihood of a flow in standardised units.
pub(crate) fn record_maf_nll(
    tape: &mut Tape,
    model: &Maf,
    leaves: &[Var],
    phi: &DMatrix<f64>,
    u: &DMatrix<f64>,
) -> Result<Var> {
    let (b, d) = (u.nrows(), u.ncols());
    let phi = tape.constant(phi.clone())?;
    let mut h = tape.constant(u.clone())?;
    let reversal = tape.constant(DMatrix::from_fn(d, d, |i, j| {
        f64::from(u8::from(i + j + 1 == d))
    }))?;
    let mut offset = 0;
    let mut log_sigma: Option<Var> = None;
    for (l, net) in model.transforms.iter().enumerate() {
        if l > 0 {
            h = tape.matmul(h, reversal)?;
        }
        let count = net.param_shapes().len();
        let outs = net.record(tape, &leaves[offset..offset + count], h, Some(phi), b)?;
        offset += count;
        let (mu, sigma) = (outs[0], outs[1]);
        let centred = tape.sub(h, mu)?;
        let inv = tape.recip(sigma)?;
        h = tape.mul(centred, inv)?;
        let ls = tape.ln(sigma)?;
        let ls = tape.sum(ls)?;
        log_sigma = Some(match log_sigma {
            Some(acc) => tape.add(acc, ls)?,
            None => ls,
        });
    }
    let sq = tape.square(h)?;
    let quad = tape.sum(sq)?;
    let quad = tape.scale(quad, 0.5)?;
    let total = match log_sigma {
        Some(ls) => tape.add(quad, ls)?,
        None => quad,
    };
    let mean = tape.scale(total, 1.0 / b as f64)?;
    tape.add_scalar(mean, 0.5 * d as f64 * LN_2PI)
}

impl TapeObjective for MafNll {
    fn params(&self) -> Vec<DMatrix<f64>> {
        self.model
            .transforms
            .iter()
            .flat_map(|n| n.param_matrices())
            .collect()
    }
    fn masks(&self) -> Vec<Option<DMatrix<f64>>> {
        self.model
            .transforms
            .iter()
            .flat_map(|n| n.grad_masks())
            .collect()
    }
    fn set_params(&mut self, params: &[DMatrix<f64>]) -> Result<()> {
        let mut offset = 0;
        for net in &mut self.model.transforms {
            let count = net.param_shapes().len();
            net.set_param_matrices(&params[offset..offset + count])?;
            offset += count;
        }
        Ok(())
    }
    fn rows(&self) -> usize {
        self.u.nrows()
    }
    fn record(&self, tape: &mut Tape, leaves: &[Var], rows: &[usize]) -> Result<Var> {
        record_maf_nll(
            tape,
            &self.model,
            leaves,
            &gather(&self.phi, rows),
            &gather(&self.u, rows),
        )
    }
}

struct ScoreMatching {
    model: ExpFamEbm,
    u: DMatrix<f64>,
    phi: DMatrix<f64>,
}

/// Input score `Σ_h c_h D_h W_h,:` and Laplacian `Σ_h c_h (−2 H_h D_h) ‖W_h,:‖²`
/// of `x ↦ coefᵀ (V tanh(W x + b))`, batched: `coef` is `B × H`.
fn record_tanh_layer_derivs(
    tape: &mut Tape,
    u: Var,
    w: Var,
    bias: Var,
    coef: Var,
    batch: usize,
) -> Result<(Var, Var)> {
    let wt = tape.transpose(w)?;
    let pre = tape.matmul(u, wt)?;
    let bb = tape.broadcast_rows(bias, batch)?;
    let pre = tape.add(pre, bb)?;
    let h = tape.tanh(pre)?;
    let h2 = tape.square(h)?;
    let neg = tape.scale(h2, -1.0)?;
    let dact = tape.add_scalar(neg, 1.0)?;
    let g = tape.mul(coef, dact)?;
    let score = tape.matmul(g, w)?;
    let m2h = tape.scale(h, -2.0)?;
    let gg = tape.mul(g, m2h)?;
    let w2 = tape.square(w)?;
    let row_norms = tape.row_sum(w2)?;
    let trace = tape.matmul(gg, row_norms)?;
    Ok((score, trace))
}

/// Mean of `‖∇ᵤ log q‖² + 2 Δᵤ log q` over the batch, in standardised units.
pub(crate) fn record_score_matching(
    tape: &mut Tape,
    model: &ExpFamEbm,
    leaves: &[Var],
    phi: &DMatrix<f64>,
    u: &DMatrix<f64>,
) -> Result<Var> {
    let b = u.nrows();
    let t_count = model.t_net.param_shapes().len();
    let (t_leaves, b_leaves) = leaves.split_at(t_count);
    let phi = tape.constant(phi.clone())?;
    let u = tape.constant(u.clone())?;
    let (score_t, trace_t) = match model.t_net.hidden.len() {
        0 => {
            // T(u) = W u + c: score Φ W, zero Laplacian
            (tape.matmul(phi, t_leaves[0])?, None)
        }
        1 => {
            let coef = tape.matmul(phi, t_leaves[2])?;
            let (s, t) = record_tanh_layer_derivs(tape, u, t_leaves[0], t_leaves[1], coef, b)?;
            (s, Some(t))
        }
        _ => {
            return Err(Error::InvalidArgument(
                "score matching supports at most one hidden layer in T".into(),
            ))
        }
    };
    if model.b_net.hidden.len() != 1 {
        return Err(Error::InvalidArgument(
            "score matching needs one hidden layer in b".into(),
        ));
    }
    let ones = tape.filled(b, 1, 1.0)?;
    let coef_b = tape.matmul(ones, b_leaves[2])?;
    let (score_b, trace_b) =
        record_tanh_layer_derivs(tape, u, b_leaves[0], b_leaves[1], coef_b, b)?;
    let score = tape.add(score_t, score_b)?;
    let trace = match trace_t {
        Some(t) => tape.add(t, trace_b)?,
        None => trace_b,
    };
    let sq = tape.square(score)?;
    let sq = tape.sum(sq)?;
    let tr = tape.sum(trace)?;
    let tr2 = tape.scale(tr, 2.0)?;
    let total = tape.add(sq, tr2)?;
    tape.scale(total, 1.0 / b as f64)
}

impl TapeObjective for ScoreMatching {
    fn params(&self) -> Vec<DMatrix<f64>> {
        let mut p = self.model.t_net.param_matrices();
        p.extend(self.model.b_net.param_matrices());
        p
    }
    fn masks(&self) -> Vec<Option<DMatrix<f64>>> {
        vec![None; self.params().len()]
    }
    fn set_params(&mut self, params: &[DMatrix<f64>]) -> Result<()> {
        let t_count = self.model.t_net.param_shapes().len();
        self.model.t_net.set_param_matrices(&params[..t_count])?;
        self.model.b_net.set_param_matrices(&params[t_count..])
    }
    fn rows(&self) -> usize {
        self.u.nrows()
    }
    fn record(&self, tape: &mut Tape, leaves: &[Var], rows: &[usize]) -> Result<Var> {
        record_score_matching(
            tape,
            &self.model,
            leaves,
            &gather(&self.phi, rows),
            &gather(&self.u, rows),
        )
    }
}

/// The score-matching objective `J_m` of an energy model on raw data, in
/// standardised units (the quantity minimised by [`fit_score_matching`]).
pub fn score_matching_objective(
    model: &ExpFamEbm,
    theta: &DMatrix<f64>,
    x: &DMatrix<f64>,
) -> Result<f64> {
    let obj = ScoreMatching {
        model: model.clone(),
        u: model.x_std.transform_rows(x),
        phi: model.theta_std.transform_rows(theta),
    };
    let rows: Vec<usize> = (0..x.nrows()).collect();
    evaluate(&obj, &obj.params(), &rows, 4096)
}

fn check_bank(theta: &DMatrix<f64>, x: &DMatrix<f64>) -> Result<()> {
    if theta.nrows() != x.nrows() {
        return Err(Error::dim("simulation bank rows", theta.nrows(), x.nrows()));
    }
    if theta.iter().chain(x.iter()).any(|v| !v.is_finite()) {
        return Err(Error::non_finite("simulation bank"));
    }
    Ok(())
}

/// Fits `spec` on the simulations `(θᵢ, xᵢ)` (rows of `theta` and `x`).
pub fn fit(
    spec: &SurrogateSpec,
    theta: &DMatrix<f64>,
    x: &DMatrix<f64>,
    cfg: &TrainConfig,
) -> Result<(Surrogate, TrainReport)> {
    check_bank(theta, x)?;
    let mut rng = substream(cfg.seed, Stage::Train, 0);
    let (d, p) = (x.ncols(), theta.ncols());
    let x_std = Standardizer::fit(x);
    let u = x_std.transform_rows(x);
    let (surrogate, objective, curves) = match spec {
        SurrogateSpec::Mdn { components, hidden } => {
            let theta_std = Standardizer::fit(theta);
            let model = Mdn::new(
                d,
                p,
                *components,
                hidden,
                x_std.clone(),
                theta_std.clone(),
                &mut rng,
            );
            let mut obj = MdnNll {
                model,
                u,
                phi: theta_std.transform_rows(theta),
            };
            let curves = run_training(&mut obj, cfg, &mut rng)?;
            (Surrogate::Mdn(obj.model), "nll", curves)
        }
        SurrogateSpec::Maf { transforms, hidden } => {
            let theta_std = Standardizer::fit(theta);
            let model = Maf::new(
                d,
                p,
                *transforms,
                hidden,
                x_std.clone(),
                theta_std.clone(),
                &mut rng,
            )?;
            let mut obj = MafNll {
                model,
                u,
                phi: theta_std.transform_rows(theta),
            };
            let curves = run_training(&mut obj, cfg, &mut rng)?;
            (Surrogate::Maf(obj.model), "nll", curves)
        }
        SurrogateSpec::Ebm {
            t_hidden,
            b_hidden,
            standardize_theta,
        } => {
            let theta_std = if *standardize_theta {
                Standardizer::fit(theta)
            } else {
                Standardizer::identity(p)
            };
            let model = ExpFamEbm::new(
                d,
                p,
                *t_hidden,
                *b_hidden,
                x_std.clone(),
                theta_std.clone(),
                &mut rng,
            );
            let mut obj = ScoreMatching {
                model,
                u,
                phi: theta_std.transform_rows(theta),
            };
            let curves = run_training(&mut obj, cfg, &mut rng)?;
            (Surrogate::Ebm(obj.model), "score-matching", curves)
        }
    };
    let (train_loss, val_loss, best_epoch, best_val_loss) = curves;
    let (x_std, theta_std) = match &surrogate {
        Surrogate::Mdn(m) => (m.x_std.clone(), m.theta_std.clone()),
        Surrogate::Maf(m) => (m.x_std.clone(), m.theta_std.clone()),
        Surrogate::Ebm(m) => (m.x_std.clone(), m.theta_std.clone()),
    };
    let report = TrainReport {
        family: spec.family(),
        objective: objective.into(),
        epochs_run: val_loss.len(),
        train_loss,
        val_loss,
        best_epoch,
        best_val_loss,
        simulations: x.nrows(),
        config: cfg.clone(),
        x_std,
        theta_std,
    };
    Ok((surrogate, report))
}

/// Negative log-likelihood training of a mixture network or flow.
pub fn fit_nle(
    spec: &SurrogateSpec,
    theta: &DMatrix<f64>,
    x: &DMatrix<f64>,
    cfg: &TrainConfig,
) -> Result<(Surrogate, TrainReport)> {
    if spec.family() == Family::Ebm {
        return Err(Error::InvalidArgument(
            "likelihood training needs a normalised family".into(),
        ));
    }
    fit(spec, theta, x, cfg)
}

/// Conditional score-matching training of an energy model.
pub fn fit_score_matching(
    spec: &SurrogateSpec,
    theta: &DMatrix<f64>,
    x: &DMatrix<f64>,
    cfg: &TrainConfig,
) -> Result<(ExpFamEbm, TrainReport)> {
    match fit(spec, theta, x, cfg)? {
        (Surrogate::Ebm(m), report) => Ok((m, report)),
        _ => Err(Error::InvalidArgument(
            "score matching needs an energy model".into(),
        )),
    }
}
