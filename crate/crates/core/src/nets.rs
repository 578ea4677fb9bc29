//! Feed-forward and masked (MADE-style) perceptrons.
//!
//! Networks are tanh MLPs with named linear heads, optionally followed by
//! softplus. An optional conditioning vector enters every layer through its
//! own unmasked weight block. Two evaluation routes exist:
//!
//! * [`Mlp::forward_jet`] propagates values together with exact first and
//!   second derivatives with respect to the network input (the layer
//!   recursion `J' = diag(f'(a)) W J`, differentiated once more for the
//!   Hessians). A trace-only mode carries just the Laplacian.
//! * [`Mlp::record`] records the forward pass on a [`Tape`] so parameter
//!   gradients can be taken by reverse mode.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{flatten, unflatten, Tape, Var};
use crate::error::{Error, Result};
use crate::stats::{sigmoid, softplus};

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out × in`
    pub weight: DMatrix<f64>,
    /// `out × cond_dim`, present when the network is conditioned.
    pub cond: Option<DMatrix<f64>>,
    pub bias: DVector<f64>,
}

impl Layer {
    fn out_dim(&self) -> usize {
        self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub name: String,
    pub dim: usize,
    pub softplus: bool,
}

impl HeadSpec {
    pub fn linear(name: &str, dim: usize) -> Self {
        Self {
            name: name.to_string(),
            dim,
            softplus: false,
        }
    }

    pub fn positive(name: &str, dim: usize) -> Self {
        Self {
            name: name.to_string(),
            dim,
            softplus: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub spec: HeadSpec,
    pub layer: Layer,
}

/// Binary connectivity masks, one per weight matrix (same shapes).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Masks {
    pub hidden: Vec<Vec<Vec<u8>>>,
    pub heads: Vec<Vec<Vec<u8>>>,
}

impl Masks {
    fn to_matrix(rows: &[Vec<u8>]) -> DMatrix<f64> {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        DMatrix::from_fn(r, c, |i, j| f64::from(rows[i][j]))
    }

    fn from_matrix(m: &DMatrix<f64>) -> Vec<Vec<u8>> {
        (0..m.nrows())
            .map(|i| (0..m.ncols()).map(|j| u8::from(m[(i, j)] != 0.0)).collect())
            .collect()
    }
}

/// Tanh multilayer perceptron with named heads.
///
/// With `masks` set it is a masked autoregressive network: head output `i`
/// depends only on inputs `0..i` (and on the conditioning vector).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub input_dim: usize,
    pub cond_dim: usize,
    pub hidden: Vec<Layer>,
    pub heads: Vec<Head>,
    pub masks: Option<Masks>,
}

/// Shape description written next to the flat parameter array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetManifest {
    pub input_dim: usize,
    pub cond_dim: usize,
    pub hidden: Vec<usize>,
    pub heads: Vec<HeadSpec>,
    pub masks: Option<Masks>,
}

/// Which input derivatives to carry through a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Order {
    Value,
    Jacobian,
    Hessian,
    Trace,
}

/// Values of `n` functions together with their input derivatives.
///
/// `hess` stores each function's `d×d` Hessian as a row of length `d²`
/// (row-major), so `hess` is `n × d²`.
#[derive(Debug, Clone, PartialEq)]
pub struct Jet {
    pub value: DVector<f64>,
    pub jac: Option<DMatrix<f64>>,
    pub hess: Option<DMatrix<f64>>,
    pub trace: Option<DVector<f64>>,
}

impl Jet {
    /// Identity seed: the jet of `x ↦ x` itself.
    pub fn seed(x: &[f64], order: Order) -> Self {
        let d = x.len();
        let value = DVector::from_column_slice(x);
        match order {
            Order::Value => Self {
                value,
                jac: None,
                hess: None,
                trace: None,
            },
            Order::Jacobian => Self {
                value,
                jac: Some(DMatrix::identity(d, d)),
                hess: None,
                trace: None,
            },
            Order::Hessian => Self {
                value,
                jac: Some(DMatrix::identity(d, d)),
                hess: Some(DMatrix::zeros(d, d * d)),
                trace: None,
            },
            Order::Trace => Self {
                value,
                jac: Some(DMatrix::identity(d, d)),
                hess: None,
                trace: Some(DVector::zeros(d)),
            },
        }
    }

    /// Jet of `u = (x - shift) / scale` with derivatives taken in `x`.
    pub fn seed_affine(x: &[f64], shift: &[f64], scale: &[f64], order: Order) -> Self {
        let d = x.len();
        let u: Vec<f64> = (0..d).map(|i| (x[i] - shift[i]) / scale[i]).collect();
        let mut jet = Self::seed(&u, order);
        if let Some(j) = jet.jac.as_mut() {
            for i in 0..d {
                j[(i, i)] = 1.0 / scale[i];
            }
        }
        jet
    }

    /// Constant functions with the derivative layout of `like`.
    pub fn constant(values: &[f64], like: &Jet) -> Self {
        let n = values.len();
        let d = like.vars();
        Self {
            value: DVector::from_column_slice(values),
            jac: like.jac.as_ref().map(|_| DMatrix::zeros(n, d)),
            hess: like.hess.as_ref().map(|_| DMatrix::zeros(n, d * d)),
            trace: like.trace.as_ref().map(|_| DVector::zeros(n)),
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    /// Number of differentiation variables.
    pub fn vars(&self) -> usize {
        self.jac.as_ref().map_or(0, |j| j.ncols())
    }

    /// Hessian of function `k` as a `d×d` matrix.
    pub fn hessian(&self, k: usize) -> Option<DMatrix<f64>> {
        let d = self.vars();
        self.hess
            .as_ref()
            .map(|h| DMatrix::from_fn(d, d, |i, j| h[(k, i * d + j)]))
    }

    /// Laplacian of function `k` (from the full Hessian if that is what we carry).
    pub fn laplacian(&self, k: usize) -> Option<f64> {
        if let Some(t) = &self.trace {
            return Some(t[k]);
        }
        let d = self.vars();
        self.hess
            .as_ref()
            .map(|h| (0..d).map(|i| h[(k, i * d + i)]).sum())
    }

    /// Applies `W ·` (plus the constant `c`) to this jet.
    fn affine(&self, w: &DMatrix<f64>, c: DVector<f64>) -> Jet {
        Jet {
            value: w * &self.value + c,
            jac: self.jac.as_ref().map(|j| w * j),
            hess: self.hess.as_ref().map(|h| w * h),
            trace: self.trace.as_ref().map(|t| w * t),
        }
    }

    /// Elementwise `f` with derivatives `(f, f', f'')` evaluated at each value.
    pub fn map(&self, f: impl Fn(f64) -> (f64, f64, f64)) -> Jet {
        let n = self.len();
        let derivs: Vec<(f64, f64, f64)> = self.value.iter().map(|&a| f(a)).collect();
        let value = DVector::from_fn(n, |u, _| derivs[u].0);
        let jac = self
            .jac
            .as_ref()
            .map(|j| DMatrix::from_fn(n, j.ncols(), |u, i| derivs[u].1 * j[(u, i)]));
        let hess = self.hess.as_ref().map(|h| {
            let j = self.jac.as_ref().expect("hessian jets carry a jacobian");
            let d = j.ncols();
            DMatrix::from_fn(n, d * d, |u, k| {
                let (i, l) = (k / d, k % d);
                derivs[u].2 * j[(u, i)] * j[(u, l)] + derivs[u].1 * h[(u, k)]
            })
        });
        let trace = self.trace.as_ref().map(|t| {
            let j = self.jac.as_ref().expect("trace jets carry a jacobian");
            DVector::from_fn(n, |u, _| {
                let sq: f64 = j.row(u).iter().map(|x| x * x).sum();
                derivs[u].2 * sq + derivs[u].1 * t[u]
            })
        });
        Jet {
            value,
            jac,
            hess,
            trace,
        }
    }

    /// `self + c · other`, row by row.
    pub fn axpy(&self, c: f64, other: &Jet) -> Jet {
        let opt = |a: &Option<DMatrix<f64>>, b: &Option<DMatrix<f64>>| match (a, b) {
            (Some(a), Some(b)) => Some(a + b * c),
            _ => None,
        };
        Jet {
            value: &self.value + &other.value * c,
            jac: opt(&self.jac, &other.jac),
            hess: opt(&self.hess, &other.hess),
            trace: match (&self.trace, &other.trace) {
                (Some(a), Some(b)) => Some(a + b * c),
                _ => None,
            },
        }
    }

    pub fn sub(&self, other: &Jet) -> Jet {
        self.axpy(-1.0, other)
    }

    /// Elementwise product, by the product rule.
    pub fn mul(&self, other: &Jet) -> Jet {
        let n = self.len();
        let (a, b) = (self, other);
        let value = a.value.component_mul(&b.value);
        let jac = match (&a.jac, &b.jac) {
            (Some(ja), Some(jb)) => Some(DMatrix::from_fn(n, ja.ncols(), |u, i| {
                ja[(u, i)] * b.value[u] + a.value[u] * jb[(u, i)]
            })),
            _ => None,
        };
        let hess = match (&a.hess, &b.hess, &a.jac, &b.jac) {
            (Some(ha), Some(hb), Some(ja), Some(jb)) => {
                let d = ja.ncols();
                Some(DMatrix::from_fn(n, d * d, |u, k| {
                    let (i, l) = (k / d, k % d);
                    ha[(u, k)] * b.value[u]
                        + a.value[u] * hb[(u, k)]
                        + ja[(u, i)] * jb[(u, l)]
                        + jb[(u, i)] * ja[(u, l)]
                }))
            }
            _ => None,
        };
        let trace = match (&a.trace, &b.trace, &a.jac, &b.jac) {
            (Some(ta), Some(tb), Some(ja), Some(jb)) => Some(DVector::from_fn(n, |u, _| {
                let dot: f64 = ja.row(u).dot(&jb.row(u));
                ta[u] * b.value[u] + a.value[u] * tb[u] + 2.0 * dot
            })),
            _ => None,
        };
        Jet {
            value,
            jac,
            hess,
            trace,
        }
    }

    /// Sum of all rows, as a single-row jet.
    pub fn sum(&self) -> Jet {
        let colsum = |m: &DMatrix<f64>| DMatrix::from_fn(1, m.ncols(), |_, c| m.column(c).sum());
        Jet {
            value: DVector::from_element(1, self.value.sum()),
            jac: self.jac.as_ref().map(colsum),
            hess: self.hess.as_ref().map(colsum),
            trace: self
                .trace
                .as_ref()
                .map(|t| DVector::from_element(1, t.sum())),
        }
    }

    /// Rows `idx` of this jet, in the given order.
    pub fn select(&self, idx: &[usize]) -> Jet {
        let n = idx.len();
        Jet {
            value: DVector::from_fn(n, |u, _| self.value[idx[u]]),
            jac: self
                .jac
                .as_ref()
                .map(|j| DMatrix::from_fn(n, j.ncols(), |u, c| j[(idx[u], c)])),
            hess: self
                .hess
                .as_ref()
                .map(|h| DMatrix::from_fn(n, h.ncols(), |u, c| h[(idx[u], c)])),
            trace: self
                .trace
                .as_ref()
                .map(|t| DVector::from_fn(n, |u, _| t[idx[u]])),
        }
    }
}

pub(crate) fn tanh_derivs(a: f64) -> (f64, f64, f64) {
    let h = a.tanh();
    let d1 = 1.0 - h * h;
    (h, d1, -2.0 * h * d1)
}

pub(crate) fn softplus_derivs(a: f64) -> (f64, f64, f64) {
    let s = sigmoid(a);
    (softplus(a), s, s * (1.0 - s))
}

pub(crate) fn recip_derivs(s: f64) -> (f64, f64, f64) {
    let r = 1.0 / s;
    (r, -r * r, 2.0 * r * r * r)
}

pub(crate) fn ln_derivs(s: f64) -> (f64, f64, f64) {
    let r = 1.0 / s;
    (s.ln(), r, -r * r)
}

fn xavier(
    rng: &mut impl Rng,
    rows: usize,
    cols: usize,
    fan_in: usize,
    fan_out: usize,
) -> DMatrix<f64> {
    let a = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-a..a))
}

/// Bias initialisation for every layer.
pub const BIAS_INIT: f64 = 0.01;

impl Mlp {
    /// Unmasked network with Xavier-uniform weights and biases of 0.01.
    pub fn new(
        input_dim: usize,
        cond_dim: usize,
        hidden: &[usize],
        heads: &[HeadSpec],
        rng: &mut impl Rng,
    ) -> Self {
        let mut prev = input_dim;
        let mut layers = Vec::new();
        for &w in hidden {
            layers.push(Self::init_layer(rng, w, prev, cond_dim));
            prev = w;
        }
        let heads = heads
            .iter()
            .map(|s| Head {
                spec: s.clone(),
                layer: Self::init_layer(rng, s.dim, prev, cond_dim),
            })
            .collect();
        Self {
            input_dim,
            cond_dim,
            hidden: layers,
            heads,
            masks: None,
        }
    }

    /// Masked autoregressive network with sequential degrees.
    ///
    /// Every head must have dimension `input_dim`; entry `i` of a head sees
    /// only inputs `0..i`. Conditioning inputs are visible everywhere.
    pub fn made(
        input_dim: usize,
        cond_dim: usize,
        hidden: &[usize],
        heads: &[HeadSpec],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if let Some(h) = heads.iter().find(|h| h.dim != input_dim) {
            return Err(Error::dim("made head", input_dim, h.dim));
        }
        let mut net = Self::new(input_dim, cond_dim, hidden, heads, rng);
        let d = input_dim;
        let input_deg: Vec<usize> = (1..=d).collect();
        let span = (d.max(2) - 1).max(1);
        let offset = usize::from(d > 1);
        let mut prev_deg = input_deg;
        let mut hidden_masks = Vec::new();
        for layer in &net.hidden {
            let deg: Vec<usize> = (0..layer.out_dim()).map(|k| k % span + offset).collect();
            let m = DMatrix::from_fn(deg.len(), prev_deg.len(), |u, j| {
                f64::from(u8::from(deg[u] >= prev_deg[j]))
            });
            hidden_masks.push(m);
            prev_deg = deg;
        }
        let head_masks: Vec<DMatrix<f64>> = net
            .heads
            .iter()
            .map(|h| {
                DMatrix::from_fn(h.spec.dim, prev_deg.len(), |i, k| {
                    // output i has degree i + 1
                    f64::from(u8::from(i + 1 > prev_deg[k]))
                })
            })
            .collect();
        let masks = Masks {
            hidden: hidden_masks.iter().map(Masks::from_matrix).collect(),
            heads: head_masks.iter().map(Masks::from_matrix).collect(),
        };
        for (l, m) in net.hidden.iter_mut().zip(&hidden_masks) {
            l.weight.component_mul_assign(m);
        }
        for (h, m) in net.heads.iter_mut().zip(&head_masks) {
            h.layer.weight.component_mul_assign(m);
        }
        net.masks = Some(masks);
        Ok(net)
    }

    fn init_layer(rng: &mut impl Rng, out: usize, inp: usize, cond: usize) -> Layer {
        let fan_in = inp + cond;
        Layer {
            weight: xavier(rng, out, inp, fan_in, out),
            cond: (cond > 0).then(|| xavier(rng, out, cond, fan_in, out)),
            bias: DVector::from_element(out, BIAS_INIT),
        }
    }

    pub fn is_masked(&self) -> bool {
        self.masks.is_some()
    }

    pub fn head_index(&self, name: &str) -> Option<usize> {
        self.heads.iter().position(|h| h.spec.name == name)
    }

    pub fn manifest(&self) -> NetManifest {
        NetManifest {
            input_dim: self.input_dim,
            cond_dim: self.cond_dim,
            hidden: self.hidden.iter().map(Layer::out_dim).collect(),
            heads: self.heads.iter().map(|h| h.spec.clone()).collect(),
            masks: self.masks.clone(),
        }
    }

    fn check_inputs(&self, x: &[f64], cond: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::dim("network input", self.input_dim, x.len()));
        }
        if cond.len() != self.cond_dim {
            return Err(Error::dim(
                "network conditioning",
                self.cond_dim,
                cond.len(),
            ));
        }
        Ok(())
    }

    fn layer_const(layer: &Layer, cond: &DVector<f64>) -> DVector<f64> {
        match &layer.cond {
            Some(c) => c * cond + &layer.bias,
            None => layer.bias.clone(),
        }
    }

    /// Propagates a jet of the network input through every layer and head.
    ///
    /// The input jet may itself be a function of some other variables (used
    /// when composing flows); derivatives are taken with respect to those.
    pub fn forward_jet(&self, input: &Jet, cond: &[f64]) -> Result<Vec<Jet>> {
        if input.len() != self.input_dim {
            return Err(Error::dim("network input", self.input_dim, input.len()));
        }
        if cond.len() != self.cond_dim {
            return Err(Error::dim(
                "network conditioning",
                self.cond_dim,
                cond.len(),
            ));
        }
        let cond = DVector::from_column_slice(cond);
        let mut h = input.clone();
        for layer in &self.hidden {
            h = h
                .affine(&layer.weight, Self::layer_const(layer, &cond))
                .map(tanh_derivs);
        }
        let out = self
            .heads
            .iter()
            .map(|head| {
                let pre = h.affine(&head.layer.weight, Self::layer_const(&head.layer, &cond));
                if head.spec.softplus {
                    pre.map(softplus_derivs)
                } else {
                    pre
                }
            })
            .collect::<Vec<_>>();
        for (jet, head) in out.iter().zip(&self.heads) {
            if jet.value.iter().any(|v| !v.is_finite()) {
                return Err(Error::non_finite(format!("head `{}`", head.spec.name)));
            }
        }
        Ok(out)
    }

    /// Head outputs at `(x, cond)`.
    pub fn forward(&self, x: &[f64], cond: &[f64]) -> Result<Vec<DVector<f64>>> {
        self.check_inputs(x, cond)?;
        Ok(self
            .forward_jet(&Jet::seed(x, Order::Value), cond)?
            .into_iter()
            .map(|j| j.value)
            .collect())
    }

    /// Per-head Jacobians with respect to the input (`head_dim × input_dim`).
    pub fn input_jacobian(&self, x: &[f64], cond: &[f64]) -> Result<Vec<DMatrix<f64>>> {
        self.check_inputs(x, cond)?;
        Ok(self
            .forward_jet(&Jet::seed(x, Order::Jacobian), cond)?
            .into_iter()
            .map(|j| j.jac.expect("jacobian requested"))
            .collect())
    }

    /// Per-head jets carrying either full Hessians or only their traces.
    pub fn input_hessians(&self, x: &[f64], cond: &[f64], trace_only: bool) -> Result<Vec<Jet>> {
        self.check_inputs(x, cond)?;
        let order = if trace_only {
            Order::Trace
        } else {
            Order::Hessian
        };
        self.forward_jet(&Jet::seed(x, order), cond)
    }

    // ---- parameters --------------------------------------------------------

    /// Parameter matrices in canonical order: per layer (hidden, then heads)
    /// the weight, the conditioning weight if any, and the bias as a column.
    pub fn param_matrices(&self) -> Vec<DMatrix<f64>> {
        let mut out = Vec::new();
        for l in self
            .hidden
            .iter()
            .chain(self.heads.iter().map(|h| &h.layer))
        {
            out.push(l.weight.clone());
            if let Some(c) = &l.cond {
                out.push(c.clone());
            }
            out.push(DMatrix::from_column_slice(
                l.bias.len(),
                1,
                l.bias.as_slice(),
            ));
        }
        out
    }

    pub fn param_shapes(&self) -> Vec<(usize, usize)> {
        self.param_matrices().iter().map(|m| m.shape()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(r, c)| r * c).sum()
    }

    /// Masks aligned with [`Self::param_matrices`] (`None` = unconstrained).
    pub fn grad_masks(&self) -> Vec<Option<DMatrix<f64>>> {
        let mut out = Vec::new();
        let hidden_masks: Vec<Option<DMatrix<f64>>> = match &self.masks {
            Some(m) => m.hidden.iter().map(|r| Some(Masks::to_matrix(r))).collect(),
            None => vec![None; self.hidden.len()],
        };
        let head_masks: Vec<Option<DMatrix<f64>>> = match &self.masks {
            Some(m) => m.heads.iter().map(|r| Some(Masks::to_matrix(r))).collect(),
            None => vec![None; self.heads.len()],
        };
        let layers = self
            .hidden
            .iter()
            .chain(self.heads.iter().map(|h| &h.layer));
        for (l, m) in layers.zip(hidden_masks.into_iter().chain(head_masks)) {
            out.push(m);
            if l.cond.is_some() {
                out.push(None);
            }
            out.push(None);
        }
        out
    }

    /// Replaces all parameters; masked entries are forced to zero.
    pub fn set_param_matrices(&mut self, params: &[DMatrix<f64>]) -> Result<()> {
        let shapes = self.param_shapes();
        if params.len() != shapes.len() {
            return Err(Error::dim("parameter count", shapes.len(), params.len()));
        }
        for (p, s) in params.iter().zip(&shapes) {
            if p.shape() != *s {
                return Err(Error::InvalidArgument(format!(
                    "parameter shape {:?} != {:?}",
                    p.shape(),
                    s
                )));
            }
        }
        let masks = self.grad_masks();
        let mut it = params.iter().zip(masks);
        let layers = self
            .hidden
            .iter_mut()
            .chain(self.heads.iter_mut().map(|h| &mut h.layer));
        for l in layers {
            let (w, m) = it.next().expect("shape-checked");
            l.weight = match m {
                Some(m) => w.component_mul(&m),
                None => w.clone(),
            };
            if l.cond.is_some() {
                l.cond = Some(it.next().expect("shape-checked").0.clone());
            }
            l.bias = it.next().expect("shape-checked").0.column(0).into_owned();
        }
        Ok(())
    }

    pub fn flat_params(&self) -> Vec<f64> {
        flatten(&self.param_matrices())
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        let m = unflatten(flat, &self.param_shapes())?;
        self.set_param_matrices(&m)
    }

    /// Little-endian `f64` parameter bytes.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.flat_params()
            .iter()
            .flat_map(|x| x.to_le_bytes())
            .collect()
    }

    /// Rebuilds a network from its manifest and parameter bytes.
    pub fn from_parts(manifest: &NetManifest, bytes: &[u8]) -> Result<Self> {
        if !bytes.len().is_multiple_of(8) {
            return Err(Error::InvalidArgument(
                "parameter byte length not a multiple of 8".into(),
            ));
        }
        let flat: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mut prev = manifest.input_dim;
        let empty = |out: usize, inp: usize| Layer {
            weight: DMatrix::zeros(out, inp),
            cond: (manifest.cond_dim > 0).then(|| DMatrix::zeros(out, manifest.cond_dim)),
            bias: DVector::zeros(out),
        };
        let mut hidden = Vec::new();
        for &w in &manifest.hidden {
            hidden.push(empty(w, prev));
            prev = w;
        }
        let heads = manifest
            .heads
            .iter()
            .map(|s| Head {
                spec: s.clone(),
                layer: empty(s.dim, prev),
            })
            .collect();
        let mut net = Self {
            input_dim: manifest.input_dim,
            cond_dim: manifest.cond_dim,
            hidden,
            heads,
            masks: manifest.masks.clone(),
        };
        net.set_flat_params(&flat)?;
        Ok(net)
    }

    // ---- tape recording -----------------------------------------------------

    /// Registers every parameter matrix as a tape leaf, in canonical order.
    pub fn leaves(&self, tape: &mut Tape) -> Result<Vec<Var>> {
        self.param_matrices()
            .into_iter()
            .map(|m| tape.param(m))
            .collect()
    }

    /// Records a batched forward pass; `input` is `batch × input_dim` and
    /// `cond` is `batch × cond_dim`. Returns one `batch × head_dim` node per head.
    pub fn record(
        &self,
        tape: &mut Tape,
        leaves: &[Var],
        input: Var,
        cond: Option<Var>,
        batch: usize,
    ) -> Result<Vec<Var>> {
        let mut it = leaves.iter().copied();
        let mut next = || {
            it.next()
                .ok_or_else(|| Error::InvalidArgument("too few leaves".into()))
        };
        let layer_pre = |tape: &mut Tape,
                         h: Var,
                         layer: &Layer,
                         next: &mut dyn FnMut() -> Result<Var>|
         -> Result<Var> {
            let w = next()?;
            let wt = tape.transpose(w)?;
            let mut pre = tape.matmul(h, wt)?;
            if layer.cond.is_some() {
                let c = next()?;
                let cv = cond
                    .ok_or_else(|| Error::InvalidArgument("conditioning input missing".into()))?;
                let ct = tape.transpose(c)?;
                let cc = tape.matmul(cv, ct)?;
                pre = tape.add(pre, cc)?;
            }
            let b = next()?;
            let bb = tape.broadcast_rows(b, batch)?;
            tape.add(pre, bb)
        };
        let mut h = input;
        for layer in &self.hidden {
            let pre = layer_pre(tape, h, layer, &mut next)?;
            h = tape.tanh(pre)?;
        }
        let mut outs = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let pre = layer_pre(tape, h, &head.layer, &mut next)?;
            outs.push(if head.spec.softplus {
                tape.softplus(pre)?
            } else {
                pre
            });
        }
        Ok(outs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn random_net(seed: u64, masked: bool, d: usize, cond: usize, hidden: &[usize]) -> Mlp {
        let mut rng = seeded(seed);
        let heads = [HeadSpec::linear("mu", d), HeadSpec::positive("sigma", d)];
        let mut net = if masked {
            Mlp::made(d, cond, hidden, &heads, &mut rng).unwrap()
        } else {
            Mlp::new(d, cond, hidden, &heads, &mut rng)
        };
        // spread the biases so tanh units sit away from zero
        let mut p = net.param_matrices();
        for m in p.iter_mut() {
            if m.ncols() == 1 {
                m.iter_mut().for_each(|b| *b = rng.random_range(-0.8..0.8));
            }
        }
        net.set_param_matrices(&p).unwrap();
        net
    }

    /// Independent straight-line evaluation of the affine/tanh chain.
    fn plain_forward(net: &Mlp, x: &[f64], cond: &[f64]) -> Vec<Vec<f64>> {
        let mut h: Vec<f64> = x.to_vec();
        let apply = |l: &Layer, h: &[f64]| -> Vec<f64> {
            (0..l.bias.len())
                .map(|u| {
                    let mut s = l.bias[u];
                    for (j, hj) in h.iter().enumerate() {
                        s += l.weight[(u, j)] * hj;
                    }
                    if let Some(c) = &l.cond {
                        for (j, cj) in cond.iter().enumerate() {
                            s += c[(u, j)] * cj;
                        }
                    }
                    s
                })
                .collect()
        };
        for l in &net.hidden {
            h = apply(l, &h).into_iter().map(f64::tanh).collect();
        }
        net.heads
            .iter()
            .map(|hd| {
                let o = apply(&hd.layer, &h);
                if hd.spec.softplus {
                    o.into_iter().map(softplus).collect()
                } else {
                    o
                }
            })
            .collect()
    }

    fn rel(a: f64, b: f64, floor: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(floor)
    }

    #[test]
    fn zero_weights_give_head_bias() {
        let mut net = random_net(1, false, 3, 2, &[5, 4]);
        for l in net
            .hidden
            .iter_mut()
            .chain(net.heads.iter_mut().map(|h| &mut h.layer))
        {
            l.weight.fill(0.0);
            if let Some(c) = l.cond.as_mut() {
                c.fill(0.0);
            }
        }
        for l in net.hidden.iter_mut() {
            l.bias.fill(0.0);
        }
        net.heads[0].layer.bias = DVector::from_vec(vec![0.3, -1.0, 2.0]);
        let out = net.forward(&[1.0, 2.0, 3.0], &[0.5, 0.5]).unwrap();
        assert_eq!(out[0].as_slice(), &[0.3, -1.0, 2.0]);
    }

    #[test]
    fn forward_matches_independent_evaluator() {
        for seed in 0..20 {
            let net = random_net(seed, seed % 2 == 0, 3, 2, &[6, 5]);
            let mut rng = seeded(100 + seed);
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let c: Vec<f64> = (0..2).map(|_| rng.random_range(-2.0..2.0)).collect();
            let a = net.forward(&x, &c).unwrap();
            let b = plain_forward(&net, &x, &c);
            for (ha, hb) in a.iter().zip(&b) {
                for (u, v) in ha.iter().zip(hb) {
                    assert!((u - v).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let net = random_net(3, false, 3, 2, &[4]);
        assert!(net.forward(&[1.0, 2.0], &[0.0, 0.0]).is_err());
        assert!(net.forward(&[1.0, 2.0, 3.0], &[0.0]).is_err());
    }

    #[test]
    fn masked_outputs_ignore_later_inputs() {
        let net = random_net(4, true, 4, 2, &[12, 12]);
        let x = [0.3, -0.7, 1.1, 0.4];
        let c = [0.2, -0.1];
        let base = net.forward(&x, &c).unwrap();
        for j in 0..4 {
            let mut xp = x;
            xp[j] += 1.7;
            let pert = net.forward(&xp, &c).unwrap();
            for head in 0..2 {
                for i in 0..=j {
                    assert_eq!(
                        base[head][i], pert[head][i],
                        "head {head} out {i} moved with x{j}"
                    );
                }
            }
        }
    }

    #[test]
    fn affine_net_jacobian_is_weight_and_hessian_zero() {
        let mut rng = seeded(9);
        let net = Mlp::new(3, 0, &[], &[HeadSpec::linear("o", 2)], &mut rng);
        let j = net.input_jacobian(&[0.1, 0.2, 0.3], &[]).unwrap();
        assert_eq!(j[0], net.heads[0].layer.weight);
        let h = net.input_hessians(&[0.1, 0.2, 0.3], &[], false).unwrap();
        assert!(h[0].hess.as_ref().unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn masked_jacobian_is_strictly_lower_triangular() {
        let net = random_net(5, true, 4, 1, &[10]);
        let j = net.input_jacobian(&[0.1, -0.3, 0.5, 0.9], &[0.4]).unwrap();
        for head in &j {
            for i in 0..4 {
                for k in i..4 {
                    assert_eq!(head[(i, k)], 0.0);
                }
            }
        }
    }

    #[test]
    fn single_tanh_unit_second_derivative() {
        let mut rng = seeded(0);
        let mut net = Mlp::new(1, 0, &[1], &[HeadSpec::linear("o", 1)], &mut rng);
        let (w, b, a) = (0.7, -0.2, 1.3);
        net.hidden[0].weight[(0, 0)] = w;
        net.hidden[0].bias[0] = b;
        net.heads[0].layer.weight[(0, 0)] = a;
        let x = 0.45;
        let h = (w * x + b).tanh();
        let expected = a * w * w * (-2.0 * h) * (1.0 - h * h);
        let jets = net.input_hessians(&[x], &[], false).unwrap();
        assert!((jets[0].hessian(0).unwrap()[(0, 0)] - expected).abs() < 1e-15);
    }

    fn eval_head(net: &Mlp, x: &[f64], c: &[f64], head: usize, k: usize) -> f64 {
        net.forward(x, c).unwrap()[head][k]
    }

    #[test]
    fn jacobian_and_hessian_match_finite_differences() {
        for seed in 0..50u64 {
            let masked = seed % 2 == 1;
            let net = random_net(seed, masked, 3, 2, &[7, 6]);
            let mut rng = seeded(500 + seed);
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.5..1.5)).collect();
            let c: Vec<f64> = (0..2).map(|_| rng.random_range(-1.5..1.5)).collect();
            let jac = net.input_jacobian(&x, &c).unwrap();
            let jets = net.input_hessians(&x, &c, false).unwrap();
            let traces = net.input_hessians(&x, &c, true).unwrap();
            for head in 0..2 {
                for k in 0..3 {
                    let hess = jets[head].hessian(k).unwrap();
                    for i in 0..3 {
                        let h = 1e-5;
                        let mut up = x.clone();
                        let mut dn = x.clone();
                        up[i] += h;
                        dn[i] -= h;
                        let fd = (eval_head(&net, &up, &c, head, k)
                            - eval_head(&net, &dn, &c, head, k))
                            / (2.0 * h);
                        assert!(rel(jac[head][(k, i)], fd, 1e-3) < 1e-5, "jac seed {seed}");
                        for l in 0..3 {
                            let h = 1e-3;
                            let f = |di: f64, dl: f64| {
                                let mut p = x.clone();
                                p[i] += di;
                                p[l] += dl;
                                eval_head(&net, &p, &c, head, k)
                            };
                            let fd2 = (f(h, h) - f(h, -h) - f(-h, h) + f(-h, -h)) / (4.0 * h * h);
                            assert!(
                                rel(hess[(i, l)], fd2, 1e-2) < 1e-3,
                                "hess seed {seed}: {} vs {fd2}",
                                hess[(i, l)]
                            );
                        }
                    }
                    let tr: f64 = (0..3).map(|i| hess[(i, i)]).sum();
                    assert!((traces[head].trace.as_ref().unwrap()[k] - tr).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn sigma_head_stays_within_softplus_bounds() {
        let net = random_net(21, true, 3, 2, &[8]);
        let head = &net.heads[1].layer;
        let mut rng = seeded(22);
        for i in 0..3 {
            let s: f64 = head.weight.row(i).iter().map(|v| v.abs()).sum::<f64>()
                + head
                    .cond
                    .as_ref()
                    .unwrap()
                    .row(i)
                    .iter()
                    .map(|v| v.abs())
                    .sum::<f64>()
                    * 2.0
                + head.bias[i].abs();
            let (lo, hi) = (softplus(-s), softplus(s));
            for _ in 0..200 {
                let scale = 10f64.powf(rng.random_range(0.0..3.0));
                let x: Vec<f64> = (0..3)
                    .map(|_| rng.random_range(-1.0..1.0) * scale)
                    .collect();
                let c: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
                let sigma = net.forward(&x, &c).unwrap()[1][i];
                assert!(sigma >= lo && sigma <= hi);
            }
        }
    }

    #[test]
    fn tape_record_matches_jet_forward() {
        let net = random_net(8, true, 3, 2, &[5, 4]);
        let mut rng = seeded(81);
        let xs = DMatrix::from_fn(4, 3, |_, _| rng.random_range(-1.0..1.0));
        let cs = DMatrix::from_fn(4, 2, |_, _| rng.random_range(-1.0..1.0));
        let mut tape = Tape::new();
        let leaves = net.leaves(&mut tape).unwrap();
        let xi = tape.constant(xs.clone()).unwrap();
        let ci = tape.constant(cs.clone()).unwrap();
        let outs = net.record(&mut tape, &leaves, xi, Some(ci), 4).unwrap();
        for r in 0..4 {
            let x: Vec<f64> = xs.row(r).iter().copied().collect();
            let c: Vec<f64> = cs.row(r).iter().copied().collect();
            let f = net.forward(&x, &c).unwrap();
            for (h, o) in outs.iter().enumerate() {
                for k in 0..3 {
                    assert!((tape.value(*o)[(r, k)] - f[h][k]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn serialization_round_trip_is_bit_exact() {
        let net = random_net(31, true, 3, 2, &[5]);
        let manifest: NetManifest =
            serde_json::from_str(&serde_json::to_string(&net.manifest()).unwrap()).unwrap();
        let back = Mlp::from_parts(&manifest, &net.to_le_bytes()).unwrap();
        assert_eq!(back, net);
    }
}
