//! Reverse-mode differentiation over a recorded tape of matrix primitives.
//!
//! A [`Tape`] records every operation eagerly: values are computed at
//! construction and checked for finiteness, so a bad intermediate is
//! reported at the node that produced it. [`Tape::backward`] then sweeps the
//! nodes in reverse order and returns the adjoint of every parameter leaf.
//!
//! Only parameter gradients flow through the tape. Derivatives with respect
//! to network inputs are written out analytically in [`crate::nets`] and
//! recorded here as ordinary compositions of primitives.
//!
//! ```
//! use nalgebra::DMatrix;
//! use nsm_bayes::diff::grad;
//!
//! // f(p) = sum(p ⊙ p)  =>  ∇f = 2p
//! let p = DMatrix::from_row_slice(1, 3, &[1.0, -2.0, 0.5]);
//! let (value, g) = grad(&[p.clone()], |tape, params| {
//!     let sq = tape.square(params[0])?;
//!     tape.sum(sq)
//! })
//! .unwrap();
//! assert_eq!(value, 5.25);
//! assert_eq!(g[0], p * 2.0);
//! ```

use std::fmt;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::stats::sigmoid;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The supported primitive operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Primitive {
    Leaf,
    MatMul,
    Add,
    Mul,
    Tanh,
    Softplus,
    Square,
    Sum,
    /// Row-wise log-sum-exp: `n×k -> n×1`.
    LogSumExp,
    Ln,
    Recip,
    Transpose,
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Primitive::Leaf => "leaf",
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Mul => "mul",
            Primitive::Tanh => "tanh",
            Primitive::Softplus => "softplus",
            Primitive::Square => "square",
            Primitive::Sum => "sum",
            Primitive::LogSumExp => "logsumexp",
            Primitive::Ln => "ln",
            Primitive::Recip => "recip",
            Primitive::Transpose => "transpose",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Primitive {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "matmul" => Primitive::MatMul,
            "add" => Primitive::Add,
            "mul" => Primitive::Mul,
            "tanh" => Primitive::Tanh,
            "softplus" => Primitive::Softplus,
            "square" => Primitive::Square,
            "sum" => Primitive::Sum,
            "logsumexp" => Primitive::LogSumExp,
            "ln" => Primitive::Ln,
            "recip" => Primitive::Recip,
            "transpose" => Primitive::Transpose,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unsupported primitive `{other}`"
                )))
            }
        })
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Primitive,
    inputs: [usize; 2],
    value: DMatrix<f64>,
    /// True if some parameter leaf is upstream of this node.
    tracked: bool,
}

/// A single-use computation record.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<usize>,
}

/// Adjoints of the parameter leaves, in registration order.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub value: f64,
    pub params: Vec<DMatrix<f64>>,
}

const NONE: usize = usize::MAX;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &DMatrix<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[(0, 0)]
    }

    /// Registers a differentiable leaf; its adjoint appears in [`Gradients::params`].
    pub fn param(&mut self, value: DMatrix<f64>) -> Result<Var> {
        let v = self.push(Primitive::Leaf, [NONE, NONE], value, true)?;
        self.params.push(v.0);
        Ok(v)
    }

    /// A constant leaf (data, masks, fixed coefficients).
    pub fn constant(&mut self, value: DMatrix<f64>) -> Result<Var> {
        self.push(Primitive::Leaf, [NONE, NONE], value, false)
    }

    pub fn filled(&mut self, rows: usize, cols: usize, c: f64) -> Result<Var> {
        self.constant(DMatrix::from_element(rows, cols, c))
    }

    fn push(
        &mut self,
        op: Primitive,
        inputs: [usize; 2],
        value: DMatrix<f64>,
        tracked: bool,
    ) -> Result<Var> {
        if let Some(pos) = value.iter().position(|x| !x.is_finite()) {
            return Err(Error::non_finite(format!(
                "tape node {} ({op}), entry {pos} of {}x{}",
                self.nodes.len(),
                value.nrows(),
                value.ncols()
            )));
        }
        self.nodes.push(Node {
            op,
            inputs,
            value,
            tracked,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn unary(&mut self, op: Primitive, a: Var, value: DMatrix<f64>) -> Result<Var> {
        let t = self.tracked(a);
        self.push(op, [a.0, NONE], value, t)
    }

    fn binary(&mut self, op: Primitive, a: Var, b: Var, value: DMatrix<f64>) -> Result<Var> {
        let t = self.tracked(a) || self.tracked(b);
        self.push(op, [a.0, b.0], value, t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, _) = self.shape(b);
        if ac != br {
            return Err(Error::InvalidArgument(format!(
                "matmul shape mismatch: {ar}x{ac} · {br}x?"
            )));
        }
        let v = self.value(a) * self.value(b);
        self.binary(Primitive::MatMul, a, b, v)
    }

    fn check_same(&self, a: Var, b: Var, op: Primitive) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::InvalidArgument(format!(
                "{op} shape mismatch: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, Primitive::Add)?;
        let v = self.value(a) + self.value(b);
        self.binary(Primitive::Add, a, b, v)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, Primitive::Mul)?;
        let v = self.value(a).component_mul(self.value(b));
        self.binary(Primitive::Mul, a, b, v)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::tanh);
        self.unary(Primitive::Tanh, a, v)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(crate::stats::softplus);
        self.unary(Primitive::Softplus, a, v)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x * x);
        self.unary(Primitive::Square, a, v)
    }

    /// Sum of all entries, as a 1×1 node.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = DMatrix::from_element(1, 1, self.value(a).sum());
        self.unary(Primitive::Sum, a, v)
    }

    pub fn log_sum_exp(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a);
        let v = DMatrix::from_fn(m.nrows(), 1, |i, _| {
            let row = m.row(i);
            let mx = row.max();
            mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
        });
        self.unary(Primitive::LogSumExp, a, v)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::ln);
        self.unary(Primitive::Ln, a, v)
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| 1.0 / x);
        self.unary(Primitive::Recip, a, v)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose();
        self.unary(Primitive::Transpose, a, v)
    }

    // Conveniences composed from the primitives above.

    /// `c · a` for a scalar constant `c`.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let (r, k) = self.shape(a);
        let cst = self.filled(r, k, c)?;
        self.mul(a, cst)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    /// `a + c` for a scalar constant `c`.
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let (r, k) = self.shape(a);
        let cst = self.filled(r, k, c)?;
        self.add(a, cst)
    }

    /// Broadcasts a `k×1` column (e.g. a bias) across `rows` rows: `rows×k`.
    pub fn broadcast_rows(&mut self, col: Var, rows: usize) -> Result<Var> {
        let ones = self.filled(rows, 1, 1.0)?;
        let t = self.transpose(col)?;
        self.matmul(ones, t)
    }

    /// Row sums: `n×k -> n×1`.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let (_, k) = self.shape(a);
        let ones = self.filled(k, 1, 1.0)?;
        self.matmul(a, ones)
    }

    /// Reverse sweep from a 1×1 root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.shape(root) != (1, 1) {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar root, got {:?}",
                self.shape(root)
            )));
        }
        let mut adj: Vec<Option<DMatrix<f64>>> = vec![None; self.nodes.len()];
        adj[root.0] = Some(DMatrix::from_element(1, 1, 1.0));

        fn acc(slot: &mut Option<DMatrix<f64>>, g: DMatrix<f64>) {
            match slot {
                Some(s) => *s += g,
                None => *slot = Some(g),
            }
        }

        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let [a, b] = node.inputs;
            match node.op {
                Primitive::Leaf => {
                    adj[i] = Some(g);
                    continue;
                }
                Primitive::MatMul => {
                    let va = &self.nodes[a].value;
                    let vb = &self.nodes[b].value;
                    if self.nodes[a].tracked {
                        acc(&mut adj[a], &g * vb.transpose());
                    }
                    if self.nodes[b].tracked {
                        acc(&mut adj[b], va.transpose() * &g);
                    }
                }
                Primitive::Add => {
                    if self.nodes[a].tracked {
                        acc(&mut adj[a], g.clone());
                    }
                    if self.nodes[b].tracked {
                        acc(&mut adj[b], g);
                    }
                }
                Primitive::Mul => {
                    if self.nodes[a].tracked {
                        acc(&mut adj[a], g.component_mul(&self.nodes[b].value));
                    }
                    if self.nodes[b].tracked {
                        acc(&mut adj[b], g.component_mul(&self.nodes[a].value));
                    }
                }
                Primitive::Tanh => {
                    let y = &node.value;
                    acc(&mut adj[a], g.zip_map(y, |g, y| g * (1.0 - y * y)));
                }
                Primitive::Softplus => {
                    let x = &self.nodes[a].value;
                    acc(&mut adj[a], g.zip_map(x, |g, x| g * sigmoid(x)));
                }
                Primitive::Square => {
                    let x = &self.nodes[a].value;
                    acc(&mut adj[a], g.zip_map(x, |g, x| 2.0 * g * x));
                }
                Primitive::Sum => {
                    let (r, c) = self.nodes[a].value.shape();
                    acc(&mut adj[a], DMatrix::from_element(r, c, g[(0, 0)]));
                }
                Primitive::LogSumExp => {
                    let x = &self.nodes[a].value;
                    let y = &node.value;
                    let d = DMatrix::from_fn(x.nrows(), x.ncols(), |r, c| {
                        g[(r, 0)] * (x[(r, c)] - y[(r, 0)]).exp()
                    });
                    acc(&mut adj[a], d);
                }
                Primitive::Ln => {
                    let x = &self.nodes[a].value;
                    acc(&mut adj[a], g.zip_map(x, |g, x| g / x));
                }
                Primitive::Recip => {
                    let y = &node.value;
                    acc(&mut adj[a], g.zip_map(y, |g, y| -g * y * y));
                }
                Primitive::Transpose => {
                    acc(&mut adj[a], g.transpose());
                }
            }
        }

        let params = self
            .params
            .iter()
            .map(|&p| {
                adj[p].take().unwrap_or_else(|| {
                    DMatrix::zeros(self.nodes[p].value.nrows(), self.nodes[p].value.ncols())
                })
            })
            .collect();
        Ok(Gradients {
            value: self.scalar(root),
            params,
        })
    }
}

/// Evaluates a scalar objective and its gradient with respect to `params`.
///
/// The closure receives a fresh tape and one leaf per parameter matrix and
/// must return a 1×1 node.
pub fn grad<F>(params: &[DMatrix<f64>], objective: F) -> Result<(f64, Vec<DMatrix<f64>>)>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaves = params
        .iter()
        .map(|p| tape.param(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let root = objective(&mut tape, &leaves)?;
    let g = tape.backward(root)?;
    Ok((g.value, g.params))
}

/// Flattens matrices row-major, in order.
pub fn flatten(params: &[DMatrix<f64>]) -> Vec<f64> {
    let mut out = Vec::with_capacity(params.iter().map(|p| p.len()).sum());
    for p in params {
        for r in 0..p.nrows() {
            for c in 0..p.ncols() {
                out.push(p[(r, c)]);
            }
        }
    }
    out
}

/// Inverse of [`flatten`] given the shapes.
pub fn unflatten(flat: &[f64], shapes: &[(usize, usize)]) -> Result<Vec<DMatrix<f64>>> {
    let total: usize = shapes.iter().map(|(r, c)| r * c).sum();
    if total != flat.len() {
        return Err(Error::dim("unflatten", total, flat.len()));
    }
    let mut off = 0;
    Ok(shapes
        .iter()
        .map(|&(r, c)| {
            let m = DMatrix::from_row_slice(r, c, &flat[off..off + r * c]);
            off += r * c;
            m
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;

    fn rand_mat(rng: &mut impl Rng, r: usize, c: usize, lo: f64, hi: f64) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(lo..hi))
    }

    /// Central finite differences of a scalar function of the flattened parameters.
    fn fd_gradient(
        params: &[DMatrix<f64>],
        f: &dyn Fn(&[DMatrix<f64>]) -> f64,
        h: f64,
    ) -> Vec<f64> {
        let shapes: Vec<_> = params.iter().map(|p| p.shape()).collect();
        let flat = flatten(params);
        (0..flat.len())
            .map(|k| {
                let mut up = flat.clone();
                let mut dn = flat.clone();
                up[k] += h;
                dn[k] -= h;
                let fu = f(&unflatten(&up, &shapes).unwrap());
                let fd = f(&unflatten(&dn, &shapes).unwrap());
                (fu - fd) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
    }

    #[test]
    fn constant_objective_has_zero_gradient() {
        let p = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let (v, g) = grad(&[p], |t, _| t.filled(1, 1, 3.5)).unwrap();
        assert_eq!(v, 3.5);
        assert!(g[0].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn linear_objective_gradient_is_coefficient() {
        let a = DMatrix::from_row_slice(1, 3, &[0.5, -1.0, 2.0]);
        let p = DMatrix::from_row_slice(3, 1, &[1.0, 1.0, 1.0]);
        let a2 = a.clone();
        let (v, g) = grad(&[p], move |t, ps| {
            let c = t.constant(a2)?;
            t.matmul(c, ps[0])
        })
        .unwrap();
        assert_eq!(v, 1.5);
        assert_eq!(g[0], a.transpose());
    }

    #[test]
    fn unknown_primitive_name_is_rejected() {
        assert!("conv2d".parse::<Primitive>().is_err());
        assert_eq!("tanh".parse::<Primitive>().unwrap(), Primitive::Tanh);
    }

    #[test]
    fn non_finite_intermediate_names_node() {
        let mut t = Tape::new();
        let z = t.filled(1, 1, 0.0).unwrap();
        let err = t.ln(z).unwrap_err().to_string();
        assert!(err.contains("tape node 1 (ln)"), "{err}");
    }

    #[test]
    fn shape_errors_at_construction() {
        let mut t = Tape::new();
        let a = t.filled(2, 3, 1.0).unwrap();
        let b = t.filled(2, 3, 1.0).unwrap();
        assert!(t.matmul(a, b).is_err());
        let c = t.filled(3, 2, 1.0).unwrap();
        assert!(t.add(a, c).is_err());
    }

    /// Two-layer tanh network with a scalar output, batched over rows of `x`.
    fn two_layer(t: &mut Tape, p: &[Var], x: &DMatrix<f64>) -> Result<Var> {
        let xv = t.constant(x.clone())?;
        let w1t = t.transpose(p[0])?;
        let a = t.matmul(xv, w1t)?;
        let b1 = t.broadcast_rows(p[1], x.nrows())?;
        let a = t.add(a, b1)?;
        let h = t.tanh(a)?;
        let w2t = t.transpose(p[2])?;
        let o = t.matmul(h, w2t)?;
        let sq = t.square(o)?;
        t.sum(sq)
    }

    fn two_layer_plain(p: &[DMatrix<f64>], x: &DMatrix<f64>) -> f64 {
        let mut s = 0.0;
        for i in 0..x.nrows() {
            let xi = x.row(i).transpose();
            let h = (&p[0] * xi + &p[1]).map(f64::tanh);
            let o = (&p[2] * h)[(0, 0)];
            s += o * o;
        }
        s
    }

    #[test]
    fn two_layer_tanh_matches_finite_differences() {
        let mut rng = seeded(11);
        let x = rand_mat(&mut rng, 5, 3, -1.0, 1.0);
        let params = vec![
            rand_mat(&mut rng, 4, 3, -1.0, 1.0),
            rand_mat(&mut rng, 4, 1, -0.5, 0.5),
            rand_mat(&mut rng, 1, 4, -1.0, 1.0),
        ];
        let xc = x.clone();
        let (v, g) = grad(&params, |t, p| two_layer(t, p, &xc)).unwrap();
        assert!((v - two_layer_plain(&params, &x)).abs() < 1e-12);
        let fd = fd_gradient(&params, &|p| two_layer_plain(p, &x), 1e-5);
        for (a, b) in flatten(&g).iter().zip(&fd) {
            assert!(rel_err(*a, *b) < 1e-6, "{a} vs {b}");
        }
    }

    /// Every primitive, checked against central differences on 100 seeds.
    #[test]
    fn every_primitive_matches_finite_differences() {
        type Build = fn(&mut Tape, Var, Var) -> Result<Var>;
        let cases: Vec<(&str, Build)> = vec![
            ("matmul", |t, a, b| {
                let bt = t.transpose(b)?;
                t.matmul(a, bt)
            }),
            ("add", |t, a, b| t.add(a, b)),
            ("mul", |t, a, b| t.mul(a, b)),
            ("tanh", |t, a, _| t.tanh(a)),
            ("softplus", |t, a, _| t.softplus(a)),
            ("square", |t, a, _| t.square(a)),
            ("logsumexp", |t, a, _| t.log_sum_exp(a)),
            ("ln", |t, a, _| {
                let s = t.square(a)?;
                let s = t.add_scalar(s, 0.5)?;
                t.ln(s)
            }),
            ("recip", |t, a, _| {
                let s = t.square(a)?;
                let s = t.add_scalar(s, 0.5)?;
                t.recip(s)
            }),
            ("transpose", |t, a, _| t.transpose(a)),
        ];
        for (name, build) in cases {
            for seed in 0..100u64 {
                let mut rng = seeded(1000 + seed);
                let a = rand_mat(&mut rng, 3, 2, -1.5, 1.5);
                let b = rand_mat(&mut rng, 3, 2, -1.5, 1.5);
                // random linear readout so every output entry contributes
                let wsum = rand_mat(&mut rng, 3, 3, -1.0, 1.0);
                let objective = |t: &mut Tape, p: &[Var]| -> Result<Var> {
                    let out = build(t, p[0], p[1])?;
                    let (r, c) = t.value(out).shape();
                    let w = t.constant(wsum.view((0, 0), (r, c)).into_owned())?;
                    let m = t.mul(out, w)?;
                    t.sum(m)
                };
                let params = vec![a, b];
                let (_, g) = grad(&params, objective).unwrap();
                let f = |p: &[DMatrix<f64>]| {
                    let mut t = Tape::new();
                    let va = t.constant(p[0].clone()).unwrap();
                    let vb = t.constant(p[1].clone()).unwrap();
                    let out = objective(&mut t, &[va, vb]).unwrap();
                    t.scalar(out)
                };
                let fd = fd_gradient(&params, &f, 1e-5);
                for (x, y) in flatten(&g).iter().zip(&fd) {
                    assert!(rel_err(*x, *y) < 1e-6, "{name} seed {seed}: {x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn repeated_passes_are_bit_identical() {
        let mut rng = seeded(5);
        let x = rand_mat(&mut rng, 7, 3, -1.0, 1.0);
        let params = vec![
            rand_mat(&mut rng, 6, 3, -1.0, 1.0),
            rand_mat(&mut rng, 6, 1, -0.5, 0.5),
            rand_mat(&mut rng, 1, 6, -1.0, 1.0),
        ];
        let r1 = grad(&params, |t, p| two_layer(t, p, &x)).unwrap();
        let r2 = grad(&params, |t, p| two_layer(t, p, &x)).unwrap();
        assert_eq!(r1.0.to_bits(), r2.0.to_bits());
        for (a, b) in r1.1.iter().zip(&r2.1) {
            assert!(a
                .iter()
                .zip(b.iter())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn each_param_receives_one_adjoint() {
        let params = vec![
            DMatrix::from_element(2, 1, 1.0),
            DMatrix::from_element(3, 3, 2.0),
        ];
        let (_, g) = grad(&params, |t, p| t.sum(p[0])).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g[1].shape(), (3, 3));
        assert!(g[1].iter().all(|&x| x == 0.0));
    }
}
