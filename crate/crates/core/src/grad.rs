//! Reverse-mode differentiation over small dense vectors and matrices.
//!
//! A [`Tape`] is an append-only arena of nodes. Every operation pushes a new
//! node whose operands have smaller indices, so walking the arena backwards
//! is a valid reverse topological order and each node is visited once.
//! Tapes are rebuilt per rollout and never shared between threads.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Denominator floor used by [`relative_error`].
pub const REL_ERR_FLOOR: f64 = 1e-6;

const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GradError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("norm underflow: cannot normalize a vector of norm {0:e}")]
    NormUnderflow(f64),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss((usize, usize)),
}

pub type Result<T> = std::result::Result<T, GradError>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named leaf tensor. Only trainable parameters receive gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    pub value: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
    pub trainable: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Vec<f64>, rows: usize, cols: usize) -> Self {
        assert_eq!(value.len(), rows * cols, "parameter shape");
        Parameter {
            name: name.into(),
            value,
            rows,
            cols,
            trainable: true,
        }
    }

    pub fn vector(name: impl Into<String>, value: Vec<f64>) -> Self {
        let n = value.len();
        Self::new(name, value, n, 1)
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatVec(Var, Var),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, Var),
    ScaleConst(Var, f64),
    Tanh(Var),
    Relu(Var),
    Dot(Var, Var),
    Norm(Var),
    Normalize(Var),
    Concat(Vec<Var>),
    Gather(Var, Vec<usize>),
    Sum(Var),
    CosSin(Var),
    QuatToMat(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Vec<f64>,
    rows: usize,
    cols: usize,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, rows: usize, cols: usize, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            value,
            rows,
            cols,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    /// Leaf that participates in differentiation.
    pub fn var(&mut self, value: Vec<f64>, rows: usize, cols: usize) -> Var {
        self.push(value, rows, cols, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Vec<f64>, rows: usize, cols: usize) -> Var {
        self.push(value, rows, cols, Op::Leaf, false)
    }

    pub fn vector(&mut self, value: &[f64]) -> Var {
        self.constant(value.to_vec(), value.len(), 1)
    }

    pub fn scalar_const(&mut self, x: f64) -> Var {
        self.constant(vec![x], 1, 1)
    }

    /// Registers a parameter; it needs a gradient only if trainable.
    pub fn param(&mut self, p: &Parameter) -> Var {
        self.push(p.value.clone(), p.rows, p.cols, Op::Leaf, p.trainable)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.0 * sa.1 != sb.0 * sb.1 {
            return Err(GradError::ShapeMismatch { op, lhs: sa, rhs: sb });
        }
        Ok(())
    }

    /// `w (r x c) * x (c)`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (r, c) = self.shape(w);
        let sx = self.shape(x);
        if sx.0 * sx.1 != c {
            return Err(GradError::ShapeMismatch { op: "matvec", lhs: (r, c), rhs: sx });
        }
        let (wv, xv) = (self.value(w), self.value(x));
        let out: Vec<f64> = wv
            .chunks_exact(c)
            .map(|row| row.iter().zip(xv).map(|(a, b)| a * b).sum())
            .collect();
        let ng = self.ng(w) || self.ng(x);
        Ok(self.push(out, r, 1, Op::MatVec(w, x), ng))
    }

    /// General row-major product `(m x k) * (k x n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (k2, n)) = (self.shape(a), self.shape(b));
        if k != k2 {
            return Err(GradError::ShapeMismatch { op: "matmul", lhs: (m, k), rhs: (k2, n) });
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = av[i * k + p];
                for j in 0..n {
                    out[i * n + j] += aip * bv[p * n + j];
                }
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, m, n, Op::MatMul(a, b), ng))
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, f: fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| f(*x, *y)).collect();
        let (r, c) = self.shape(a);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, r, c, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Vector times a 1x1 node.
    pub fn scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let ss = self.shape(s);
        if ss != (1, 1) {
            return Err(GradError::ShapeMismatch { op: "scale", lhs: self.shape(x), rhs: ss });
        }
        let k = self.scalar(s);
        let out = self.value(x).iter().map(|v| v * k).collect();
        let (r, c) = self.shape(x);
        let ng = self.ng(x) || self.ng(s);
        Ok(self.push(out, r, c, Op::Scale(x, s), ng))
    }

    pub fn scale_const(&mut self, x: Var, k: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * k).collect();
        let (r, c) = self.shape(x);
        let ng = self.ng(x);
        self.push(out, r, c, Op::ScaleConst(x, k), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.tanh()).collect();
        let (r, c) = self.shape(x);
        let ng = self.ng(x);
        self.push(out, r, c, Op::Tanh(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.max(0.0)).collect();
        let (r, c) = self.shape(x);
        let ng = self.ng(x);
        self.push(out, r, c, Op::Relu(x), ng)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("dot", a, b)?;
        let d = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).sum();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![d], 1, 1, Op::Dot(a, b), ng))
    }

    pub fn l2norm(&mut self, x: Var) -> Var {
        let n = norm(self.value(x));
        let ng = self.ng(x);
        self.push(vec![n], 1, 1, Op::Norm(x), ng)
    }

    /// `x / |x|`; fails below a norm of 1e-12.
    pub fn normalize(&mut self, x: Var) -> Result<Var> {
        let n = norm(self.value(x));
        if n < NORM_FLOOR {
            return Err(GradError::NormUnderflow(n));
        }
        let out = self.value(x).iter().map(|v| v / n).collect();
        let (r, c) = self.shape(x);
        let ng = self.ng(x);
        Ok(self.push(out, r, c, Op::Normalize(x), ng))
    }

    /// Stacks vectors into one column.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut out = Vec::new();
        let mut ng = false;
        for &p in parts {
            out.extend_from_slice(self.value(p));
            ng |= self.ng(p);
        }
        let n = out.len();
        self.push(out, n, 1, Op::Concat(parts.to_vec()), ng)
    }

    /// Picks entries by flat index.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = self.value(x);
        let out = idx.iter().map(|&i| xv[i]).collect();
        let ng = self.ng(x);
        self.push(out, idx.len(), 1, Op::Gather(x, idx.to_vec()), ng)
    }

    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather(x, &idx)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let ng = self.ng(x);
        self.push(vec![s], 1, 1, Op::Sum(x), ng)
    }

    /// Sums a list of same-shape nodes.
    pub fn add_all(&mut self, xs: &[Var]) -> Result<Var> {
        let mut acc = xs[0];
        for &x in &xs[1..] {
            acc = self.add(acc, x)?;
        }
        Ok(acc)
    }

    /// Scalar angle to `[cos, sin]`.
    pub fn cos_sin(&mut self, theta: Var) -> Var {
        let t = self.scalar(theta);
        let ng = self.ng(theta);
        self.push(vec![t.cos(), t.sin()], 2, 1, Op::CosSin(theta), ng)
    }

    /// Unit quaternion `wxyz` to a row-major 3x3 rotation matrix.
    pub fn quat_to_mat(&mut self, q: Var) -> Result<Var> {
        let s = self.shape(q);
        if s.0 * s.1 != 4 {
            return Err(GradError::ShapeMismatch { op: "quat_to_mat", lhs: s, rhs: (4, 1) });
        }
        let v = self.value(q);
        let (w, x, y, z) = (v[0], v[1], v[2], v[3]);
        let out = vec![
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ];
        let ng = self.ng(q);
        Ok(self.push(out, 3, 3, Op::QuatToMat(q), ng))
    }

    /// Propagates `d loss / d node` to every node that needs a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(GradError::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.ng(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.ng(v) {
                return;
            }
            let n = self.nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatVec(w, x) => {
                let (wv, xv) = (self.value(*w), self.value(*x));
                let c = xv.len();
                acc(*x, &mut |gx| {
                    for (row, gr) in wv.chunks_exact(c).zip(g) {
                        for (o, wij) in gx.iter_mut().zip(row) {
                            *o += gr * wij;
                        }
                    }
                });
                acc(*w, &mut |gw| {
                    for (grow, gr) in gw.chunks_exact_mut(c).zip(g) {
                        for (o, xj) in grow.iter_mut().zip(xv) {
                            *o += gr * xj;
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let ((m, k), (_, n)) = (self.shape(*a), self.shape(*b));
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |ga| {
                    for i in 0..m {
                        for p in 0..k {
                            ga[i * k + p] += (0..n).map(|j| g[i * n + j] * bv[p * n + j]).sum::<f64>();
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for p in 0..k {
                        for j in 0..n {
                            gb[p * n + j] += (0..m).map(|i| av[i * k + p] * g[i * n + j]).sum::<f64>();
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| axpy(ga, 1.0, g));
                acc(*b, &mut |gb| axpy(gb, 1.0, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| axpy(ga, 1.0, g));
                acc(*b, &mut |gb| axpy(gb, -1.0, g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |ga| ga.iter_mut().zip(g).zip(bv).for_each(|((o, gi), bi)| *o += gi * bi));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).zip(av).for_each(|((o, gi), ai)| *o += gi * ai));
            }
            Op::Scale(x, s) => {
                let k = self.scalar(*s);
                let xv = self.value(*x);
                acc(*x, &mut |gx| axpy(gx, k, g));
                acc(*s, &mut |gs| gs[0] += g.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>());
            }
            Op::ScaleConst(x, k) => acc(*x, &mut |gx| axpy(gx, *k, g)),
            Op::Tanh(x) => {
                let y = &node.value;
                acc(*x, &mut |gx| gx.iter_mut().zip(g).zip(y).for_each(|((o, gi), yi)| *o += gi * (1.0 - yi * yi)));
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                acc(*x, &mut |gx| {
                    gx.iter_mut().zip(g).zip(xv).for_each(|((o, gi), xi)| {
                        if *xi > 0.0 {
                            *o += gi
                        }
                    })
                });
            }
            Op::Dot(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |ga| axpy(ga, g[0], bv));
                acc(*b, &mut |gb| axpy(gb, g[0], av));
            }
            Op::Norm(x) => {
                let xv = self.value(*x);
                let n = node.value[0];
                if n > 0.0 {
                    acc(*x, &mut |gx| axpy(gx, g[0] / n, xv));
                }
            }
            Op::Normalize(x) => {
                let y = &node.value;
                let n = norm(self.value(*x));
                let yg: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                acc(*x, &mut |gx| {
                    gx.iter_mut().zip(g).zip(y).for_each(|((o, gi), yi)| *o += (gi - yi * yg) / n)
                });
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    let seg = &g[off..off + len];
                    acc(*p, &mut |gp| axpy(gp, 1.0, seg));
                    off += len;
                }
            }
            Op::Gather(x, idx) => acc(*x, &mut |gx| {
                for (k, &i) in idx.iter().enumerate() {
                    gx[i] += g[k];
                }
            }),
            Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|o| *o += g[0])),
            Op::CosSin(t) => {
                let (c, s) = (node.value[0], node.value[1]);
                acc(*t, &mut |gt| gt[0] += -s * g[0] + c * g[1]);
            }
            Op::QuatToMat(q) => {
                let v = self.value(*q);
                let (w, x, y, z) = (v[0], v[1], v[2], v[3]);
                let dw = [0.0, -2.0 * z, 2.0 * y, 2.0 * z, 0.0, -2.0 * x, -2.0 * y, 2.0 * x, 0.0];
                let dx = [0.0, 2.0 * y, 2.0 * z, 2.0 * y, -4.0 * x, -2.0 * w, 2.0 * z, 2.0 * w, -4.0 * x];
                let dy = [-4.0 * y, 2.0 * x, 2.0 * w, 2.0 * x, 0.0, 2.0 * z, -2.0 * w, 2.0 * z, -4.0 * y];
                let dz = [-4.0 * z, -2.0 * w, 2.0 * x, 2.0 * w, -4.0 * z, 2.0 * y, 2.0 * x, 2.0 * y, 0.0];
                let d = |j: &[f64; 9]| j.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
                let upd = [d(&dw), d(&dx), d(&dy), d(&dz)];
                acc(*q, &mut |gq| axpy(gq, 1.0, &upd));
            }
        }
    }
}

fn axpy(out: &mut [f64], k: f64, x: &[f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += k * v;
    }
}

pub fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Result of [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `v`; exactly zero if `v` is unreachable or frozen.
    pub fn wrt(&self, v: Var) -> Vec<f64> {
        match self.grads.get(v.0) {
            Some(Some(g)) => g.clone(),
            _ => Vec::new(),
        }
    }

    /// Like [`Gradients::wrt`] but padded to `len` zeros when absent.
    pub fn wrt_or_zero(&self, v: Var, len: usize) -> Vec<f64> {
        match self.grads.get(v.0) {
            Some(Some(g)) => g.clone(),
            _ => vec![0.0; len],
        }
    }

    pub fn is_reached(&self, v: Var) -> bool {
        matches!(self.grads.get(v.0), Some(Some(_)))
    }
}

/// Adaptive-moment optimizer over a fixed list of parameter slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update of every trainable parameter; `grads[i]` pairs with `params[i]`.
    pub fn step(&mut self, params: &mut [&mut Parameter], grads: &[Vec<f64>]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if self.m.len() != params.len() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let g = &grads[i];
            if g.is_empty() {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..p.value.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                p.value[k] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// `|a - b| / max(|a|, |b|, REL_ERR_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

/// Compares the reverse-mode gradient of a scalar function against central
/// differences with step `h`; returns the largest relative error.
pub fn grad_check<F>(f: F, x: &[f64], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.var(x.to_vec(), x.len(), 1);
    let y = f(&mut tape, xv)?;
    let analytic = tape.backward(y)?.wrt_or_zero(xv, x.len());
    let eval = |pt: Vec<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(pt, x.len(), 1);
        let y = f(&mut t, v)?;
        Ok(t.scalar(y))
    };
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[i] += h;
        xm[i] -= h;
        let fd = (eval(xp)? - eval(xm)?) / (2.0 * h);
        worst = worst.max(relative_error(analytic[i], fd));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitive_examples() {
        let mut t = Tape::new();
        let a = t.vector(&[3.0, 4.0]);
        let n = t.normalize(a).unwrap();
        assert_eq!(t.value(n), &[0.6, 0.8]);
        let e1 = t.vector(&[1.0, 0.0]);
        let e2 = t.vector(&[0.0, 1.0]);
        let d = t.dot(e1, e2).unwrap();
        assert_eq!(t.scalar(d), 0.0);

        let mut t = Tape::new();
        let x = t.var(vec![3.0, 4.0], 2, 1);
        let n = t.l2norm(x);
        let g = t.backward(n).unwrap().wrt(x);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn dot_gradient_is_other_operand() {
        let mut t = Tape::new();
        let a = t.var(vec![1.0, -2.0, 0.5], 3, 1);
        let b = t.vector(&[4.0, 5.0, 6.0]);
        let l = t.dot(a, b).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.wrt(a), vec![4.0, 5.0, 6.0]);
        assert!(!g.is_reached(b));
    }

    #[test]
    fn errors() {
        let mut t = Tape::new();
        let a = t.vector(&[1.0, 2.0]);
        let b = t.vector(&[1.0, 2.0, 3.0]);
        assert!(matches!(t.add(a, b), Err(GradError::ShapeMismatch { .. })));
        let z = t.vector(&[0.0, 1e-13]);
        assert!(matches!(t.normalize(z), Err(GradError::NormUnderflow(_))));
        let v = t.var(vec![1.0, 2.0], 2, 1);
        assert!(matches!(t.backward(v), Err(GradError::NonScalarLoss((2, 1)))));
    }

    #[test]
    fn unreachable_leaf_gets_zero() {
        let mut t = Tape::new();
        let a = t.var(vec![1.0, 2.0], 2, 1);
        let unused = t.var(vec![5.0], 1, 1);
        let l = t.sum(a);
        let g = t.backward(l).unwrap();
        assert_eq!(g.wrt_or_zero(unused, 1), vec![0.0]);
        assert!(!g.is_reached(unused));
    }

    #[test]
    fn frozen_parameter_not_reached() {
        let mut p = Parameter::vector("w", vec![1.0, 2.0]);
        p.trainable = false;
        let mut t = Tape::new();
        let w = t.param(&p);
        let x = t.var(vec![3.0, 1.0], 2, 1);
        let d = t.dot(w, x).unwrap();
        let g = t.backward(d).unwrap();
        assert!(!g.is_reached(w));
        assert_eq!(g.wrt(x), vec![1.0, 2.0]);
    }

    fn quadratic(t: &mut Tape, x: Var) -> Result<Var> {
        let sq = t.mul(x, x)?;
        let c = t.vector(&[1.0, 2.0, 3.0]);
        let w = t.mul(sq, c)?;
        Ok(t.sum(w))
    }

    #[test]
    fn quadratic_matches_closed_form() {
        let x = [0.5, -1.0, 2.0];
        let mut t = Tape::new();
        let v = t.var(x.to_vec(), 3, 1);
        let y = quadratic(&mut t, v).unwrap();
        let g = t.backward(y).unwrap().wrt(v);
        let expect = [1.0, -4.0, 12.0];
        for (a, b) in g.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(grad_check(quadratic, &x, 1e-6).unwrap() < 1e-6);
    }

    #[test]
    fn normalize_compose_grad_check() {
        let f = |t: &mut Tape, x: Var| -> Result<Var> {
            let n = t.normalize(x)?;
            let c = t.vector(&[0.3, -0.7, 1.1]);
            t.dot(n, c)
        };
        let x = [0.4, 1.3, -0.2];
        // d/dx <x/|x|, c> = (c - y <y,c>)/|x|
        let nx = norm(&x);
        let y: Vec<f64> = x.iter().map(|v| v / nx).collect();
        let c = [0.3, -0.7, 1.1];
        let yc: f64 = y.iter().zip(c).map(|(a, b)| a * b).sum();
        let mut t = Tape::new();
        let v = t.var(x.to_vec(), 3, 1);
        let out = f(&mut t, v).unwrap();
        let g = t.backward(out).unwrap().wrt(v);
        for i in 0..3 {
            assert!((g[i] - (c[i] - y[i] * yc) / nx).abs() < 1e-12);
        }
        assert!(grad_check(f, &x, 1e-6).unwrap() < 1e-6);
    }

    #[test]
    fn tanh_chain_grad_check() {
        let f = |t: &mut Tape, x: Var| -> Result<Var> {
            let a = t.tanh(x);
            let b = t.scale_const(a, 1.7);
            let c = t.tanh(b);
            Ok(t.sum(c))
        };
        let x = [0.2, -0.9, 0.6];
        let mut t = Tape::new();
        let v = t.var(x.to_vec(), 3, 1);
        let out = f(&mut t, v).unwrap();
        let g = t.backward(out).unwrap().wrt(v);
        for i in 0..3 {
            let a = x[i].tanh();
            let c = (1.7 * a).tanh();
            let expect = (1.0 - c * c) * 1.7 * (1.0 - a * a);
            assert!((g[i] - expect).abs() < 1e-12);
        }
        assert!(grad_check(f, &x, 1e-6).unwrap() < 1e-6);
    }

    #[test]
    fn normalize_matvec_chain_grad_check() {
        let w: Vec<f64> = (0..12).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.3 + 0.1).collect();
        let f = move |t: &mut Tape, x: Var| -> Result<Var> {
            let wv = t.constant(w.clone(), 3, 4);
            let h = t.matvec(wv, x)?;
            let n = t.normalize(h)?;
            let c = t.vector(&[1.0, 0.5, -0.25]);
            t.dot(n, c)
        };
        assert!(grad_check(f, &[0.3, -0.2, 0.8, 1.1], 1e-6).unwrap() < 1e-5);
    }

    #[test]
    fn weight_gradients_grad_check() {
        let x = [0.3, -0.2, 0.8];
        let f = move |t: &mut Tape, w: Var| -> Result<Var> {
            let xv = t.vector(&x);
            let h = t.matmul(w, xv)?;
            let a = t.tanh(h);
            let b = t.relu(a);
            let s = t.gather(b, &[0, 1]);
            let q = t.mul(s, s)?;
            Ok(t.sum(q))
        };
        let w: Vec<f64> = vec![0.5, -0.3, 0.2, 0.9, 0.4, -0.6];
        let mut t = Tape::new();
        let wv = t.var(w.clone(), 2, 3);
        let y = f(&mut t, wv).unwrap();
        let an = t.backward(y).unwrap().wrt(wv);
        for i in 0..6 {
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp[i] += 1e-6;
            wm[i] -= 1e-6;
            let ev = |ww: Vec<f64>| {
                let mut t = Tape::new();
                let v = t.constant(ww, 2, 3);
                let y = f(&mut t, v).unwrap();
                t.scalar(y)
            };
            let fd = (ev(wp) - ev(wm)) / 2e-6;
            assert!(relative_error(an[i], fd) < 1e-6, "{i}: {} vs {fd}", an[i]);
        }
    }

    #[test]
    fn rotation_ops_grad_check() {
        let f = |t: &mut Tape, x: Var| -> Result<Var> {
            let q = t.slice(x, 0, 4);
            let qn = t.normalize(q)?;
            let m = t.quat_to_mat(qn)?;
            let th = t.slice(x, 4, 1);
            let cs = t.cos_sin(th);
            let a = t.constant(vec![0.2, -1.0, 0.5, 0.3, 0.3, 0.9, -0.4, 0.1, 0.7], 3, 3);
            let am = t.matmul(a, m)?;
            let cols = t.gather(am, &[0, 3, 6, 1, 4, 7]);
            let c = t.vector(&[1.0, 2.0, -1.0, 0.5, 0.25, 3.0]);
            let d1 = t.dot(cols, c)?;
            let e = t.vector(&[0.7, -0.4]);
            let d2 = t.dot(cs, e)?;
            let s = t.concat(&[d1, d2]);
            Ok(t.sum(s))
        };
        assert!(grad_check(f, &[0.8, 0.2, -0.4, 0.3, 0.9], 1e-6).unwrap() < 1e-6);
    }

    #[test]
    fn linearity_of_backward() {
        let build = |t: &mut Tape| {
            let x = t.var(vec![0.3, -1.2, 0.7], 3, 1);
            let a = t.tanh(x);
            let l1 = t.sum(a);
            let n = t.l2norm(x);
            let c = t.vector(&[1.0, 2.0, 3.0]);
            let l2d = t.dot(x, c).unwrap();
            let l2 = t.mul(l2d, n).unwrap();
            (x, l1, l2)
        };
        let mut t = Tape::new();
        let (x, l1, l2) = build(&mut t);
        let s = t.add(l1, l2).unwrap();
        let gs = t.backward(s).unwrap().wrt(x);
        let g1 = t.backward(l1).unwrap().wrt(x);
        let g2 = t.backward(l2).unwrap().wrt(x);
        for i in 0..3 {
            assert!((gs[i] - (g1[i] + g2[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_zero_grad_and_direction() {
        let mut p = Parameter::vector("p", vec![1.0, -1.0]);
        let mut opt = Adam::new(0.1);
        opt.step(&mut [&mut p], &[vec![0.0, 0.0]]);
        assert_eq!(p.value, vec![1.0, -1.0]);
        for _ in 0..50 {
            opt.step(&mut [&mut p], &[vec![2.0, -3.0]]);
        }
        assert!(p.value[0] < 1.0 && p.value[1] > -1.0);
    }

    #[test]
    fn adam_skips_frozen_and_is_deterministic() {
        let run = || {
            let mut a = Parameter::vector("a", vec![0.5, 0.25]);
            let mut b = Parameter::vector("b", vec![3.0]);
            b.trainable = false;
            let mut opt = Adam::new(0.01);
            for k in 0..20 {
                let g = vec![(k as f64).sin(), 0.3];
                opt.step(&mut [&mut a, &mut b], &[g, vec![1.0]]);
            }
            (a.value, b.value)
        };
        let (a1, b1) = run();
        let (a2, b2) = run();
        assert_eq!(b1, vec![3.0]);
        assert_eq!(a1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), a2.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(b1, b2);
    }
}
