//! Reverse-mode automatic differentiation over `f64` tensors.
//!
//! A [`Tape`] records every primitive in topological order. Values live on the
//! tape; a [`Var`] is a handle into it. Tensors are rank 0, 1 or 2; "rows" and
//! "last axis" refer to the trailing dimension.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};

/// Floor applied to `log` inputs.
pub const LOG_FLOOR: f64 = 1e-30;
const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the right operand of a binary op is broadcast against the left.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    /// rhs `[n]` repeated over every row of lhs `[m, n]`.
    Row,
    /// rhs `[m]` repeated over every column of lhs `[m, n]`.
    Col,
    /// rhs holds a single value.
    Scalar,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Div(Var, Var, Bcast),
    Neg(Var),
    Scale(Var, f64),
    Recip(Var),
    Log(Var),
    Exp(Var),
    Gelu(Var),
    Relu(Var),
    MatMul(Var, Var),
    Softmax(Var),
    SumAll(Var),
    Mean(Var),
    SumRows(Var),
    GatherRows(Var, Vec<usize>),
    PickCols(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    LayerNorm(Var, Vec<f64>),
    Attention { q: Var, k: Var, v: Var, seq_len: usize, heads: usize, probs: Vec<f64> },
}

#[derive(Debug, Clone)]
struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    requires_grad: bool,
}

/// Recording tape. Build the graph, call [`Tape::backward`], then drop or clear it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that needed one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as an owned vector; zeros when the loss does not depend on `v`.
    pub fn wrt(&self, v: Var) -> Vec<f64> {
        self.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; self.lens[v.0]])
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

/// `c[m×n] (+)= op(a)[m×k] · op(b)[k×n]` with optional transposes, row-major storage.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], acc: bool) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: slice lengths cover every strided access made by dgemm for these dimensions.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            if acc { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4;
    const A: f64 = 0.044_715;
    let inner = C * (x + A * x * x * x);
    let th = inner.tanh();
    let y = 0.5 * x * (1.0 + th);
    let dy = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

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

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Single value of a scalar node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, op: Op, requires_grad: bool) -> Result<Var> {
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite value produced by {}", op_name(&op))));
        }
        debug_assert_eq!(value.len(), numel(&shape));
        self.nodes.push(Node { value, shape, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf tensor; `requires_grad` marks trainable parameters or differentiable inputs.
    pub fn leaf(&mut self, value: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<Var> {
        if value.len() != numel(shape) {
            return Err(Error::Shape(format!("{} values for shape {:?}", value.len(), shape)));
        }
        self.push(value, shape.to_vec(), Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Vec<f64>, shape: &[usize]) -> Result<Var> {
        self.leaf(value, shape, true)
    }

    pub fn constant(&mut self, value: Vec<f64>, shape: &[usize]) -> Result<Var> {
        self.leaf(value, shape, false)
    }

    /// Copy of `v` with no gradient path.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let n = &self.nodes[v.0];
        let (value, shape) = (n.value.clone(), n.shape.clone());
        self.push(value, shape, Op::Leaf, false)
    }

    fn bcast(&self, a: Var, b: Var) -> Result<Bcast> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa == sb {
            return Ok(Bcast::Same);
        }
        if numel(sb) == 1 {
            return Ok(Bcast::Scalar);
        }
        if sa.len() == 2 && sb.len() == 2 {
            if sb[0] == 1 && sb[1] == sa[1] {
                return Ok(Bcast::Row);
            }
            if sb[1] == 1 && sb[0] == sa[0] {
                return Ok(Bcast::Col);
            }
        }
        if sa.len() == 2 && sb.len() == 1 {
            if sb[0] == sa[1] {
                return Ok(Bcast::Row);
            }
            if sb[0] == sa[0] {
                return Ok(Bcast::Col);
            }
        }
        Err(Error::Shape(format!("cannot broadcast {:?} against {:?}", sb, sa)))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, mk: fn(Var, Var, Bcast) -> Op) -> Result<Var> {
        let kind = self.bcast(a, b)?;
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        let cols = last_dim(&na.shape);
        let value: Vec<f64> = match kind {
            Bcast::Same => na.value.iter().zip(&nb.value).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Scalar => na.value.iter().map(|&x| f(x, nb.value[0])).collect(),
            Bcast::Row => na.value.iter().enumerate().map(|(i, &x)| f(x, nb.value[i % cols])).collect(),
            Bcast::Col => na.value.iter().enumerate().map(|(i, &x)| f(x, nb.value[i / cols])).collect(),
        };
        let shape = na.shape.clone();
        let rg = self.rg(&[a, b]);
        self.push(value, shape, mk(a, b, kind), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.nodes[b.0].value.contains(&0.0) {
            return Err(Error::Domain("division by zero".into()));
        }
        self.binary(a, b, |x, y| x / y, Op::Div)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let n = &self.nodes[a.0];
        let value = n.value.iter().map(|&x| f(x)).collect();
        let shape = n.shape.clone();
        let rg = n.requires_grad;
        self.push(value, shape, op, rg)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        if self.nodes[a.0].value.contains(&0.0) {
            return Err(Error::Domain("reciprocal of zero".into()));
        }
        self.unary(a, |x| 1.0 / x, Op::Recip(a))
    }

    /// Natural log with inputs below [`LOG_FLOOR`] clamped; negative inputs are a domain error.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(x) = self.nodes[a.0].value.iter().find(|&&x| x < -1e-12) {
            return Err(Error::Domain(format!("log of negative value {x}")));
        }
        self.unary(a, |x| x.max(LOG_FLOOR).ln(), Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| gelu_parts(x).0, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// `[m, k] · [k, n] → [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!("matmul {:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.nodes[a.0].value, false, &self.nodes[b.0].value, false, &mut out, false);
        let rg = self.rg(&[a, b]);
        self.push(out, vec![m, n], Op::MatMul(a, b), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.softmax_excluding(a, None)
    }

    /// Softmax over the last axis; column `excluded` gets exactly zero mass (logit −∞).
    pub fn softmax_excluding(&mut self, a: Var, excluded: Option<usize>) -> Result<Var> {
        let n = &self.nodes[a.0];
        let cols = last_dim(&n.shape);
        if let Some(e) = excluded {
            if e >= cols || cols < 2 {
                return Err(Error::Shape(format!("excluded column {e} of {cols}")));
            }
        }
        let mut out = vec![0.0; n.value.len()];
        for (row, o) in n.value.chunks(cols).zip(out.chunks_mut(cols)) {
            let mx = row
                .iter()
                .enumerate()
                .filter(|(j, _)| Some(*j) != excluded)
                .fold(f64::NEG_INFINITY, |m, (_, &x)| m.max(x));
            let mut z = 0.0;
            for (j, (oj, &x)) in o.iter_mut().zip(row).enumerate() {
                if Some(j) != excluded {
                    *oj = (x - mx).exp();
                    z += *oj;
                }
            }
            for oj in o.iter_mut() {
                *oj /= z;
            }
        }
        let shape = n.shape.clone();
        let rg = n.requires_grad;
        self.push(out, shape, Op::Softmax(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let n = &self.nodes[a.0];
        let s = n.value.iter().sum();
        let rg = n.requires_grad;
        self.push(vec![s], vec![], Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = &self.nodes[a.0];
        if n.value.is_empty() {
            return Err(Error::Shape("mean of empty tensor".into()));
        }
        let s = n.value.iter().sum::<f64>() / n.value.len() as f64;
        let rg = n.requires_grad;
        self.push(vec![s], vec![], Op::Mean(a), rg)
    }

    /// Sum over the last axis: `[m, n] → [m]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let n = &self.nodes[a.0];
        if n.shape.len() != 2 {
            return Err(Error::Shape(format!("sum_rows expects rank 2, got {:?}", n.shape)));
        }
        let cols = n.shape[1];
        let out = n.value.chunks(cols).map(|r| r.iter().sum()).collect();
        let shape = vec![n.shape[0]];
        let rg = n.requires_grad;
        self.push(out, shape, Op::SumRows(a), rg)
    }

    /// Row gather: `[r, c]` with indices of length `m` → `[m, c]`. Also serves as broadcast.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let n = &self.nodes[a.0];
        let (rows, cols) = match n.shape.len() {
            2 => (n.shape[0], n.shape[1]),
            1 => (1, n.shape[0]),
            _ => return Err(Error::Shape(format!("gather_rows on {:?}", n.shape))),
        };
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Shape(format!("row index {bad} out of {rows}")));
        }
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            out.extend_from_slice(&n.value[i * cols..(i + 1) * cols]);
        }
        let rg = n.requires_grad;
        self.push(out, vec![idx.len(), cols], Op::GatherRows(a, idx.to_vec()), rg)
    }

    /// Per-row element pick: `[m, n]` with `m` column indices → `[m]`.
    pub fn pick_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let n = &self.nodes[a.0];
        if n.shape.len() != 2 || n.shape[0] != idx.len() {
            return Err(Error::Shape(format!("pick_cols {:?} with {} indices", n.shape, idx.len())));
        }
        let cols = n.shape[1];
        if let Some(&bad) = idx.iter().find(|&&j| j >= cols) {
            return Err(Error::Shape(format!("column index {bad} out of {cols}")));
        }
        let out = idx.iter().enumerate().map(|(i, &j)| n.value[i * cols + j]).collect();
        let rg = n.requires_grad;
        self.push(out, vec![idx.len()], Op::PickCols(a, idx.to_vec()), rg)
    }

    /// Concatenate rank-2 tensors along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let cols = last_dim(&self.nodes[first.0].shape);
        let mut rows = 0;
        let mut out = Vec::new();
        for p in parts {
            let n = &self.nodes[p.0];
            if n.shape.len() != 2 || n.shape[1] != cols {
                return Err(Error::Shape(format!("concat {:?} with {cols} columns", n.shape)));
            }
            rows += n.shape[0];
            out.extend_from_slice(&n.value);
        }
        let rg = self.rg(parts);
        self.push(out, vec![rows, cols], Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n = &self.nodes[a.0];
        if numel(shape) != n.value.len() {
            return Err(Error::Shape(format!("reshape {:?} to {:?}", n.shape, shape)));
        }
        let value = n.value.clone();
        let rg = n.requires_grad;
        self.push(value, shape.to_vec(), Op::Reshape(a), rg)
    }

    /// Per-row standardization over the last axis (no affine part).
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let n = &self.nodes[a.0];
        let cols = last_dim(&n.shape);
        let mut out = vec![0.0; n.value.len()];
        let mut inv = Vec::with_capacity(n.value.len() / cols.max(1));
        for (row, o) in n.value.chunks(cols).zip(out.chunks_mut(cols)) {
            let mu = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (oj, &x) in o.iter_mut().zip(row) {
                *oj = (x - mu) * is;
            }
            inv.push(is);
        }
        let shape = n.shape.clone();
        let rg = n.requires_grad;
        self.push(out, shape, Op::LayerNorm(a, inv), rg)
    }

    /// Bidirectional multi-head scaled dot-product attention.
    ///
    /// `q`, `k`, `v` are `[batch·seq_len, d]`; each block of `seq_len` rows attends
    /// only within itself, and `d` is split into `heads` equal slices.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq_len: usize, heads: usize) -> Result<Var> {
        let shape = self.nodes[q.0].shape.clone();
        if shape.len() != 2 || self.nodes[k.0].shape != shape || self.nodes[v.0].shape != shape {
            return Err(Error::Shape("attention inputs must share a rank-2 shape".into()));
        }
        let (rows, d) = (shape[0], shape[1]);
        if seq_len == 0 || rows % seq_len != 0 || heads == 0 || d % heads != 0 {
            return Err(Error::Shape(format!(
                "attention rows {rows}, seq_len {seq_len}, width {d}, heads {heads}"
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let batch = rows / seq_len;
        let (qv, kv, vv) = (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
        let mut probs = vec![0.0; batch * heads * seq_len * seq_len];
        let mut out = vec![0.0; rows * d];
        for b in 0..batch {
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * seq_len * seq_len..][..seq_len * seq_len];
                for i in 0..seq_len {
                    let qi = &qv[(b * seq_len + i) * d + h * dh..][..dh];
                    let prow = &mut p[i * seq_len..(i + 1) * seq_len];
                    let mut mx = f64::NEG_INFINITY;
                    for (j, pj) in prow.iter_mut().enumerate() {
                        let kj = &kv[(b * seq_len + j) * d + h * dh..][..dh];
                        *pj = scale * qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>();
                        mx = mx.max(*pj);
                    }
                    let mut z = 0.0;
                    for pj in prow.iter_mut() {
                        *pj = (*pj - mx).exp();
                        z += *pj;
                    }
                    for pj in prow.iter_mut() {
                        *pj /= z;
                    }
                    let oi = &mut out[(b * seq_len + i) * d + h * dh..][..dh];
                    for (j, &pj) in prow.iter().enumerate() {
                        let vj = &vv[(b * seq_len + j) * d + h * dh..][..dh];
                        for (o, &x) in oi.iter_mut().zip(vj) {
                            *o += pj * x;
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        self.push(out, shape, Op::Attention { q, k, v, seq_len, heads, probs }, rg)
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ln = &self.nodes[loss.0];
        if ln.value.len() != 1 {
            return Err(Error::Rank(format!("loss must be scalar, got shape {:?}", ln.shape)));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        let lens = self.nodes.iter().map(|n| n.value.len()).collect();
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { grads, lens })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn reduce_bcast(&self, grads: &mut [Option<Vec<f64>>], b: Var, kind: Bcast, cols: usize, contrib: impl Fn(usize) -> f64, total: usize) {
        self.accumulate(grads, b, |gb| match kind {
            Bcast::Same => {
                for (i, x) in gb.iter_mut().enumerate() {
                    *x += contrib(i);
                }
            }
            Bcast::Scalar => {
                let mut s = 0.0;
                for i in 0..total {
                    s += contrib(i);
                }
                gb[0] += s;
            }
            Bcast::Row => {
                for i in 0..total {
                    gb[i % cols] += contrib(i);
                }
            }
            Bcast::Col => {
                for i in 0..total {
                    gb[i / cols] += contrib(i);
                }
            }
        });
    }

    fn bval(&self, b: Var, kind: Bcast, cols: usize, i: usize) -> f64 {
        let v = &self.nodes[b.0].value;
        match kind {
            Bcast::Same => v[i],
            Bcast::Scalar => v[0],
            Bcast::Row => v[i % cols],
            Bcast::Col => v[i / cols],
        }
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let cols = last_dim(&node.shape);
        let total = g.len();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b, k) => {
                self.accumulate(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                self.reduce_bcast(grads, *b, *k, cols, |i| g[i], total);
            }
            Op::Sub(a, b, k) => {
                self.accumulate(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                self.reduce_bcast(grads, *b, *k, cols, |i| -g[i], total);
            }
            Op::Mul(a, b, k) => {
                let av = &self.nodes[a.0].value;
                self.accumulate(grads, *a, |ga| {
                    for i in 0..total {
                        ga[i] += g[i] * self.bval(*b, *k, cols, i);
                    }
                });
                self.reduce_bcast(grads, *b, *k, cols, |i| g[i] * av[i], total);
            }
            Op::Div(a, b, k) => {
                let out = &node.value;
                self.accumulate(grads, *a, |ga| {
                    for i in 0..total {
                        ga[i] += g[i] / self.bval(*b, *k, cols, i);
                    }
                });
                self.reduce_bcast(grads, *b, *k, cols, |i| -g[i] * out[i] / self.bval(*b, *k, cols, i), total);
            }
            Op::Neg(a) => self.accumulate(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x -= y)),
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y))
            }
            Op::Recip(a) => {
                let out = &node.value;
                self.accumulate(grads, *a, |ga| {
                    for i in 0..total {
                        ga[i] -= g[i] * out[i] * out[i];
                    }
                });
            }
            Op::Log(a) => {
                let av = &self.nodes[a.0].value;
                self.accumulate(grads, *a, |ga| {
                    for i in 0..total {
                        if av[i] > LOG_FLOOR {
                            ga[i] += g[i] / av[i];
                        }
                    }
                });
            }
            Op::Exp(a) => {
                let out = &node.value;
                self.accumulate(grads, *a, |ga| {
                    for i in 0..total {
                        ga[i] += g[i] * out[i];
                    }
                });
            }
            Op::Gelu(a) => {
                let av = &self.nodes[a.0].value;
                self.accumulate(grads, *a, |ga| {
                    for i in 0..total {
                        ga[i] += g[i] * gelu_parts(av[i]).1;
                    }
                });
            }
            Op::Relu(a) => {
                let av = &self.nodes[a.0].value;
                self.accumulate(grads, *a, |ga| {
                    for i in 0..total {
                        if av[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                self.accumulate(grads, *a, |ga| gemm(m, n, k, g, false, bv, true, ga, true));
                self.accumulate(grads, *b, |gb| gemm(k, m, n, av, true, g, false, gb, true));
            }
            Op::Softmax(a) => {
                let y = &node.value;
                self.accumulate(grads, *a, |ga| {
                    for ((gr, yr), gar) in g.chunks(cols).zip(y.chunks(cols)).zip(ga.chunks_mut(cols)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                        for j in 0..cols {
                            gar[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::SumAll(a) => self.accumulate(grads, *a, |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.len() as f64;
                self.accumulate(grads, *a, |ga| ga.iter_mut().for_each(|x| *x += g[0] / n))
            }
            Op::SumRows(a) => {
                let c = self.nodes[a.0].shape[1];
                self.accumulate(grads, *a, |ga| {
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x += g[i / c];
                    }
                });
            }
            Op::GatherRows(a, idx) => {
                self.accumulate(grads, *a, |ga| {
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..cols {
                            ga[i * cols + j] += g[r * cols + j];
                        }
                    }
                });
            }
            Op::PickCols(a, idx) => {
                let c = self.nodes[a.0].shape[1];
                self.accumulate(grads, *a, |ga| {
                    for (r, &j) in idx.iter().enumerate() {
                        ga[r * c + j] += g[r];
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.len();
                    self.accumulate(grads, *p, |gp| {
                        gp.iter_mut().zip(&g[off..off + len]).for_each(|(x, y)| *x += y)
                    });
                    off += len;
                }
            }
            Op::Reshape(a) => self.accumulate(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y)),
            Op::LayerNorm(a, inv) => {
                let y = &node.value;
                self.accumulate(grads, *a, |ga| {
                    for (r, ((gr, yr), gar)) in g.chunks(cols).zip(y.chunks(cols)).zip(ga.chunks_mut(cols)).enumerate() {
                        let mg = gr.iter().sum::<f64>() / cols as f64;
                        let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        for j in 0..cols {
                            gar[j] += inv[r] * (gr[j] - mg - yr[j] * mgy);
                        }
                    }
                });
            }
            Op::Attention { q, k, v, seq_len, heads, probs } => {
                self.attention_backward(node, g, grads, (*q, *k, *v), *seq_len, *heads, probs);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        (q, k, v): (Var, Var, Var),
        seq_len: usize,
        heads: usize,
        probs: &[f64],
    ) {
        let (rows, d) = (node.shape[0], node.shape[1]);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let batch = rows / seq_len;
        let (qv, kv, vv) = (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
        let mut dq = vec![0.0; rows * d];
        let mut dk = vec![0.0; rows * d];
        let mut dv = vec![0.0; rows * d];
        let mut ds = vec![0.0; seq_len];
        for b in 0..batch {
            for h in 0..heads {
                let p = &probs[(b * heads + h) * seq_len * seq_len..][..seq_len * seq_len];
                let at = |i: usize| (b * seq_len + i) * d + h * dh;
                for i in 0..seq_len {
                    let gi = &g[at(i)..at(i) + dh];
                    let prow = &p[i * seq_len..(i + 1) * seq_len];
                    let mut dot = 0.0;
                    for j in 0..seq_len {
                        let vj = &vv[at(j)..at(j) + dh];
                        let dp: f64 = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                        ds[j] = dp;
                        dot += prow[j] * dp;
                        let dvj = &mut dv[at(j)..at(j) + dh];
                        for (x, &y) in dvj.iter_mut().zip(gi) {
                            *x += prow[j] * y;
                        }
                    }
                    for j in 0..seq_len {
                        let s = scale * prow[j] * (ds[j] - dot);
                        if s == 0.0 {
                            continue;
                        }
                        for c in 0..dh {
                            dq[at(i) + c] += s * kv[at(j) + c];
                            dk[at(j) + c] += s * qv[at(i) + c];
                        }
                    }
                }
            }
        }
        for (var, d) in [(q, dq), (k, dk), (v, dv)] {
            self.accumulate(grads, var, |gx| gx.iter_mut().zip(&d).for_each(|(x, y)| *x += y));
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Div(..) => "div",
        Op::Neg(_) => "neg",
        Op::Scale(..) => "scale",
        Op::Recip(_) => "recip",
        Op::Log(_) => "log",
        Op::Exp(_) => "exp",
        Op::Gelu(_) => "gelu",
        Op::Relu(_) => "relu",
        Op::MatMul(..) => "matmul",
        Op::Softmax(_) => "softmax",
        Op::SumAll(_) => "sum",
        Op::Mean(_) => "mean",
        Op::SumRows(_) => "sum_rows",
        Op::GatherRows(..) => "gather_rows",
        Op::PickCols(..) => "pick_cols",
        Op::ConcatRows(_) => "concat_rows",
        Op::Reshape(_) => "reshape",
        Op::LayerNorm(..) => "layer_norm",
        Op::Attention { .. } => "attention",
    }
}

/// Richardson-extrapolated central difference `(4·D(h/2) − D(h))/3`, error `O(h⁴)`.
pub fn richardson_derivative(f: impl Fn(f64) -> Result<f64>, h: f64) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::Domain(format!("step {h} must be positive")));
    }
    let central = |h: f64| -> Result<f64> { Ok((f(h)? - f(-h)?) / (2.0 * h)) };
    let coarse = central(h)?;
    let fine = central(0.5 * h)?;
    let d = (4.0 * fine - coarse) / 3.0;
    if !d.is_finite() {
        return Err(Error::Numeric("objective is not finite".into()));
    }
    Ok(d)
}

/// `|fd − g| / max(|g|, 1e-8)`.
pub fn relative_error(fd: f64, grad: f64) -> f64 {
    (fd - grad).abs() / grad.abs().max(1e-8)
}

/// Worst relative error between backward gradients of `f` at `params` and
/// finite differences on `n_coords` randomly chosen coordinates.
pub fn finite_difference_check<F, R>(f: F, params: &[f64], h: f64, n_coords: usize, rng: &mut R) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
    R: Rng + ?Sized,
{
    let eval = |p: Vec<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let leaf = tape.param(p, &[params.len()])?;
        let loss = f(&mut tape, leaf)?;
        Ok(tape.scalar(loss))
    };
    let mut tape = Tape::new();
    let leaf = tape.param(params.to_vec(), &[params.len()])?;
    let loss = f(&mut tape, leaf)?;
    let grad = tape.backward(loss)?.wrt(leaf);
    let coords: Vec<usize> = if n_coords >= params.len() {
        (0..params.len()).collect()
    } else {
        sample(rng, params.len(), n_coords).into_vec()
    };
    let mut worst = 0.0f64;
    for i in coords {
        let fd = richardson_derivative(
            |d| {
                let mut p = params.to_vec();
                p[i] += d;
                eval(p)
            },
            h,
        )?;
        worst = worst.max(relative_error(fd, grad[i]));
    }
    Ok(worst)
}
