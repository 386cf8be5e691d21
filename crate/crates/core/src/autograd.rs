//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node in creation order, which is
//! also a valid topological order; [`Graph::backward`] walks it in reverse.
//! Graphs are plain owned values, so each worker builds its own while sharing
//! parameter stores read-only.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{dim_err, Error, Result};
use crate::tensor::{ParamId, ParamStore, Parameterized, Tensor};

/// Floor applied to probabilities before taking logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

/// Sums of probability vectors may deviate from 1 by at most this much.
pub const DISTRIBUTION_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sparse row-mixing matrix: `out[r] = sum_k w_k * in[src_k]` over rows of a
/// 2-D tensor. Covers row gathers, spatial resampling and pooling.
#[derive(Clone, Debug, PartialEq)]
pub struct RowMix {
    pub rows_in: usize,
    pub weights: Vec<Vec<(usize, f64)>>,
}

impl RowMix {
    pub fn gather(rows_in: usize, idx: &[usize]) -> Self {
        Self {
            rows_in,
            weights: idx.iter().map(|&i| vec![(i, 1.0)]).collect(),
        }
    }

    pub fn rows_out(&self) -> usize {
        self.weights.len()
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Silu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    SumAll(Var),
    MeanAll(Var),
    MeanRows(Var),
    Reshape(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    RowMix(Var, Arc<RowMix>),
    Softmax { x: Var, axis: usize },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    CrossEntropy { target: Var, pred: Var },
    L2NormalizeRows { x: Var, norms: Vec<f64>, eps: f64 },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Arc<Vec<f64>>,
    op: Op,
    needs_grad: bool,
    leaf_grad: Option<Vec<f64>>,
}

/// Recorded computation for one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<(u64, usize), Var>,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = shape.last().copied().unwrap_or(1).max(1);
    (shape.iter().product::<usize>() / cols, cols)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// `a (m x k) * b (k x n)`, i-k-j loop order.
pub fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    let row = |i: usize, out: &mut [f64]| {
        let ar = &a[i * k..(i + 1) * k];
        for (p, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            for (o, &bv) in out.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    };
    if n == 0 {
        return c;
    }
    c.chunks_mut(n).enumerate().for_each(|(i, out)| row(i, out));
    c
}

/// `a (m x n) * b^T` where `b` is `k x n`.
fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    if k == 0 {
        return c;
    }
    for (i, out) in c.chunks_mut(k).enumerate() {
        let ar = &a[i * n..(i + 1) * n];
        for (j, o) in out.iter_mut().enumerate() {
            let br = &b[j * n..(j + 1) * n];
            *o = ar.iter().zip(br).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// `a^T * c` where `a` is `m x k`, `c` is `m x n`.
fn matmul_tn(a: &[f64], c: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        let cr = &c[i * n..(i + 1) * n];
        for (p, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &cv) in orow.iter_mut().zip(cr) {
                *o += av * cv;
            }
        }
    }
    out
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value: Arc::new(value),
            op,
            needs_grad,
            leaf_grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Leaf holding `tensor`; gradients are kept iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: tensor.shape().to_vec(),
            value: tensor.shared_data(),
            op: Op::Leaf,
            needs_grad: tensor.requires_grad(),
            leaf_grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: tensor.shape().to_vec(),
            value: tensor.shared_data(),
            op: Op::Leaf,
            needs_grad: false,
            leaf_grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant_from(&mut self, shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.constant(&t))
    }

    /// Bind a parameter; repeated binds of the same parameter return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.uid(), id.index());
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.leaf(store.get(id));
        self.params.insert(key, v);
        v
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Detached copy of a node's value.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::from_parts(n.shape.clone(), Arc::clone(&n.value))
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].leaf_grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.leaf_grad = None;
        }
    }

    pub fn ensure_finite(&self, v: Var, what: &str) -> Result<()> {
        match self.value(v).iter().position(|x| !x.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::NonFinite(format!(
                "{what}: element {i} of shape {:?} is {}",
                self.shape(v),
                self.value(v)[i]
            ))),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn matrix(&self, v: Var, op: &str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(dim_err!("{op}: expected a matrix, got shape {s:?}")),
        }
    }

    fn zip_map(&mut self, a: Var, b: Var, op: Op, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let v: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(&[a, b]);
        Ok(self.push(shape, v, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul")?;
        let (k2, n) = self.matrix(b, "matmul")?;
        if k != k2 {
            return Err(dim_err!("matmul: inner extents {k} and {k2} disagree"));
        }
        let v = matmul_raw(self.value(a), self.value(b), m, k, n);
        let ng = self.ng(&[a, b]);
        Ok(self.push(vec![m, n], v, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix(a, "transpose")?;
        let x = self.value(a);
        let mut v = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                v[j * m + i] = x[i * n + j];
            }
        }
        let ng = self.ng(&[a]);
        Ok(self.push(vec![n, m], v, Op::Transpose(a), ng))
    }

    fn row_op(&mut self, x: Var, r: Var, name: &str, mul: bool) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(x));
        if self.value(r).len() != cols {
            return Err(dim_err!(
                "{name}: row vector of length {} for {} columns",
                self.value(r).len(),
                cols
            ));
        }
        let xv = self.value(x);
        let rv = self.value(r);
        let mut v = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let xr = &xv[i * cols..(i + 1) * cols];
            if mul {
                v.extend(xr.iter().zip(rv).map(|(a, b)| a * b));
            } else {
                v.extend(xr.iter().zip(rv).map(|(a, b)| a + b));
            }
        }
        let shape = self.shape(x).to_vec();
        let ng = self.ng(&[x, r]);
        let op = if mul { Op::MulRow(x, r) } else { Op::AddRow(x, r) };
        Ok(self.push(shape, v, op, ng))
    }

    /// Add a vector to every row (last axis).
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_op(x, row, "add_row", false)
    }

    /// Multiply every row elementwise by a vector (last axis).
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_op(x, row, "mul_row", true)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(&[a]);
        self.push(shape, v, Op::Scale(a, c), ng)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let v = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(&[a]);
        self.push(shape, v, op, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Gelu(a), gelu)
    }

    /// Swish / SiLU: `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Silu(a), |x| x * sigmoid(x))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    /// Natural log of `max(x, LOG_FLOOR)`.
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), |x| x.max(LOG_FLOOR).ln())
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let ng = self.ng(&[a]);
        self.push(vec![1], vec![s], Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.value(a).iter().sum::<f64>() / n;
        let ng = self.ng(&[a]);
        self.push(vec![1], vec![s], Op::MeanAll(a), ng)
    }

    /// Mean over rows: `[r, c] -> [1, c]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = rows_cols(self.shape(a));
        if r == 0 {
            return Err(dim_err!("mean_rows of an empty tensor"));
        }
        let x = self.value(a);
        let mut v = vec![0.0; c];
        for i in 0..r {
            v.iter_mut().zip(&x[i * c..(i + 1) * c]).for_each(|(o, y)| *o += y);
        }
        v.iter_mut().for_each(|o| *o /= r as f64);
        let ng = self.ng(&[a]);
        Ok(self.push(vec![1, c], v, Op::MeanRows(a), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(dim_err!("cannot reshape {:?} into {:?}", self.shape(a), shape));
        }
        let value = Arc::clone(&self.nodes[a.0].value);
        let ng = self.ng(&[a]);
        self.nodes.push(Node {
            shape,
            value,
            op: Op::Reshape(a),
            needs_grad: ng,
            leaf_grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Rows `start..end` along the first axis.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let rows = *shape.first().ok_or_else(|| dim_err!("slice_rows of a scalar"))?;
        if start > end || end > rows {
            return Err(dim_err!("slice_rows {start}..{end} out of {rows} rows"));
        }
        let inner: usize = shape[1..].iter().product();
        let v = self.value(a)[start * inner..end * inner].to_vec();
        let mut out_shape = shape;
        out_shape[0] = end - start;
        let ng = self.ng(&[a]);
        Ok(self.push(out_shape, v, Op::SliceRows(a, start), ng))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.matrix(a, "slice_cols")?;
        if start > end || end > c {
            return Err(dim_err!("slice_cols {start}..{end} out of {c} columns"));
        }
        let x = self.value(a);
        let w = end - start;
        let mut v = Vec::with_capacity(r * w);
        for i in 0..r {
            v.extend_from_slice(&x[i * c + start..i * c + end]);
        }
        let ng = self.ng(&[a]);
        Ok(self.push(vec![r, w], v, Op::SliceCols(a, start), ng))
    }

    /// Concatenate along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| dim_err!("concat_rows of nothing"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut v = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(dim_err!("concat_rows: shape {:?} vs trailing {:?}", s, tail));
            }
            rows += s[0];
            v.extend_from_slice(self.value(p));
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let ng = self.ng(parts);
        Ok(self.push(shape, v, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Concatenate matrices along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| dim_err!("concat_cols of nothing"))?;
        let (r, _) = self.matrix(*first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.matrix(p, "concat_cols")?;
            if pr != r {
                return Err(dim_err!("concat_cols: {pr} rows vs {r}"));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut v = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                v.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let ng = self.ng(parts);
        Ok(self.push(vec![r, total], v, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Sparse row mixing of a matrix (see [`RowMix`]).
    pub fn row_mix(&mut self, a: Var, mix: Arc<RowMix>) -> Result<Var> {
        let (r, c) = self.matrix(a, "row_mix")?;
        if mix.rows_in != r {
            return Err(dim_err!("row_mix expects {} rows, got {r}", mix.rows_in));
        }
        let x = self.value(a);
        let mut v = vec![0.0; mix.rows_out() * c];
        for (o, ws) in mix.weights.iter().enumerate() {
            let out = &mut v[o * c..(o + 1) * c];
            for &(src, w) in ws {
                if src >= r {
                    return Err(dim_err!("row_mix source row {src} out of {r}"));
                }
                out.iter_mut()
                    .zip(&x[src * c..(src + 1) * c])
                    .for_each(|(y, xv)| *y += w * xv);
            }
        }
        let ng = self.ng(&[a]);
        Ok(self.push(vec![mix.rows_out(), c], v, Op::RowMix(a, mix), ng))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, _) = self.matrix(a, "gather_rows")?;
        self.row_mix(a, Arc::new(RowMix::gather(r, idx)))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(dim_err!("softmax axis {axis} for shape {shape:?}"));
        }
        let n = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let xv = self.value(x);
        let mut v = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * n * inner + k * inner + i;
                let m = (0..n).map(|k| xv[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for k in 0..n {
                    let e = (xv[at(k)] - m).exp();
                    v[at(k)] = e;
                    s += e;
                }
                for k in 0..n {
                    v[at(k)] /= s;
                }
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(shape, v, Op::Softmax { x, axis }, ng))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Validation(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (rows, cols) = rows_cols(self.shape(x));
        if self.value(gamma).len() != cols || self.value(beta).len() != cols {
            return Err(dim_err!("layer_norm: affine parameters must have {cols} entries"));
        }
        let xv = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        let mut v = vec![0.0; rows * cols];
        for i in 0..rows {
            let r = &xv[i * cols..(i + 1) * cols];
            let mean = r.iter().sum::<f64>() / cols as f64;
            let var = r.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..cols {
                let h = (r[j] - mean) * rs;
                xhat[i * cols + j] = h;
                v[i * cols + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let ng = self.ng(&[x, gamma, beta]);
        Ok(self.push(
            shape,
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Soft-target cross-entropy `-sum_k t_k log p_k` per row (last axis),
    /// averaged over rows. Both inputs must be probability vectors.
    pub fn cross_entropy(&mut self, target: Var, pred: Var) -> Result<Var> {
        self.same_shape(target, pred, "cross_entropy")?;
        let (rows, cols) = rows_cols(self.shape(pred));
        for (name, v) in [("target", target), ("prediction", pred)] {
            check_distributions(self.value(v), rows, cols, name)?;
        }
        let t = self.value(target);
        let p = self.value(pred);
        let total: f64 = t
            .iter()
            .zip(p)
            .map(|(&tk, &pk)| if tk == 0.0 { 0.0 } else { -tk * pk.max(LOG_FLOOR).ln() })
            .sum();
        let ng = self.ng(&[target, pred]);
        Ok(self.push(
            vec![1],
            vec![total / rows.max(1) as f64],
            Op::CrossEntropy { target, pred },
            ng,
        ))
    }

    /// Divide each row by `max(||row||, eps)`.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let (rows, cols) = rows_cols(self.shape(x));
        let xv = self.value(x);
        let mut norms = vec![0.0; rows];
        let mut v = vec![0.0; rows * cols];
        for i in 0..rows {
            let r = &xv[i * cols..(i + 1) * cols];
            let n = r.iter().map(|a| a * a).sum::<f64>().sqrt();
            norms[i] = n;
            let d = n.max(eps);
            for j in 0..cols {
                v[i * cols + j] = r[j] / d;
            }
        }
        let shape = self.shape(x).to_vec();
        let ng = self.ng(&[x]);
        self.push(shape, v, Op::L2NormalizeRows { x, norms, eps }, ng)
    }

    /// Reverse pass from a scalar. Leaf gradients accumulate across calls
    /// until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                add_into(&mut self.nodes[idx].leaf_grad, &g);
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
        }
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let mut send = |v: Var, d: Vec<f64>| {
            if self.nodes[v.0].needs_grad {
                add_into(&mut grads[v.0], &d);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if wants(*a) {
                    send(*a, g.iter().zip(bv).map(|(g, b)| g * b).collect());
                }
                if wants(*b) {
                    send(*b, g.iter().zip(av).map(|(g, a)| g * a).collect());
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if wants(*a) {
                    send(*a, matmul_nt(g, self.value(*b), m, n, k));
                }
                if wants(*b) {
                    send(*b, matmul_tn(self.value(*a), g, m, k, n));
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        d[i * n + j] = g[j * m + i];
                    }
                }
                send(*a, d);
            }
            Op::AddRow(x, r) => {
                let cols = self.value(*r).len();
                if wants(*r) {
                    let mut d = vec![0.0; cols];
                    for row in g.chunks(cols) {
                        d.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                    }
                    send(*r, d);
                }
                send(*x, g.to_vec());
            }
            Op::MulRow(x, r) => {
                let rv = self.value(*r);
                let cols = rv.len();
                if wants(*r) {
                    let xv = self.value(*x);
                    let mut d = vec![0.0; cols];
                    for (gr, xr) in g.chunks(cols).zip(xv.chunks(cols)) {
                        for j in 0..cols {
                            d[j] += gr[j] * xr[j];
                        }
                    }
                    send(*r, d);
                }
                if wants(*x) {
                    let d = g
                        .chunks(cols)
                        .flat_map(|gr| gr.iter().zip(rv).map(|(a, b)| a * b))
                        .collect();
                    send(*x, d);
                }
            }
            Op::Scale(a, c) => send(*a, g.iter().map(|v| v * c).collect()),
            Op::Relu(a) => {
                let x = self.value(*a);
                send(*a, g.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect());
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                send(*a, g.iter().zip(x).map(|(g, &x)| g * gelu_grad(x)).collect());
            }
            Op::Silu(a) => {
                let x = self.value(*a);
                send(
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(g, &x)| {
                            let s = sigmoid(x);
                            g * (s + x * s * (1.0 - s))
                        })
                        .collect(),
                );
            }
            Op::Sigmoid(a) => {
                send(*a, g.iter().zip(y.iter()).map(|(g, s)| g * s * (1.0 - s)).collect());
            }
            Op::Softplus(a) => {
                let x = self.value(*a);
                send(*a, g.iter().zip(x).map(|(g, &x)| g * sigmoid(x)).collect());
            }
            Op::Exp(a) => send(*a, g.iter().zip(y.iter()).map(|(g, e)| g * e).collect()),
            Op::Log(a) => {
                let x = self.value(*a);
                send(
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(g, &x)| if x > LOG_FLOOR { g / x } else { 0.0 })
                        .collect(),
                );
            }
            Op::SumAll(a) => send(*a, vec![g[0]; self.value(*a).len()]),
            Op::MeanAll(a) => {
                let n = self.value(*a).len();
                send(*a, vec![g[0] / n as f64; n]);
            }
            Op::MeanRows(a) => {
                let (r, c) = rows_cols(self.shape(*a));
                let mut d = Vec::with_capacity(r * c);
                for _ in 0..r {
                    d.extend(g.iter().map(|v| v / r as f64));
                }
                send(*a, d);
            }
            Op::Reshape(a) => send(*a, g.to_vec()),
            Op::SliceRows(a, start) => {
                let inner: usize = self.shape(*a)[1..].iter().product();
                let mut d = vec![0.0; self.value(*a).len()];
                d[start * inner..start * inner + g.len()].copy_from_slice(g);
                send(*a, d);
            }
            Op::SliceCols(a, start) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                let w = node.shape[1];
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    d[i * c + start..i * c + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                send(*a, d);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    send(p, g[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let r = node.shape[0];
                let total = node.shape[1];
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if wants(p) {
                        let mut d = Vec::with_capacity(r * w);
                        for i in 0..r {
                            d.extend_from_slice(&g[i * total + off..i * total + off + w]);
                        }
                        send(p, d);
                    }
                    off += w;
                }
            }
            Op::RowMix(a, mix) => {
                let c = node.shape[1];
                let mut d = vec![0.0; self.value(*a).len()];
                for (o, ws) in mix.weights.iter().enumerate() {
                    let go = &g[o * c..(o + 1) * c];
                    for &(src, w) in ws {
                        d[src * c..(src + 1) * c]
                            .iter_mut()
                            .zip(go)
                            .for_each(|(dv, gv)| *dv += w * gv);
                    }
                }
                send(*a, d);
            }
            Op::Softmax { x, axis } => {
                let shape = &node.shape;
                let n = shape[*axis];
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| o * n * inner + k * inner + i;
                        let dot: f64 = (0..n).map(|k| g[at(k)] * y[at(k)]).sum();
                        for k in 0..n {
                            d[at(k)] = y[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                send(*x, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gamma);
                let cols = gv.len();
                let rows = rstd.len();
                if wants(*gamma) {
                    let mut d = vec![0.0; cols];
                    for i in 0..rows {
                        for j in 0..cols {
                            d[j] += g[i * cols + j] * xhat[i * cols + j];
                        }
                    }
                    send(*gamma, d);
                }
                if wants(*beta) {
                    let mut d = vec![0.0; cols];
                    for row in g.chunks(cols) {
                        d.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                    }
                    send(*beta, d);
                }
                if wants(*x) {
                    let mut d = vec![0.0; rows * cols];
                    for i in 0..rows {
                        let gr = &g[i * cols..(i + 1) * cols];
                        let hr = &xhat[i * cols..(i + 1) * cols];
                        let dh: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let m1 = dh.iter().sum::<f64>() / cols as f64;
                        let m2 = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        for j in 0..cols {
                            d[i * cols + j] = rstd[i] * (dh[j] - m1 - hr[j] * m2);
                        }
                    }
                    send(*x, d);
                }
            }
            Op::CrossEntropy { target, pred } => {
                let (rows, _) = rows_cols(&self.nodes[pred.0].shape);
                let scale = g[0] / rows.max(1) as f64;
                let t = self.value(*target);
                let p = self.value(*pred);
                if wants(*pred) {
                    send(
                        *pred,
                        t.iter()
                            .zip(p)
                            .map(|(&tk, &pk)| if pk > LOG_FLOOR { -scale * tk / pk } else { 0.0 })
                            .collect(),
                    );
                }
                if wants(*target) {
                    send(*target, p.iter().map(|&pk| -scale * pk.max(LOG_FLOOR).ln()).collect());
                }
            }
            Op::L2NormalizeRows { x, norms, eps } => {
                let cols = node.shape.last().copied().unwrap_or(1);
                let mut d = vec![0.0; y.len()];
                for (i, &n) in norms.iter().enumerate() {
                    let gr = &g[i * cols..(i + 1) * cols];
                    let yr = &y[i * cols..(i + 1) * cols];
                    if n > *eps {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            d[i * cols + j] = (gr[j] - yr[j] * dot) / n;
                        }
                    } else {
                        for j in 0..cols {
                            d[i * cols + j] = gr[j] / eps;
                        }
                    }
                }
                send(*x, d);
            }
        }
    }

    /// Add the gradients of every parameter bound from `store` into the
    /// store's gradient slots. Frozen parameters are skipped.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) -> Result<()> {
        for (&(uid, idx), &v) in &self.params {
            if uid != store.uid() {
                continue;
            }
            let id = ParamId(idx);
            if let Some(g) = self.grad(v) {
                let t = store.get_mut(id);
                if t.requires_grad() {
                    t.accumulate_grad(g)?;
                }
            }
        }
        Ok(())
    }

    /// Gradients of parameters bound from `store`, as `(id, grad)` in id order.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<(ParamId, Vec<f64>)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter(|((uid, _), _)| *uid == store.uid())
            .filter_map(|(&(_, idx), &v)| self.grad(v).map(|g| (ParamId(idx), g.to_vec())))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

fn check_distributions(v: &[f64], rows: usize, cols: usize, name: &str) -> Result<()> {
    for i in 0..rows {
        let r = &v[i * cols..(i + 1) * cols];
        if r.iter().any(|&x| x < 0.0 || !x.is_finite()) {
            return Err(Error::Validation(format!(
                "cross_entropy {name} row {i} has negative or non-finite entries"
            )));
        }
        let s: f64 = r.iter().sum();
        if (s - 1.0).abs() > DISTRIBUTION_TOL {
            return Err(Error::Validation(format!(
                "cross_entropy {name} row {i} sums to {s}, not 1"
            )));
        }
    }
    Ok(())
}

/// Central finite-difference gradient checking.
pub mod check {
    use super::*;

    /// Vector relative error `|a - b| / max(|a| + |b|, 1e-8)` in the 2-norm.
    pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
        let diff: f64 = analytic
            .iter()
            .zip(numeric)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nb: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        diff / (na + nb).max(1e-8)
    }

    /// Compare analytic and central-difference gradients of the scalar
    /// `f(graph, leaves)` with respect to every input. Returns the worst
    /// relative error over inputs.
    pub fn gradient_error<F>(inputs: &[Tensor], step: f64, f: F) -> Result<f64>
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    {
        let eval = |vals: &[Tensor]| -> Result<f64> {
            let mut g = Graph::new();
            let vars: Vec<Var> = vals.iter().map(|t| g.constant(t)).collect();
            let out = f(&mut g, &vars)?;
            Ok(g.scalar(out))
        };
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| g.leaf(&t.clone().with_requires_grad(true)))
            .collect();
        let out = f(&mut g, &vars)?;
        if g.value(out).len() != 1 {
            return Err(Error::Usage("gradient check needs a scalar function".into()));
        }
        g.backward(out)?;
        let mut worst: f64 = 0.0;
        for (k, t) in inputs.iter().enumerate() {
            let analytic = g
                .grad(vars[k])
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()]);
            let mut numeric = vec![0.0; t.numel()];
            for i in 0..t.numel() {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[i] += step;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[i] -= step;
                numeric[i] = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
            }
            worst = worst.max(relative_error(&analytic, &numeric));
        }
        Ok(worst)
    }

    /// Like [`gradient_error`] but over the trainable tensors of a model's
    /// parameter store. At most `max_coords` coordinates per tensor are
    /// perturbed (evenly strided) to bound the cost on larger models.
    pub fn param_gradient_error<M, F>(model: &M, step: f64, max_coords: usize, f: F) -> Result<f64>
    where
        M: Parameterized + Clone,
        F: Fn(&mut Graph, &M) -> Result<Var>,
    {
        let eval = |m: &M| -> Result<f64> {
            let mut g = Graph::new();
            let out = f(&mut g, m)?;
            Ok(g.scalar(out))
        };
        let store = model.params();
        let mut g = Graph::new();
        let out = f(&mut g, model)?;
        g.backward(out)?;
        let grads: HashMap<ParamId, Vec<f64>> = g.param_grads(store).into_iter().collect();
        let mut worst: f64 = 0.0;
        let mut probe = model.clone();
        for id in store.ids().collect::<Vec<_>>() {
            let t = store.get(id);
            if !t.requires_grad() {
                continue;
            }
            let n = t.numel();
            let stride = n.div_ceil(max_coords.max(1)).max(1);
            let coords: Vec<usize> = (0..n).step_by(stride).collect();
            let analytic: Vec<f64> = coords
                .iter()
                .map(|&i| grads.get(&id).map_or(0.0, |g| g[i]))
                .collect();
            let mut numeric = Vec::with_capacity(coords.len());
            for &i in &coords {
                let orig = t.data()[i];
                probe.params_mut().get_mut(id).data_mut()[i] = orig + step;
                let up = eval(&probe)?;
                probe.params_mut().get_mut(id).data_mut()[i] = orig - step;
                let down = eval(&probe)?;
                probe.params_mut().get_mut(id).data_mut()[i] = orig;
                numeric.push((up - down) / (2.0 * step));
            }
            worst = worst.max(relative_error(&analytic, &numeric));
        }
        Ok(worst)
    }

    /// Reduce a non-scalar output to a scalar with fixed random weights so
    /// every output element contributes to the checked gradient.
    pub fn weighted_sum(g: &mut Graph, out: Var, weights: &Tensor) -> Result<Var> {
        let w = g.constant(&weights.clone().reshape(g.shape(out).to_vec())?);
        let p = g.mul(out, w)?;
        Ok(g.sum_all(p))
    }
}

#[cfg(test)]
mod tests {
    use super::check::*;
    use super::*;
    use crate::rng::CounterRng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let a = g.constant(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(&t(&[2, 1], &[5.0, 6.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c), naive_matmul(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0], 2, 2, 1).as_slice());
        assert_eq!(g.value(c), &[17.0, 39.0]);

        let mut rng = CounterRng::new(3);
        let x = Tensor::randn([3, 4], 1.0, &mut rng);
        let xv = g.constant(&x);
        let i = g.constant(&Tensor::eye(4));
        let y = g.matmul(xv, i).unwrap();
        assert_eq!(g.value(y), x.data());

        let bad = g.constant(&Tensor::zeros([3, 2]));
        assert!(matches!(g.matmul(xv, bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn matmul_matches_naive_oracle_on_random_shapes() {
        let mut rng = CounterRng::new(11);
        for _ in 0..20 {
            let (m, k, n) = (1 + rng.below(6) as usize, 1 + rng.below(6) as usize, 1 + rng.below(6) as usize);
            let a = Tensor::randn([m, k], 1.0, &mut rng);
            let b = Tensor::randn([k, n], 1.0, &mut rng);
            let c = matmul_raw(a.data(), b.data(), m, k, n);
            let o = naive_matmul(a.data(), b.data(), m, k, n);
            for (x, y) in c.iter().zip(&o) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(&t(&[2], &[0.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y), &[0.5, 0.5]);

        let x = g.constant(&t(&[2], &[2f64.ln(), 0.0]));
        let y = g.softmax(x, 0).unwrap();
        assert!((g.value(y)[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((g.value(y)[1] - 1.0 / 3.0).abs() < 1e-15);

        let mut rng = CounterRng::new(5);
        let base = Tensor::randn([3, 5], 2.0, &mut rng);
        let shifted = Tensor::new([3, 5], base.data().iter().map(|v| v + 7.5).collect()).unwrap();
        let a = g.constant(&base);
        let b = g.constant(&shifted);
        let sa = g.softmax(a, 1).unwrap();
        let sb = g.softmax(b, 1).unwrap();
        for (p, q) in g.value(sa).iter().zip(g.value(sb)) {
            assert!((p - q).abs() < 1e-12);
        }
        let s0 = g.softmax(a, 0).unwrap();
        for j in 0..5 {
            let col: f64 = (0..3).map(|i| g.value(s0)[i * 5 + j]).sum();
            assert!((col - 1.0).abs() < 1e-9);
        }
        assert!(g.softmax(a, 2).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let gamma = g.constant(&Tensor::full([3], 1.0));
        let beta = g.constant(&Tensor::zeros([3]));
        let x = g.constant(&t(&[1, 3], &[4.0, 4.0, 4.0]));
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        assert!(g.value(y).iter().all(|v| *v == 0.0));

        let gamma2 = g.constant(&Tensor::full([2], 1.0));
        let beta2 = g.constant(&Tensor::zeros([2]));
        let x = g.constant(&t(&[1, 2], &[1.0, -1.0]));
        let y = g.layer_norm(x, gamma2, beta2, 1e-12).unwrap();
        assert!((g.value(y)[0] - 1.0).abs() < 1e-9 && (g.value(y)[1] + 1.0).abs() < 1e-9);

        let mut rng = CounterRng::new(2);
        let x = g.constant(&Tensor::randn([4, 3], 3.0, &mut rng));
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        for r in g.value(y).chunks(3) {
            assert!((r.iter().sum::<f64>() / 3.0).abs() < 1e-10);
        }
        assert!(g.layer_norm(x, gamma, beta, 0.0).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let one_hot = g.constant(&t(&[4], &[0.0, 1.0, 0.0, 0.0]));
        let l = g.cross_entropy(one_hot, one_hot).unwrap();
        assert_eq!(g.scalar(l), 0.0);
        let uniform = g.constant(&Tensor::full([4], 0.25));
        let l = g.cross_entropy(one_hot, uniform).unwrap();
        assert!((g.scalar(l) - 4f64.ln()).abs() < 1e-15);

        let bad = g.constant(&t(&[4], &[0.5, 0.5, 0.5, 0.0]));
        assert!(matches!(g.cross_entropy(one_hot, bad), Err(Error::Validation(_))));
    }

    #[test]
    fn backward_square_and_constant() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::scalar(3.0).with_requires_grad(true));
        let c = g.leaf(&Tensor::scalar(2.0));
        let xx = g.mul(x, x).unwrap();
        let y = g.add(xx, c).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
        assert!(g.grad(c).is_none());
        // accumulation across calls
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[12.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());

        let v = g.leaf(&Tensor::zeros([2]).with_requires_grad(true));
        assert!(matches!(g.backward(v), Err(Error::Usage(_))));
    }

    #[test]
    fn diamond_dag_sums_both_paths() {
        let mut rng = CounterRng::new(8);
        let x = Tensor::randn([3, 3], 1.0, &mut rng);
        let w = Tensor::randn([9], 1.0, &mut rng);
        let err = gradient_error(&[x], 1e-5, |g, v| {
            let a = g.exp(v[0]);
            let b = g.mul(v[0], v[0])?;
            let s = g.mul(a, b)?;
            weighted_sum(g, s, &w)
        })
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn matmul_gradient_check() {
        let mut rng = CounterRng::new(4);
        let a = Tensor::randn([3, 4], 1.0, &mut rng);
        let b = Tensor::randn([4, 2], 1.0, &mut rng);
        let w = Tensor::randn([6], 1.0, &mut rng);
        let err = gradient_error(&[a, b], 1e-5, |g, v| {
            let c = g.matmul(v[0], v[1])?;
            weighted_sum(g, c, &w)
        })
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn frozen_params_receive_nothing() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::full([2], 1.0));
        let b = store.add("b", Tensor::full([2], 2.0));
        store.get_mut(b).set_requires_grad(false);
        let mut g = Graph::new();
        let va = g.param(&store, a);
        let vb = g.param(&store, b);
        assert_eq!(g.param(&store, a), va);
        let p = g.mul(va, vb).unwrap();
        let s = g.sum_all(p);
        g.backward(s).unwrap();
        g.accumulate_param_grads(&mut store).unwrap();
        assert_eq!(store.get(a).grad().unwrap(), &[2.0, 2.0]);
        assert!(store.get(b).grad().is_none());
        assert!(!g.requires_grad(vb));
    }
}
