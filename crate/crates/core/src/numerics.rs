//! Minimal reverse-mode differentiation over dense 2-D tensors.
//!
//! A [`Graph`] is an eager tape: every operation computes its value
//! immediately and records how to propagate gradients. Parameters live in a
//! [`ParamStore`] that the graph borrows, so building a graph never copies
//! weights. All arithmetic is `f64`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("masked softmax row {0} has no unmasked entry")]
    AllMasked(usize),
    #[error("non-finite value {0} in scalar objective")]
    NonFinite(f64),
    #[error("duplicate parameter path {0:?}")]
    DuplicatePath(String),
    #[error("unknown parameter path {0:?}")]
    UnknownPath(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn full(rows: usize, cols: usize, v: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data length does not match {rows}x{cols}");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|x| x.len() == c), "ragged rows");
        Self::from_vec(r, c, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_vec(1, 1, vec![v])
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Strided view used by [`gemm`].
#[derive(Clone, Copy)]
struct View<'a> {
    data: &'a [f64],
    rs: isize,
    cs: isize,
}

impl<'a> View<'a> {
    fn normal(t: &'a Tensor) -> Self {
        Self {
            data: &t.data,
            rs: t.cols as isize,
            cs: 1,
        }
    }

    fn transposed(t: &'a Tensor) -> Self {
        Self {
            data: &t.data,
            rs: 1,
            cs: t.cols as isize,
        }
    }
}

/// `c = a * b + beta * c` for an `m x k` times `k x n` product.
fn gemm(m: usize, k: usize, n: usize, a: View, b: View, beta: f64, c: &mut [f64]) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the views cover `m x k` and `k x n` elements with the given
    // strides (checked by the callers' shape assertions) and `c` holds at
    // least `m * n` contiguous elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub type ParamId = usize;

/// Named learnable tensors in deterministic insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, path: impl Into<String>, value: Tensor) -> Result<ParamId, NumericsError> {
        let path = path.into();
        if self.index.contains_key(&path) {
            return Err(NumericsError::DuplicatePath(path));
        }
        let id = self.values.len();
        self.index.insert(path.clone(), id);
        self.names.push(path);
        self.values.push(value);
        Ok(id)
    }

    pub fn id(&self, path: &str) -> Option<ParamId> {
        self.index.get(path).copied()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id]
    }

    pub fn by_path(&self, path: &str) -> Option<&Tensor> {
        self.id(path).map(|id| &self.values[id])
    }

    pub fn by_path_mut(&mut self, path: &str) -> Option<&mut Tensor> {
        self.id(path).map(move |id| &mut self.values[id])
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (i, n.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.values.iter_mut()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Tensor::all_finite)
    }

    /// Flat coordinate `k` as `(param, offset)`.
    fn locate(&self, mut k: usize) -> (ParamId, usize) {
        for (id, v) in self.values.iter().enumerate() {
            if k < v.len() {
                return (id, k);
            }
            k -= v.len();
        }
        panic!("coordinate out of range");
    }
}

/// One gradient tensor per parameter, aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store.values.iter().map(|t| Tensor::zeros(t.rows, t.cols)).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.grads.iter()
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.grads {
            g.scale_assign(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.data.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(Tensor::all_finite)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Param(ParamId),
    Const,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    SoftmaxMasked(Var, Vec<bool>),
    LogSoftmaxMasked(Var, Vec<bool>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    PickCols(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Aafm {
        q: Var,
        k: Var,
        v: Var,
        a: Var,
        mix: Tensor,
        max: Tensor,
        denom: Tensor,
    },
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Normalisation epsilon for [`Graph::instance_norm`].
pub const NORM_EPS: f64 = 1e-5;

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("only parameter leaves borrow their value"),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.shape(), (1, 1), "not a scalar");
        t.data[0]
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id] = Some(v);
        v
    }

    /// Parameter leaf by path; panics on an unknown path.
    pub fn p(&mut self, path: &str) -> Var {
        let id = self
            .params
            .id(path)
            .unwrap_or_else(|| panic!("unknown parameter {path:?}"));
        self.param(id)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Const, false)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(out, op, ng)
    }

    fn binary_same(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "{name}: shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_vec(ta.rows, ta.cols, data);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, op, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.cols, tb.rows, "matmul: {:?} x {:?}", ta.shape(), tb.shape());
        let mut out = Tensor::zeros(ta.rows, tb.cols);
        gemm(ta.rows, ta.cols, tb.cols, View::normal(ta), View::normal(tb), 0.0, &mut out.data);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.cols, tb.cols, "matmul_nt: {:?} x {:?}^T", ta.shape(), tb.shape());
        let mut out = Tensor::zeros(ta.rows, tb.rows);
        gemm(ta.rows, ta.cols, tb.rows, View::normal(ta), View::transposed(tb), 0.0, &mut out.data);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMulNT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(bias));
        assert_eq!((1, ta.cols), tb.shape(), "add_row: bias shape");
        let mut out = ta.clone();
        for r in out.data.chunks_mut(ta.cols.max(1)) {
            for (x, b) in r.iter_mut().zip(&tb.data) {
                *x += b;
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        self.push(out, Op::AddRow(a, bias), ng)
    }

    /// Multiplies every row `r` of `a` by the scalar `g[r]` (`g` is `rows x 1`).
    pub fn mul_col(&mut self, a: Var, g: Var) -> Var {
        let (ta, tg) = (self.value(a), self.value(g));
        assert_eq!((ta.rows, 1), tg.shape(), "mul_col: gate shape");
        let mut out = ta.clone();
        for (r, row) in out.data.chunks_mut(ta.cols.max(1)).enumerate() {
            let s = tg.data[r];
            for x in row {
                *x *= s;
            }
        }
        let ng = self.ng(a) || self.ng(g);
        self.push(out, Op::MulCol(a, g), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    fn check_mask(&self, a: Var, mask: &[bool]) -> Result<(), NumericsError> {
        let t = self.value(a);
        assert_eq!(mask.len(), t.len(), "mask shape mismatch");
        for r in 0..t.rows {
            if !mask[r * t.cols..(r + 1) * t.cols].iter().any(|&m| m) {
                return Err(NumericsError::AllMasked(r));
            }
        }
        Ok(())
    }

    /// Row-wise softmax over entries where `mask` is true; masked entries
    /// get probability exactly 0.
    pub fn softmax_masked(&mut self, a: Var, mask: Vec<bool>) -> Result<Var, NumericsError> {
        self.check_mask(a, &mask)?;
        let t = self.value(a);
        let mut out = Tensor::zeros(t.rows, t.cols);
        for r in 0..t.rows {
            let row = t.row(r);
            let m = &mask[r * t.cols..(r + 1) * t.cols];
            let mx = row
                .iter()
                .zip(m)
                .filter(|(_, &k)| k)
                .map(|(&x, _)| x)
                .fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out.data[r * t.cols..(r + 1) * t.cols];
            let mut z = 0.0;
            for c in 0..t.cols {
                if m[c] {
                    o[c] = (row[c] - mx).exp();
                    z += o[c];
                }
            }
            for x in o.iter_mut() {
                *x /= z;
            }
        }
        let ng = self.ng(a);
        Ok(self.push(out, Op::SoftmaxMasked(a, mask), ng))
    }

    /// Row-wise log-softmax; masked entries are set to `-inf` and receive no
    /// gradient.
    pub fn log_softmax_masked(&mut self, a: Var, mask: Vec<bool>) -> Result<Var, NumericsError> {
        self.check_mask(a, &mask)?;
        let t = self.value(a);
        let mut out = Tensor::full(t.rows, t.cols, f64::NEG_INFINITY);
        for r in 0..t.rows {
            let row = t.row(r);
            let m = &mask[r * t.cols..(r + 1) * t.cols];
            let mx = row
                .iter()
                .zip(m)
                .filter(|(_, &k)| k)
                .map(|(&x, _)| x)
                .fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row
                .iter()
                .zip(m)
                .filter(|(_, &k)| k)
                .map(|(&x, _)| (x - mx).exp())
                .sum::<f64>()
                .ln();
            for c in 0..t.cols {
                if m[c] {
                    out.data[r * t.cols + c] = row[c] - lse;
                }
            }
        }
        let ng = self.ng(a);
        Ok(self.push(out, Op::LogSoftmaxMasked(a, mask), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rows, rows, "concat_cols: row mismatch");
            for r in 0..rows {
                out.data[r * cols + off..r * cols + off + t.cols].copy_from_slice(t.row(r));
            }
            off += t.cols;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        assert!(start + len <= t.cols, "slice_cols out of range");
        let out = Tensor::from_fn(t.rows, len, |r, c| t.get(r, start + c));
        let ng = self.ng(a);
        self.push(out, Op::SliceCols(a, start), ng)
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let t = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * t.cols);
        for &i in &idx {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::from_vec(idx.len(), t.cols, data);
        let ng = self.ng(a);
        self.push(out, Op::GatherRows(a, idx), ng)
    }

    /// Picks column `idx[r]` from each row `r`, giving a `rows x 1` tensor.
    pub fn pick_cols(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let t = self.value(a);
        assert_eq!(idx.len(), t.rows, "pick_cols: one index per row");
        let out = Tensor::from_vec(t.rows, 1, idx.iter().enumerate().map(|(r, &c)| t.get(r, c)).collect());
        let ng = self.ng(a);
        self.push(out, Op::PickCols(a, idx), ng)
    }

    /// Places row `k` of `a` at row `rows[k]` of a zero `total x cols` tensor.
    pub fn scatter_rows(&mut self, a: Var, rows: Vec<usize>, total: usize) -> Var {
        let t = self.value(a);
        assert_eq!(rows.len(), t.rows, "scatter_rows: one target per row");
        let mut out = Tensor::zeros(total, t.cols);
        for (k, &r) in rows.iter().enumerate() {
            out.data[r * t.cols..(r + 1) * t.cols].copy_from_slice(t.row(k));
        }
        let ng = self.ng(a);
        self.push(out, Op::ScatterRows(a, rows), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(out, Op::Transpose(a), ng)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let t = self.value(a);
        assert_eq!(t.len(), rows * cols, "reshape: size mismatch");
        let out = Tensor::from_vec(rows, cols, t.data.clone());
        let ng = self.ng(a);
        self.push(out, Op::Reshape(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(out, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// `x W + b` with `W: in x out`, `b: 1 x out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w);
        match b {
            Some(b) => self.add_row(y, b),
            None => y,
        }
    }

    /// Normalises each column over the row (node) axis to zero mean and unit
    /// variance, then applies the per-column affine `gamma, beta` (`1 x cols`).
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let t = self.value(x);
        let (rows, cols) = t.shape();
        assert_eq!(self.value(gamma).shape(), (1, cols), "instance_norm: gamma shape");
        assert_eq!(self.value(beta).shape(), (1, cols), "instance_norm: beta shape");
        let mut mean = vec![0.0; cols];
        for r in 0..rows {
            for (m, v) in mean.iter_mut().zip(t.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                var[c] += (t.get(r, c) - mean[c]).powi(2);
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v / rows as f64 + NORM_EPS).sqrt()).collect();
        let xhat = Tensor::from_fn(rows, cols, |r, c| (t.get(r, c) - mean[c]) * inv_std[c]);
        let (g, b) = (self.value(gamma), self.value(beta));
        let out = Tensor::from_fn(rows, cols, |r, c| xhat.get(r, c) * g.data[c] + b.data[c]);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            out,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Attention-free mixing with a pairwise bias.
    ///
    /// `out[i,e] = sigmoid(Q[i,e]) * sum_j w[i,j,e] V[j,e]` with
    /// `w[i,.,e] = softmax_j(A[i,j] + K[j,e])`, evaluated with a per-`(i,e)`
    /// running maximum so no exponential overflows.
    pub fn aafm(&mut self, q: Var, k: Var, v: Var, a: Var) -> Var {
        let (tq, tk, tv, ta) = (self.value(q), self.value(k), self.value(v), self.value(a));
        let (n, e) = tq.shape();
        assert_eq!(tk.shape(), (n, e), "aafm: K shape");
        assert_eq!(tv.shape(), (n, e), "aafm: V shape");
        assert_eq!(ta.shape(), (n, n), "aafm: A shape");
        let mut max = Tensor::full(n, e, f64::NEG_INFINITY);
        let mut denom = Tensor::zeros(n, e);
        let mut num = Tensor::zeros(n, e);
        for i in 0..n {
            let m = &mut max.data[i * e..(i + 1) * e];
            for j in 0..n {
                let aij = ta.get(i, j);
                for (mx, kj) in m.iter_mut().zip(tk.row(j)) {
                    *mx = mx.max(aij + kj);
                }
            }
            let d = &mut denom.data[i * e..(i + 1) * e];
            let s = &mut num.data[i * e..(i + 1) * e];
            for j in 0..n {
                let aij = ta.get(i, j);
                let (kj, vj) = (tk.row(j), tv.row(j));
                for c in 0..e {
                    let w = (aij + kj[c] - m[c]).exp();
                    d[c] += w;
                    s[c] += w * vj[c];
                }
            }
        }
        let mix = Tensor::from_fn(n, e, |i, c| num.get(i, c) / denom.get(i, c));
        let out = Tensor::from_fn(n, e, |i, c| sigmoid(tq.get(i, c)) * mix.get(i, c));
        let ng = self.ng(q) || self.ng(k) || self.ng(v) || self.ng(a);
        self.push(
            out,
            Op::Aafm {
                q,
                k,
                v,
                a,
                mix,
                max,
                denom,
            },
            ng,
        )
    }

    /// Reverse pass from a scalar; returns gradients for every parameter
    /// (zeros for parameters not reached).
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::zeros_like(self.params);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if let Op::Param(id) = node.op {
                out.grads[id].add_assign(&g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }
        out
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let y = node.value.as_ref().expect("op nodes own values");
        let mut acc = |v: Var, delta: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(t) => t.add_assign(&delta),
                slot => *slot = Some(delta),
            }
        };
        let zip = |a: &Tensor, f: &dyn Fn(f64, f64) -> f64| {
            Tensor::from_vec(a.rows, a.cols, a.data.iter().zip(&g.data).map(|(&x, &gy)| f(x, gy)).collect())
        };
        match &node.op {
            Op::Param(_) | Op::Const => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let mut da = Tensor::zeros(ta.rows, ta.cols);
                    gemm(g.rows, g.cols, tb.rows, View::normal(g), View::transposed(tb), 0.0, &mut da.data);
                    acc(*a, da);
                }
                if self.ng(*b) {
                    let mut db = Tensor::zeros(tb.rows, tb.cols);
                    gemm(ta.cols, ta.rows, g.cols, View::transposed(ta), View::normal(g), 0.0, &mut db.data);
                    acc(*b, db);
                }
            }
            Op::MatMulNT(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let mut da = Tensor::zeros(ta.rows, ta.cols);
                    gemm(g.rows, g.cols, tb.cols, View::normal(g), View::normal(tb), 0.0, &mut da.data);
                    acc(*a, da);
                }
                if self.ng(*b) {
                    let mut db = Tensor::zeros(tb.rows, tb.cols);
                    gemm(g.cols, g.rows, ta.cols, View::transposed(g), View::normal(ta), 0.0, &mut db.data);
                    acc(*b, db);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                acc(*a, zip(tb, &|x, gy| x * gy));
                acc(*b, zip(ta, &|x, gy| x * gy));
            }
            Op::AddRow(a, b) => {
                acc(*a, g.clone());
                let mut db = Tensor::zeros(1, g.cols);
                for r in 0..g.rows {
                    for (d, x) in db.data.iter_mut().zip(g.row(r)) {
                        *d += x;
                    }
                }
                acc(*b, db);
            }
            Op::MulCol(a, s) => {
                let (ta, ts) = (self.value(*a), self.value(*s));
                let da = Tensor::from_fn(g.rows, g.cols, |r, c| g.get(r, c) * ts.data[r]);
                let ds = Tensor::from_fn(g.rows, 1, |r, _| {
                    g.row(r).iter().zip(ta.row(r)).map(|(x, y)| x * y).sum()
                });
                acc(*a, da);
                acc(*s, ds);
            }
            Op::Scale(a, s) => acc(*a, g.map(|x| x * s)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Relu(a) => acc(*a, zip(self.value(*a), &|x, gy| if x > 0.0 { gy } else { 0.0 })),
            Op::Sigmoid(a) => acc(*a, zip(y, &|s, gy| gy * s * (1.0 - s))),
            Op::Tanh(a) => acc(*a, zip(y, &|t, gy| gy * (1.0 - t * t))),
            Op::Exp(a) => acc(*a, zip(y, &|e, gy| gy * e)),
            Op::Log(a) => acc(*a, zip(self.value(*a), &|x, gy| gy / x)),
            Op::SoftmaxMasked(a, mask) => {
                let mut da = Tensor::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let (p, gr) = (y.row(r), g.row(r));
                    let dot: f64 = p.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..y.cols {
                        if mask[r * y.cols + c] {
                            da.data[r * y.cols + c] = p[c] * (gr[c] - dot);
                        }
                    }
                }
                acc(*a, da);
            }
            Op::LogSoftmaxMasked(a, mask) => {
                let mut da = Tensor::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let m = &mask[r * y.cols..(r + 1) * y.cols];
                    let gsum: f64 = g.row(r).iter().zip(m).filter(|(_, &k)| k).map(|(x, _)| x).sum();
                    for c in 0..y.cols {
                        if m[c] {
                            da.data[r * y.cols + c] = g.get(r, c) - y.get(r, c).exp() * gsum;
                        }
                    }
                }
                acc(*a, da);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols;
                    acc(p, Tensor::from_fn(g.rows, w, |r, c| g.get(r, off + c)));
                    off += w;
                }
            }
            Op::SliceCols(a, start) => {
                let ta = self.value(*a);
                let mut da = Tensor::zeros(ta.rows, ta.cols);
                for r in 0..g.rows {
                    for c in 0..g.cols {
                        da.set(r, start + c, g.get(r, c));
                    }
                }
                acc(*a, da);
            }
            Op::GatherRows(a, idx) => {
                let ta = self.value(*a);
                let mut da = Tensor::zeros(ta.rows, ta.cols);
                for (k, &i) in idx.iter().enumerate() {
                    for (d, x) in da.data[i * ta.cols..(i + 1) * ta.cols].iter_mut().zip(g.row(k)) {
                        *d += x;
                    }
                }
                acc(*a, da);
            }
            Op::PickCols(a, idx) => {
                let ta = self.value(*a);
                let mut da = Tensor::zeros(ta.rows, ta.cols);
                for (r, &c) in idx.iter().enumerate() {
                    da.set(r, c, g.data[r]);
                }
                acc(*a, da);
            }
            Op::ScatterRows(a, rows) => {
                let mut data = Vec::with_capacity(rows.len() * g.cols);
                for &r in rows {
                    data.extend_from_slice(g.row(r));
                }
                acc(*a, Tensor::from_vec(rows.len(), g.cols, data));
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Reshape(a) => {
                let ta = self.value(*a);
                acc(*a, Tensor::from_vec(ta.rows, ta.cols, g.data.clone()));
            }
            Op::Sum(a) => {
                let ta = self.value(*a);
                acc(*a, Tensor::full(ta.rows, ta.cols, g.data[0]));
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (rows, cols) = xhat.shape();
                let gm = self.value(*gamma);
                let mut dgamma = Tensor::zeros(1, cols);
                let mut dbeta = Tensor::zeros(1, cols);
                let mut sum_d = vec![0.0; cols];
                let mut sum_dx = vec![0.0; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        let gy = g.get(r, c);
                        let xh = xhat.get(r, c);
                        dgamma.data[c] += gy * xh;
                        dbeta.data[c] += gy;
                        let dxh = gy * gm.data[c];
                        sum_d[c] += dxh;
                        sum_dx[c] += dxh * xh;
                    }
                }
                let nr = rows as f64;
                let dx = Tensor::from_fn(rows, cols, |r, c| {
                    let dxh = g.get(r, c) * gm.data[c];
                    inv_std[c] / nr * (nr * dxh - sum_d[c] - xhat.get(r, c) * sum_dx[c])
                });
                acc(*x, dx);
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::Aafm {
                q,
                k,
                v,
                a,
                mix,
                max,
                denom,
            } => {
                let (tq, tk, tv, ta) = (self.value(*q), self.value(*k), self.value(*v), self.value(*a));
                let (n, e) = tq.shape();
                let dq = Tensor::from_fn(n, e, |i, c| {
                    let s = sigmoid(tq.get(i, c));
                    g.get(i, c) * mix.get(i, c) * s * (1.0 - s)
                });
                let mut dk = Tensor::zeros(n, e);
                let mut dv = Tensor::zeros(n, e);
                let mut da = Tensor::zeros(n, n);
                let mut u = vec![0.0; e];
                for i in 0..n {
                    for (c, uc) in u.iter_mut().enumerate() {
                        *uc = g.get(i, c) * sigmoid(tq.get(i, c));
                    }
                    let (mi, di, si) = (max.row(i), denom.row(i), mix.row(i));
                    for j in 0..n {
                        let aij = ta.get(i, j);
                        let (kj, vj) = (tk.row(j), tv.row(j));
                        let mut daij = 0.0;
                        let dkj = &mut dk.data[j * e..(j + 1) * e];
                        let dvj = &mut dv.data[j * e..(j + 1) * e];
                        for c in 0..e {
                            let w = (aij + kj[c] - mi[c]).exp() / di[c];
                            dvj[c] += u[c] * w;
                            let t = u[c] * w * (vj[c] - si[c]);
                            daij += t;
                            dkj[c] += t;
                        }
                        da.data[i * n + j] = daij;
                    }
                }
                acc(*q, dq);
                acc(*k, dk);
                acc(*v, dv);
                acc(*a, da);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Parameter path and offset of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

/// Denominator floor for relative errors of near-zero gradients.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compares reverse-mode gradients with central finite differences on up
/// to `max_coords` randomly chosen parameter coordinates.
///
/// The relative error of one coordinate is
/// `|analytic - numeric| / max(|analytic|, |numeric|, GRAD_CHECK_FLOOR)`.
pub fn grad_check<F, R>(
    params: &mut ParamStore,
    f: F,
    eps: f64,
    max_coords: usize,
    rng: &mut R,
) -> Result<GradCheckReport, NumericsError>
where
    F: Fn(&mut Graph) -> Result<Var, NumericsError>,
    R: Rng + ?Sized,
{
    let eval = |p: &ParamStore| -> Result<f64, NumericsError> {
        let mut g = Graph::new(p);
        let out = f(&mut g)?;
        let v = g.scalar(out);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(NumericsError::NonFinite(v))
        }
    };
    let analytic = {
        let mut g = Graph::new(params);
        let out = f(&mut g)?;
        let v = g.scalar(out);
        if !v.is_finite() {
            return Err(NumericsError::NonFinite(v));
        }
        g.backward(out)
    };
    let total = params.num_scalars();
    let picks = index::sample(rng, total, max_coords.min(total)).into_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        worst: None,
    };
    for k in picks {
        let (id, off) = params.locate(k);
        let orig = params.get(id).data[off];
        params.get_mut(id).data[off] = orig + eps;
        let up = eval(params);
        params.get_mut(id).data[off] = orig - eps;
        let down = eval(params);
        params.get_mut(id).data[off] = orig;
        let numeric = (up? - down?) / (2.0 * eps);
        let a = analytic.get(id).data[off];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        report.checked += 1;
        if rel > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(rel);
            report.worst = Some((params.name(id).to_string(), off));
        }
    }
    Ok(report)
}

const CKPT_MAGIC: &[u8; 4] = b"RRCK";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    path: String,
    shape: [usize; 2],
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    params: Vec<ManifestEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

/// Serialises parameters: magic, version, manifest length, JSON manifest,
/// then each tensor as little-endian `f32`.
pub fn encode_checkpoint(params: &ParamStore, meta: &serde_json::Value) -> Vec<u8> {
    let mut entries = Vec::with_capacity(params.len());
    let mut offset = 0;
    for (_, name, t) in params.iter() {
        entries.push(ManifestEntry {
            path: name.to_string(),
            shape: [t.rows, t.cols],
            offset,
            len: t.len(),
        });
        offset += t.len() * 4;
    }
    let manifest = serde_json::to_vec(&Manifest {
        params: entries,
        meta: meta.clone(),
    })
    .expect("manifest serialises");
    let mut out = Vec::with_capacity(16 + manifest.len() + offset);
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    for (_, _, t) in params.iter() {
        for &x in &t.data {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<(ParamStore, serde_json::Value), NumericsError> {
    let bad = |m: &str| NumericsError::Checkpoint(m.to_string());
    if buf.len() < 16 || &buf[..4] != CKPT_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let mlen = u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
    let body = buf.get(16..16usize.saturating_add(mlen)).ok_or_else(|| bad("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
    let payload = &buf[16 + mlen..];
    let mut store = ParamStore::new();
    let mut expected = 0;
    for e in manifest.params {
        if e.shape[0] * e.shape[1] != e.len || e.offset != expected {
            return Err(bad("inconsistent manifest entry"));
        }
        let bytes = payload
            .get(e.offset..e.offset + 4 * e.len)
            .ok_or_else(|| bad("truncated payload"))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        store.add(e.path, Tensor::from_vec(e.shape[0], e.shape[1], data))?;
        expected += 4 * e.len;
    }
    if expected != payload.len() {
        return Err(bad("trailing payload bytes"));
    }
    Ok((store, manifest.meta))
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &ParamStore, meta: &serde_json::Value) -> Result<(), NumericsError> {
    fs::write(path, encode_checkpoint(params, meta))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ParamStore, serde_json::Value), NumericsError> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
        Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    /// Checks `sum(op(inputs) * R)` for a fixed random `R`.
    fn check_op<F>(shapes: &[(usize, usize)], positive: bool, tol: f64, op: F)
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut store = ParamStore::new();
        for (k, &(r, c)) in shapes.iter().enumerate() {
            let mut t = rand_tensor(r, c, &mut rng);
            if positive {
                t = t.map(|x| x.abs() + 0.5);
            }
            store.add(format!("x{k}"), t).unwrap();
        }
        let n = shapes.len();
        let probe = {
            let mut g = Graph::new(&store);
            let xs: Vec<Var> = (0..n).map(|k| g.param(k)).collect();
            let y = op(&mut g, &xs);
            let (r, c) = g.value(y).shape();
            rand_tensor(r, c, &mut rng)
        };
        let report = grad_check(
            &mut store,
            |g| {
                let xs: Vec<Var> = (0..n).map(|k| g.param(k)).collect();
                let y = op(g, &xs);
                let r = g.constant(probe.clone());
                let m = g.mul(y, r);
                Ok(g.sum(m))
            },
            1e-5,
            200,
            &mut rng,
        )
        .unwrap();
        assert!(report.max_rel_err <= tol, "{report:?}");
    }

    #[test]
    fn grad_matmul_family() {
        check_op(&[(3, 4), (4, 5)], false, 1e-6, |g, x| g.matmul(x[0], x[1]));
        check_op(&[(3, 4), (5, 4)], false, 1e-6, |g, x| g.matmul_nt(x[0], x[1]));
        check_op(&[(3, 4), (4, 2), (1, 2)], false, 1e-6, |g, x| g.linear(x[0], x[1], Some(x[2])));
    }

    #[test]
    fn grad_elementwise() {
        check_op(&[(3, 4), (3, 4)], false, 1e-6, |g, x| g.add(x[0], x[1]));
        check_op(&[(3, 4), (3, 4)], false, 1e-6, |g, x| g.sub(x[0], x[1]));
        check_op(&[(3, 4), (3, 4)], false, 1e-5, |g, x| g.mul(x[0], x[1]));
        check_op(&[(3, 4), (3, 1)], false, 1e-5, |g, x| g.mul_col(x[0], x[1]));
        check_op(&[(3, 4), (1, 4)], false, 1e-6, |g, x| g.add_row(x[0], x[1]));
        check_op(&[(3, 4)], false, 1e-6, |g, x| g.scale(x[0], -2.5));
        check_op(&[(3, 4)], false, 1e-6, |g, x| g.one_minus(x[0]));
        check_op(&[(3, 4)], false, 1e-5, |g, x| g.relu(x[0]));
        check_op(&[(3, 4)], false, 1e-5, |g, x| g.sigmoid(x[0]));
        check_op(&[(3, 4)], false, 1e-5, |g, x| g.tanh(x[0]));
        check_op(&[(3, 4)], false, 1e-5, |g, x| g.exp(x[0]));
        check_op(&[(3, 4)], true, 1e-5, |g, x| g.log(x[0]));
    }

    #[test]
    fn grad_structural() {
        check_op(&[(3, 2), (3, 3)], false, 1e-6, |g, x| g.concat_cols(&[x[0], x[1]]));
        check_op(&[(3, 5)], false, 1e-6, |g, x| g.slice_cols(x[0], 1, 3));
        check_op(&[(4, 3)], false, 1e-6, |g, x| g.gather_rows(x[0], vec![2, 0, 2]));
        check_op(&[(3, 4)], false, 1e-6, |g, x| g.pick_cols(x[0], vec![1, 3, 0]));
        check_op(&[(2, 3)], false, 1e-6, |g, x| g.scatter_rows(x[0], vec![3, 0], 4));
        check_op(&[(3, 4)], false, 1e-6, |g, x| g.transpose(x[0]));
        check_op(&[(3, 4)], false, 1e-6, |g, x| g.reshape(x[0], 6, 2));
        check_op(&[(3, 4)], false, 1e-6, |g, x| g.mean(x[0]));
    }

    #[test]
    fn grad_softmax_norm_aafm() {
        let mask = vec![true, false, true, true, true, true, false, true];
        let m1 = mask.clone();
        check_op(&[(2, 4)], false, 1e-5, move |g, x| g.softmax_masked(x[0], m1.clone()).unwrap());
        // masked log-probs are -inf, so probe through a finite selection
        check_op(&[(2, 4)], false, 1e-5, move |g, x| {
            let l = g.log_softmax_masked(x[0], mask.clone()).unwrap();
            g.pick_cols(l, vec![2, 3])
        });
        check_op(&[(5, 3), (1, 3), (1, 3)], false, 1e-5, |g, x| g.instance_norm(x[0], x[1], x[2]));
        check_op(&[(4, 3), (4, 3), (4, 3), (4, 4)], false, 1e-5, |g, x| g.aafm(x[0], x[1], x[2], x[3]));
    }

    #[test]
    fn softmax_examples() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::from_vec(1, 4, vec![0.3; 4]));
        let p = g.softmax_masked(x, vec![true; 4]).unwrap();
        assert!(g.value(p).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let p = g.softmax_masked(x, vec![false, true, false, false]).unwrap();
        assert_eq!(g.value(p).data(), &[0.0, 1.0, 0.0, 0.0]);
        assert!(matches!(
            g.softmax_masked(x, vec![false; 4]),
            Err(NumericsError::AllMasked(0))
        ));
    }

    #[test]
    fn softmax_masked_gradient_is_zero_on_masked() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::from_vec(1, 4, vec![0.1, -0.3, 2.0, 0.5])).unwrap();
        let mut g = Graph::new(&store);
        let x = g.param(0);
        let p = g.softmax_masked(x, vec![true, false, true, false]).unwrap();
        let w = g.constant(Tensor::from_vec(1, 4, vec![1.0, 2.0, 3.0, 4.0]));
        let m = g.mul(p, w);
        let s = g.sum(m);
        let grads = g.backward(s);
        assert_eq!(grads.get(0).get(0, 1), 0.0);
        assert_eq!(grads.get(0).get(0, 3), 0.0);
        assert!(grads.get(0).get(0, 0) != 0.0);
    }

    #[test]
    fn instance_norm_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.constant(rand_tensor(7, 3, &mut rng).map(|v| 5.0 * v + 2.0));
        let gamma = g.constant(Tensor::full(1, 3, 1.0));
        let beta = g.constant(Tensor::zeros(1, 3));
        let y = g.instance_norm(x, gamma, beta);
        let t = g.value(y);
        for c in 0..3 {
            let col: Vec<f64> = (0..7).map(|r| t.get(r, c)).collect();
            let mean = col.iter().sum::<f64>() / 7.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 7.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    #[should_panic(expected = "matmul")]
    fn shape_mismatch_panics() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let a = g.constant(Tensor::zeros(2, 3));
        let b = g.constant(Tensor::zeros(2, 3));
        g.matmul(a, b);
    }

    #[test]
    fn linear_grad_check_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        store.add("w", rand_tensor(4, 3, &mut rng)).unwrap();
        store.add("b", rand_tensor(1, 3, &mut rng)).unwrap();
        let x = rand_tensor(5, 4, &mut rng);
        let report = grad_check(
            &mut store,
            |g| {
                let xv = g.constant(x.clone());
                let (w, b) = (g.p("w"), g.p("b"));
                let y = g.linear(xv, w, Some(b));
                Ok(g.sum(y))
            },
            1e-5,
            200,
            &mut rng,
        )
        .unwrap();
        assert_eq!(report.checked, 15);
        assert!(report.max_rel_err <= 1e-6, "{report:?}");
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        store.add("enc.w", rand_tensor(3, 2, &mut rng)).unwrap();
        store.add("dec.b", rand_tensor(1, 5, &mut rng)).unwrap();
        let meta = serde_json::json!({"embed_dim": 8});
        let bytes = encode_checkpoint(&store, &meta);
        let (back, m) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(m, meta);
        assert_eq!(encode_checkpoint(&back, &m), bytes);
        assert_eq!(back.by_path("enc.w").unwrap().shape(), (3, 2));
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn duplicate_paths_rejected() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::zeros(1, 1)).unwrap();
        assert!(matches!(store.add("a", Tensor::zeros(1, 1)), Err(NumericsError::DuplicatePath(_))));
    }
}
