//! Minimal dense reverse-mode autodiff over `f64` matrices.
//!
//! Every model in the crate is small enough to train on a CPU through a tape:
//! build a [`Graph`] over a [`ParamStore`], compute a scalar, call
//! [`Graph::backward`], and hand the gradients to [`Adam`].

mod adam;
mod encoder;
mod vocab;

pub use adam::Adam;
pub use encoder::{ConvEncoder, ConvEncoderConfig};
pub use vocab::{tokenize, Vocab, CLS, SEP, UNK};

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Self::from_vec(1, data.len(), data)
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_vec(1, 1, vec![v])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut impl Rng) -> Self {
        let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
        Self { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a non-scalar");
        self.data[0]
    }

    fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// `self · other`
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul shapes");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in orow.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "matmul_t shapes");
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = a.iter().zip(other.row(j)).map(|(x, y)| x * y).sum();
            }
        }
        out
    }

    /// `selfᵀ · other`
    pub fn t_matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "t_matmul shapes");
        let mut out = Matrix::zeros(self.cols, other.cols);
        for r in 0..self.rows {
            let b = other.row(r);
            for (i, &a) in self.row(r).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &bv) in out.data[i * other.cols..(i + 1) * other.cols].iter_mut().zip(b) {
                    *o += a * bv;
                }
            }
        }
        out
    }
}

/// Numerically stable `ln Σ exp(xᵢ)`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|x| (x - lse).exp()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named trainable tensors, in registration order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|m| m.data.len()).sum()
    }

    /// Flat scalar access, for finite-difference probes.
    pub fn scalar_mut(&mut self, id: ParamId, index: usize) -> &mut f64 {
        &mut self.values[id.0].data[index]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec(self)?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let store: Self = serde_json::from_slice(&bytes)?;
        if store.names.len() != store.values.len()
            || store.values.iter().any(|m| m.data.len() != m.rows * m.cols)
        {
            return Err(Error::Artifact(format!("{}: inconsistent parameter shapes", path.display())));
        }
        Ok(store)
    }
}

/// Gradients aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Grads(Vec<Matrix>);

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self(store.values.iter().map(|m| Matrix::zeros(m.rows, m.cols)).collect())
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.0[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Matrix> {
        self.0.iter()
    }

    pub fn global_norm(&self) -> f64 {
        self.0.iter().flat_map(|m| &m.data).map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        for m in &mut self.0 {
            m.data.iter_mut().for_each(|g| *g *= c);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flat_map(|m| &m.data).all(|g| g.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    Gather(Var, Vec<usize>),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    MeanRows(Var),
    ConcatCols(Vec<Var>),
    StackRows(Vec<Var>),
    SliceRows(Var, usize),
    ShiftDown(Var),
    ShiftUp(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    NormalizeRows(Var, Vec<f64>),
    Pick(Var, usize, usize),
    Sum(Var),
}

struct Node {
    value: Option<Matrix>,
    op: Op,
}

const NORM_EPS: f64 = 1e-12;

/// A computation tape over a borrowed parameter store.
pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
        }
    }

    pub fn value(&self, v: Var) -> &Matrix {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(m), _) => m,
            (None, Op::Param(id)) => self.store.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value: Some(value), op });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf)
    }

    /// Rows of `src` selected by `idx`.
    pub fn gather(&mut self, src: Var, idx: &[usize]) -> Var {
        let s = self.value(src);
        let mut out = Matrix::zeros(idx.len(), s.cols);
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(s.row(i));
        }
        self.push(out, Op::Gather(src, idx.to_vec()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_t(self.value(b));
        self.push(out, Op::MatMulT(a, b))
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Matrix {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!((x.rows, x.cols), (y.rows, y.cols), "elementwise shapes");
        Matrix::from_vec(x.rows, x.cols, x.data.iter().zip(&y.data).map(|(p, q)| f(*p, *q)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    /// Adds the single row `r` to every row of `a`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Var {
        let (x, row) = (self.value(a), self.value(r));
        assert!(row.rows == 1 && row.cols == x.cols, "add_row shapes");
        let mut out = x.clone();
        for i in 0..out.rows {
            for (o, b) in out.row_mut(i).iter_mut().zip(&row.data) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, r))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let x = self.value(a);
        let out = Matrix::from_vec(x.rows, x.cols, x.data.iter().map(|v| v * c).collect());
        self.push(out, Op::Scale(a, c))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = Matrix::from_vec(x.rows, x.cols, x.data.iter().map(|v| v.tanh()).collect());
        self.push(out, Op::Tanh(a))
    }

    /// Column means, as a single row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        assert!(x.rows > 0, "mean over zero rows");
        let mut out = Matrix::zeros(1, x.cols);
        for r in 0..x.rows {
            for (o, v) in out.data.iter_mut().zip(x.row(r)) {
                *o += v;
            }
        }
        let n = x.rows as f64;
        out.data.iter_mut().for_each(|o| *o /= n);
        self.push(out, Op::MeanRows(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut c0 = 0;
            for &p in parts {
                let m = self.value(p);
                assert_eq!(m.rows, rows, "concat_cols row counts");
                out.data[r * cols + c0..r * cols + c0 + m.cols].copy_from_slice(m.row(r));
                c0 += m.cols;
            }
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn stack_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols, cols, "stack_rows column counts");
            data.extend_from_slice(&m.data);
        }
        let rows = data.len() / cols.max(1);
        self.push(Matrix::from_vec(rows, cols, data), Op::StackRows(parts.to_vec()))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let x = self.value(a);
        assert!(start < end && end <= x.rows, "slice_rows bounds");
        let out = Matrix::from_vec(end - start, x.cols, x.data[start * x.cols..end * x.cols].to_vec());
        self.push(out, Op::SliceRows(a, start))
    }

    /// Row `i` of the output is row `i - 1` of `a`; the first row is zero.
    pub fn shift_down(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = Matrix::zeros(x.rows, x.cols);
        if x.rows > 1 {
            out.data[x.cols..].copy_from_slice(&x.data[..(x.rows - 1) * x.cols]);
        }
        self.push(out, Op::ShiftDown(a))
    }

    /// Row `i` of the output is row `i + 1` of `a`; the last row is zero.
    pub fn shift_up(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = Matrix::zeros(x.rows, x.cols);
        if x.rows > 1 {
            out.data[..(x.rows - 1) * x.cols].copy_from_slice(&x.data[x.cols..]);
        }
        self.push(out, Op::ShiftUp(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = Matrix::zeros(x.rows, x.cols);
        for r in 0..x.rows {
            out.row_mut(r).copy_from_slice(&softmax(x.row(r)));
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for r in 0..x.rows {
            let lse = log_sum_exp(x.row(r));
            out.row_mut(r).iter_mut().for_each(|v| *v -= lse);
        }
        self.push(out, Op::LogSoftmaxRows(a))
    }

    /// Scales every row to unit L2 norm.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        let mut norms = Vec::with_capacity(x.rows);
        for r in 0..x.rows {
            let n = (x.row(r).iter().map(|v| v * v).sum::<f64>() + NORM_EPS).sqrt();
            out.row_mut(r).iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        self.push(out, Op::NormalizeRows(a, norms))
    }

    pub fn pick(&mut self, a: Var, r: usize, c: usize) -> Var {
        let v = self.value(a).get(r, c);
        self.push(Matrix::scalar(v), Op::Pick(a, r, c))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.value(a).data.iter().sum();
        self.push(Matrix::scalar(v), Op::Sum(a))
    }

    /// Reverse pass from the scalar `loss`; returns parameter gradients.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).data.len(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));
        let mut out = Grads::zeros_like(self.store);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let mut acc = |v: Var, m: Matrix| match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&m),
                slot @ None => *slot = Some(m),
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.0[id.0].add_assign(&g),
                Op::Gather(src, idx) => {
                    let s = self.value(*src);
                    let mut gs = Matrix::zeros(s.rows, s.cols);
                    for (r, &j) in idx.iter().enumerate() {
                        for (o, v) in gs.row_mut(j).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    acc(*src, gs);
                }
                Op::MatMul(a, b) => {
                    acc(*a, g.matmul_t(self.value(*b)));
                    acc(*b, self.value(*a).t_matmul(&g));
                }
                Op::MatMulT(a, b) => {
                    acc(*a, g.matmul(self.value(*b)));
                    acc(*b, g.t_matmul(self.value(*a)));
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    let neg = Matrix::from_vec(g.rows, g.cols, g.data.iter().map(|v| -v).collect());
                    acc(*a, g);
                    acc(*b, neg);
                }
                Op::Mul(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    let ga = g.data.iter().zip(&y.data).map(|(p, q)| p * q).collect();
                    let gb = g.data.iter().zip(&x.data).map(|(p, q)| p * q).collect();
                    acc(*a, Matrix::from_vec(g.rows, g.cols, ga));
                    acc(*b, Matrix::from_vec(g.rows, g.cols, gb));
                }
                Op::AddRow(a, r) => {
                    let mut gr = Matrix::zeros(1, g.cols);
                    for i in 0..g.rows {
                        for (o, v) in gr.data.iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    acc(*a, g);
                    acc(*r, gr);
                }
                Op::Scale(a, c) => {
                    acc(*a, Matrix::from_vec(g.rows, g.cols, g.data.iter().map(|v| v * c).collect()))
                }
                Op::Tanh(a) => {
                    let y = self.value(Var(i));
                    let ga = g.data.iter().zip(&y.data).map(|(p, t)| p * (1.0 - t * t)).collect();
                    acc(*a, Matrix::from_vec(g.rows, g.cols, ga));
                }
                Op::MeanRows(a) => {
                    let x = self.value(*a);
                    let n = x.rows as f64;
                    let mut ga = Matrix::zeros(x.rows, x.cols);
                    for r in 0..x.rows {
                        for (o, v) in ga.row_mut(r).iter_mut().zip(&g.data) {
                            *o = v / n;
                        }
                    }
                    acc(*a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut c0 = 0;
                    for &p in parts {
                        let cols = self.value(p).cols;
                        let mut gp = Matrix::zeros(g.rows, cols);
                        for r in 0..g.rows {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[c0..c0 + cols]);
                        }
                        c0 += cols;
                        acc(p, gp);
                    }
                }
                Op::StackRows(parts) => {
                    let mut r0 = 0;
                    for &p in parts {
                        let rows = self.value(p).rows;
                        let gp = Matrix::from_vec(rows, g.cols, g.data[r0 * g.cols..(r0 + rows) * g.cols].to_vec());
                        r0 += rows;
                        acc(p, gp);
                    }
                }
                Op::SliceRows(a, start) => {
                    let x = self.value(*a);
                    let mut ga = Matrix::zeros(x.rows, x.cols);
                    ga.data[start * x.cols..start * x.cols + g.data.len()].copy_from_slice(&g.data);
                    acc(*a, ga);
                }
                Op::ShiftDown(a) => {
                    let mut ga = Matrix::zeros(g.rows, g.cols);
                    if g.rows > 1 {
                        ga.data[..(g.rows - 1) * g.cols].copy_from_slice(&g.data[g.cols..]);
                    }
                    acc(*a, ga);
                }
                Op::ShiftUp(a) => {
                    let mut ga = Matrix::zeros(g.rows, g.cols);
                    if g.rows > 1 {
                        ga.data[g.cols..].copy_from_slice(&g.data[..(g.rows - 1) * g.cols]);
                    }
                    acc(*a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = self.value(Var(i));
                    let mut ga = Matrix::zeros(g.rows, g.cols);
                    for r in 0..g.rows {
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(p, q)| p * q).sum();
                        for ((o, gv), yv) in ga.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                            *o = yv * (gv - dot);
                        }
                    }
                    acc(*a, ga);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = self.value(Var(i));
                    let mut ga = Matrix::zeros(g.rows, g.cols);
                    for r in 0..g.rows {
                        let total: f64 = g.row(r).iter().sum();
                        for ((o, gv), yv) in ga.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                            *o = gv - yv.exp() * total;
                        }
                    }
                    acc(*a, ga);
                }
                Op::NormalizeRows(a, norms) => {
                    let y = self.value(Var(i));
                    let mut ga = Matrix::zeros(g.rows, g.cols);
                    for r in 0..g.rows {
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(p, q)| p * q).sum();
                        for ((o, gv), yv) in ga.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                            *o = (gv - yv * dot) / norms[r];
                        }
                    }
                    acc(*a, ga);
                }
                Op::Pick(a, r, c) => {
                    let x = self.value(*a);
                    let mut ga = Matrix::zeros(x.rows, x.cols);
                    ga.data[r * x.cols + c] = g.item();
                    acc(*a, ga);
                }
                Op::Sum(a) => {
                    let x = self.value(*a);
                    acc(*a, Matrix::from_vec(x.rows, x.cols, vec![g.item(); x.data.len()]));
                }
            }
        }
        out
    }
}

/// Central finite-difference check of `f`'s gradient at the probed scalars.
/// Returns the largest relative error, with magnitudes floored at `floor`.
pub fn gradient_check(
    store: &mut ParamStore,
    probes: &[(ParamId, usize)],
    h: f64,
    floor: f64,
    f: impl Fn(&mut Graph) -> Var,
) -> f64 {
    let analytic = {
        let mut g = Graph::new(store);
        let loss = f(&mut g);
        g.backward(loss)
    };
    let eval = |store: &ParamStore| {
        let mut g = Graph::new(store);
        let loss = f(&mut g);
        g.value(loss).item()
    };
    let mut worst: f64 = 0.0;
    for &(id, idx) in probes {
        let orig = *store.scalar_mut(id, idx);
        *store.scalar_mut(id, idx) = orig + h;
        let up = eval(store);
        *store.scalar_mut(id, idx) = orig - h;
        let down = eval(store);
        *store.scalar_mut(id, idx) = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.get(id).data[idx];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        worst = worst.max(rel);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store_with(shapes: &[(usize, usize)]) -> (ParamStore, Vec<ParamId>) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = ParamStore::new();
        let ids = shapes
            .iter()
            .enumerate()
            .map(|(i, &(r, c))| s.add(format!("p{i}"), Matrix::uniform(r, c, 1.0, &mut rng)))
            .collect();
        (s, ids)
    }

    fn all_probes(store: &ParamStore, ids: &[ParamId]) -> Vec<(ParamId, usize)> {
        ids.iter()
            .flat_map(|&id| (0..store.get(id).data.len()).map(move |i| (id, i)))
            .collect()
    }

    #[test]
    fn matmul_variants_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Matrix::uniform(3, 4, 1.0, &mut rng);
        let b = Matrix::uniform(5, 4, 1.0, &mut rng);
        let mut bt = Matrix::zeros(4, 5);
        for i in 0..5 {
            for j in 0..4 {
                bt.data[j * 5 + i] = b.get(i, j);
            }
        }
        let x = a.matmul_t(&b);
        let y = a.matmul(&bt);
        for (p, q) in x.data.iter().zip(&y.data) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn every_op_passes_gradient_check() {
        let (mut s, ids) = store_with(&[(6, 3), (3, 3), (1, 3), (9, 2), (2, 3)]);
        let probes = all_probes(&s, &ids);
        let worst = gradient_check(&mut s, &probes, 1e-5, 1e-6, |g| {
            let emb = g.param(ids[0]);
            let w = g.param(ids[1]);
            let b = g.param(ids[2]);
            let wc = g.param(ids[3]);
            let other = g.param(ids[4]);
            let x = g.gather(emb, &[0, 2, 2, 5]);
            let down = g.shift_down(x);
            let up = g.shift_up(x);
            let cat = g.concat_cols(&[down, x, up]);
            let conv = g.matmul(cat, wc);
            let h = g.matmul(x, w);
            let h = g.add_row(h, b);
            let h = g.tanh(h);
            let h = g.add(h, x);
            let head = g.slice_rows(h, 0, 2);
            let tail = g.slice_rows(h, 2, 4);
            let mixed = g.mul(head, tail);
            let att = g.matmul_t(mixed, other);
            let att = g.scale(att, 0.7);
            let p = g.softmax_rows(att);
            let ctx = g.matmul(p, other);
            let n = g.normalize_rows(ctx);
            let m = g.mean_rows(n);
            let st = g.stack_rows(&[m, b]);
            let ls = g.log_softmax_rows(st);
            let d = g.sub(ls, st);
            let pk = g.pick(d, 1, 2);
            let sm = g.sum(conv);
            let sm = g.tanh(sm);
            let tot = g.sum(ls);
            let a = g.add(pk, sm);
            g.add(a, tot)
        });
        assert!(worst < 1e-6, "relative error {worst}");
    }

    #[test]
    fn lse_is_stable() {
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-9);
        let p = softmax(&[1.0, 0.0]);
        assert!((p[0] - 0.731059).abs() < 1e-6);
    }

    #[test]
    fn param_store_round_trip() {
        let (s, _) = store_with(&[(2, 2)]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.json");
        s.save(&p).unwrap();
        assert_eq!(ParamStore::load(&p).unwrap(), s);
    }
}
