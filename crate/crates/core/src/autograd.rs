//! Reverse-mode gradient tape over row-major matrices.
//!
//! Operations are recorded in execution order on a [`Tape`]; [`Tape::backward`]
//! walks the records in reverse and accumulates adjoints. Values are generic
//! over [`Real`] so the same graph runs in `f32` for training and `f64` for
//! gradient checks.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

use crate::linalg::{dgemm, sgemm};

/// Floating-point element type of the tape.
pub trait Real:
    Copy
    + Debug
    + Default
    + PartialOrd
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn is_finite(self) -> bool;

    /// `c = op(a) * op(b) + beta * c`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        ta: bool,
        b: &[Self],
        tb: bool,
        beta: Self,
        c: &mut [Self],
    );

    fn zero() -> Self {
        Self::default()
    }

    fn one() -> Self {
        Self::from_f64(1.0)
    }
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn tanh(self) -> Self {
        f32::tanh(self)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        ta: bool,
        b: &[f32],
        tb: bool,
        beta: f32,
        c: &mut [f32],
    ) {
        sgemm(m, k, n, 1.0, a, ta, b, tb, beta, c);
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        ta: bool,
        b: &[f64],
        tb: bool,
        beta: f64,
        c: &mut [f64],
    ) {
        dgemm(m, k, n, 1.0, a, ta, b, tb, beta, c);
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(
            rows * cols,
            data.len(),
            "matrix {rows}x{cols} with {} values",
            data.len()
        );
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![T::zero(); rows * cols])
    }

    pub fn filled(rows: usize, cols: usize, v: T) -> Self {
        Self::new(rows, cols, vec![v; rows * cols])
    }

    pub fn scalar(v: T) -> Self {
        Self::new(1, 1, vec![v])
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn add_assign(&mut self, other: &Matrix<T>) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    /// `op(a) * op(b)`; flags mark transposed reads.
    MatMul(Var, Var, bool, bool),
    Add(Var, Var),
    /// `a + row`, broadcasting a `1 x cols` row.
    AddRow(Var, Var),
    /// `a * row` elementwise, broadcasting a `1 x cols` row.
    MulRow(Var, Var),
    Mul(Var, Var),
    /// `scale * a + shift`.
    Affine(Var, T),
    /// Per-row standardization; caches the reciprocal standard deviations.
    Standardize(Var, Vec<T>),
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Sum(Var),
    /// Row-wise L2 normalization; caches the row norms.
    RowNormalize(Var, Vec<T>),
    /// `-sum(target * log_softmax(a))` with row-stochastic constant targets.
    SoftTargetXent(Var, Matrix<T>),
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    needs_grad: bool,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;
const NORM_EPS: f64 = 1e-6;

/// Recorded computation graph.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn softmax_rows<T: Real>(x: &Matrix<T>) -> Matrix<T> {
    let mut out = Vec::with_capacity(x.data.len());
    let mut exps = vec![0.0f64; x.cols];
    for r in 0..x.rows {
        let row = x.row(r);
        let max = row
            .iter()
            .copied()
            .fold(row[0], |a, b| if b > a { b } else { a });
        // Normalizing in f64 keeps each row within one rounding of unit sum.
        let mut sum = 0.0f64;
        for (e, &v) in exps.iter_mut().zip(row) {
            *e = (v - max).exp().to_f64();
            sum += *e;
        }
        out.extend(exps.iter().map(|&e| T::from_f64(e / sum)));
    }
    Matrix::new(x.rows, x.cols, out)
}

fn log_softmax_rows<T: Real>(x: &Matrix<T>) -> Matrix<T> {
    let mut out = Vec::with_capacity(x.data.len());
    for r in 0..x.rows {
        let row = x.row(r);
        let max = row
            .iter()
            .copied()
            .fold(row[0], |a, b| if b > a { b } else { a });
        let mut sum = 0.0f64;
        for &v in row {
            sum += (v - max).exp().to_f64();
        }
        let lse = max.to_f64() + sum.ln();
        out.extend(row.iter().map(|&v| T::from_f64(v.to_f64() - lse)));
    }
    Matrix::new(x.rows, x.cols, out)
}

fn gelu<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    let u = T::from_f64(GELU_C) * (x + T::from_f64(GELU_A) * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t)
        + half * x * (T::one() - t * t) * c * (T::one() + T::from_f64(3.0) * a * x * x)
}

fn matmul_dims(
    a: &Matrix<impl Real>,
    ta: bool,
    b: &Matrix<impl Real>,
    tb: bool,
) -> (usize, usize, usize) {
    let (m, k) = if ta {
        (a.cols, a.rows)
    } else {
        (a.rows, a.cols)
    };
    let (k2, n) = if tb {
        (b.cols, b.rows)
    } else {
        (b.rows, b.cols)
    };
    assert_eq!(k, k2, "matmul inner dimensions {k} vs {k2}");
    (m, k, n)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> T {
        let m = self.value(v);
        assert_eq!((m.rows, m.cols), (1, 1), "not a scalar");
        m.data[0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    /// Product with optional transposed reads of either operand.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = matmul_dims(av, ta, bv, tb);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, &av.data, ta, &bv.data, tb, T::zero(), &mut out);
        let needs = self.needs(a) || self.needs(b);
        self.push(Matrix::new(m, n, out), Op::MatMul(a, b, ta, tb), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!((av.rows, av.cols), (bv.rows, bv.cols), "add shape mismatch");
        let data = av.data.iter().zip(&bv.data).map(|(&x, &y)| x + y).collect();
        let out = Matrix::new(av.rows, av.cols, data);
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), needs)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!((rv.rows, rv.cols), (1, av.cols), "add_row shape mismatch");
        let mut data = av.data.clone();
        for chunk in data.chunks_exact_mut(av.cols) {
            for (x, &b) in chunk.iter_mut().zip(&rv.data) {
                *x += b;
            }
        }
        let out = Matrix::new(av.rows, av.cols, data);
        let needs = self.needs(a) || self.needs(row);
        self.push(out, Op::AddRow(a, row), needs)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!((rv.rows, rv.cols), (1, av.cols), "mul_row shape mismatch");
        let mut data = av.data.clone();
        for chunk in data.chunks_exact_mut(av.cols) {
            for (x, &g) in chunk.iter_mut().zip(&rv.data) {
                *x = *x * g;
            }
        }
        let out = Matrix::new(av.rows, av.cols, data);
        let needs = self.needs(a) || self.needs(row);
        self.push(out, Op::MulRow(a, row), needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!((av.rows, av.cols), (bv.rows, bv.cols), "mul shape mismatch");
        let data = av.data.iter().zip(&bv.data).map(|(&x, &y)| x * y).collect();
        let out = Matrix::new(av.rows, av.cols, data);
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Mul(a, b), needs)
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let (s, b) = (T::from_f64(scale), T::from_f64(shift));
        let av = self.value(a);
        let out = Matrix::new(
            av.rows,
            av.cols,
            av.data.iter().map(|&x| s * x + b).collect(),
        );
        let needs = self.needs(a);
        self.push(out, Op::Affine(a, s), needs)
    }

    /// Zero-mean, unit-variance rows (layer normalization without the affine part).
    pub fn standardize(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let cols = T::from_f64(av.cols as f64);
        let mut data = Vec::with_capacity(av.data.len());
        let mut rstd = Vec::with_capacity(av.rows);
        for r in 0..av.rows {
            let row = av.row(r);
            let mut mean = T::zero();
            for &v in row {
                mean += v;
            }
            mean = mean / cols;
            let mut var = T::zero();
            for &v in row {
                var += (v - mean) * (v - mean);
            }
            let rs = T::one() / (var / cols + T::from_f64(NORM_EPS)).sqrt();
            rstd.push(rs);
            data.extend(row.iter().map(|&v| (v - mean) * rs));
        }
        let out = Matrix::new(av.rows, av.cols, data);
        let needs = self.needs(a);
        self.push(out, Op::Standardize(a, rstd), needs)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = Matrix::new(av.rows, av.cols, av.data.iter().map(|&x| gelu(x)).collect());
        let needs = self.needs(a);
        self.push(out, Op::Gelu(a), needs)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        let needs = self.needs(a);
        self.push(out, Op::Softmax(a), needs)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let out = log_softmax_rows(self.value(a));
        let needs = self.needs(a);
        self.push(out, Op::LogSoftmax(a), needs)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.cols, "column slice out of range");
        let mut data = Vec::with_capacity(av.rows * len);
        for r in 0..av.rows {
            data.extend_from_slice(&av.row(r)[start..start + len]);
        }
        let out = Matrix::new(av.rows, len, data);
        let needs = self.needs(a);
        self.push(out, Op::SliceCols(a, start), needs)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let pv = self.value(p);
                assert_eq!(pv.rows, rows, "concat row mismatch");
                data.extend_from_slice(pv.row(r));
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(
            Matrix::new(rows, cols, data),
            Op::ConcatCols(parts.to_vec()),
            needs,
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let mut s = T::zero();
        for &v in &self.value(a).data {
            s += v;
        }
        let needs = self.needs(a);
        self.push(Matrix::scalar(s), Op::Sum(a), needs)
    }

    /// Scales each row to unit L2 norm. Rows must be nonzero.
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut norms = Vec::with_capacity(av.rows);
        let mut data = Vec::with_capacity(av.data.len());
        for r in 0..av.rows {
            let row = av.row(r);
            let mut sq = T::zero();
            for &v in row {
                sq += v * v;
            }
            let norm = sq.sqrt();
            norms.push(norm);
            data.extend(row.iter().map(|&v| v / norm));
        }
        let out = Matrix::new(av.rows, av.cols, data);
        let needs = self.needs(a);
        self.push(out, Op::RowNormalize(a, norms), needs)
    }

    /// `-sum_ij target[i, j] * log_softmax(logits)[i, j]` as a scalar.
    ///
    /// Target rows are taken to sum to one, so the logit gradient is
    /// `softmax(logits) - target` and vanishes exactly when the two agree.
    pub fn soft_target_xent(&mut self, logits: Var, target: Matrix<T>) -> Var {
        let lv = self.value(logits);
        assert_eq!(
            (lv.rows, lv.cols),
            (target.rows, target.cols),
            "target shape mismatch"
        );
        let logp = log_softmax_rows(lv);
        let mut s = T::zero();
        for (&t, &lp) in target.data.iter().zip(&logp.data) {
            if t != T::zero() {
                s += t * lp;
            }
        }
        let needs = self.needs(logits);
        self.push(
            Matrix::scalar(-s),
            Op::SoftTargetXent(logits, target),
            needs,
        )
    }

    /// Adjoints of every node with respect to the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let lv = self.value(loss);
        assert_eq!((lv.rows, lv.cols), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                &Op::MatMul(a, b, ta, tb) => {
                    let (av, bv) = (self.value(a), self.value(b));
                    let (m, k, n) = matmul_dims(av, ta, bv, tb);
                    if self.needs(a) {
                        let mut da = vec![T::zero(); m * k];
                        if ta {
                            // stored a is k x m: da = op(b) * g^T
                            T::gemm(k, n, m, &bv.data, tb, &g.data, true, T::zero(), &mut da);
                            accumulate(&mut grads, a, Matrix::new(k, m, da));
                        } else {
                            T::gemm(m, n, k, &g.data, false, &bv.data, !tb, T::zero(), &mut da);
                            accumulate(&mut grads, a, Matrix::new(m, k, da));
                        }
                    }
                    if self.needs(b) {
                        let mut db = vec![T::zero(); k * n];
                        if tb {
                            // stored b is n x k: db = g^T * op(a)
                            T::gemm(n, m, k, &g.data, true, &av.data, ta, T::zero(), &mut db);
                            accumulate(&mut grads, b, Matrix::new(n, k, db));
                        } else {
                            T::gemm(k, m, n, &av.data, !ta, &g.data, false, T::zero(), &mut db);
                            accumulate(&mut grads, b, Matrix::new(k, n, db));
                        }
                    }
                }
                &Op::Add(a, b) => {
                    if self.needs(a) {
                        accumulate(&mut grads, a, g.clone());
                    }
                    if self.needs(b) {
                        accumulate(&mut grads, b, g.clone());
                    }
                }
                &Op::AddRow(a, row) => {
                    if self.needs(row) {
                        let mut dr = vec![T::zero(); g.cols];
                        for chunk in g.data.chunks_exact(g.cols) {
                            for (d, &x) in dr.iter_mut().zip(chunk) {
                                *d += x;
                            }
                        }
                        accumulate(&mut grads, row, Matrix::new(1, g.cols, dr));
                    }
                    if self.needs(a) {
                        accumulate(&mut grads, a, g.clone());
                    }
                }
                &Op::MulRow(a, row) => {
                    let (av, rv) = (self.value(a), self.value(row));
                    if self.needs(row) {
                        let mut dr = vec![T::zero(); g.cols];
                        for (gc, ac) in g
                            .data
                            .chunks_exact(g.cols)
                            .zip(av.data.chunks_exact(av.cols))
                        {
                            for ((d, &x), &y) in dr.iter_mut().zip(gc).zip(ac) {
                                *d += x * y;
                            }
                        }
                        accumulate(&mut grads, row, Matrix::new(1, g.cols, dr));
                    }
                    if self.needs(a) {
                        let mut da = g.data.clone();
                        for chunk in da.chunks_exact_mut(g.cols) {
                            for (x, &w) in chunk.iter_mut().zip(&rv.data) {
                                *x = *x * w;
                            }
                        }
                        accumulate(&mut grads, a, Matrix::new(g.rows, g.cols, da));
                    }
                }
                &Op::Mul(a, b) => {
                    let (av, bv) = (self.value(a), self.value(b));
                    if self.needs(a) {
                        let d = g.data.iter().zip(&bv.data).map(|(&x, &y)| x * y).collect();
                        accumulate(&mut grads, a, Matrix::new(g.rows, g.cols, d));
                    }
                    if self.needs(b) {
                        let d = g.data.iter().zip(&av.data).map(|(&x, &y)| x * y).collect();
                        accumulate(&mut grads, b, Matrix::new(g.rows, g.cols, d));
                    }
                }
                &Op::Affine(a, s) => {
                    let d = g.data.iter().map(|&x| x * s).collect();
                    accumulate(&mut grads, a, Matrix::new(g.rows, g.cols, d));
                }
                Op::Standardize(a, rstd) => {
                    let y = &node.value;
                    let cols = T::from_f64(y.cols as f64);
                    let mut d = Vec::with_capacity(g.data.len());
                    for r in 0..y.rows {
                        let (gr, yr) = (g.row(r), y.row(r));
                        let mut mg = T::zero();
                        let mut mgy = T::zero();
                        for (&gv, &yv) in gr.iter().zip(yr) {
                            mg += gv;
                            mgy += gv * yv;
                        }
                        mg = mg / cols;
                        mgy = mgy / cols;
                        d.extend(
                            gr.iter()
                                .zip(yr)
                                .map(|(&gv, &yv)| rstd[r] * (gv - mg - yv * mgy)),
                        );
                    }
                    accumulate(&mut grads, *a, Matrix::new(g.rows, g.cols, d));
                }
                &Op::Gelu(a) => {
                    let av = self.value(a);
                    let d = g
                        .data
                        .iter()
                        .zip(&av.data)
                        .map(|(&x, &v)| x * gelu_grad(v))
                        .collect();
                    accumulate(&mut grads, a, Matrix::new(g.rows, g.cols, d));
                }
                &Op::Softmax(a) => {
                    let y = &node.value;
                    let mut d = Vec::with_capacity(g.data.len());
                    for r in 0..y.rows {
                        let (gr, yr) = (g.row(r), y.row(r));
                        let mut dot = T::zero();
                        for (&gv, &yv) in gr.iter().zip(yr) {
                            dot += gv * yv;
                        }
                        d.extend(gr.iter().zip(yr).map(|(&gv, &yv)| yv * (gv - dot)));
                    }
                    accumulate(&mut grads, a, Matrix::new(g.rows, g.cols, d));
                }
                &Op::LogSoftmax(a) => {
                    let p = softmax_rows(self.value(a));
                    let mut d = Vec::with_capacity(g.data.len());
                    for r in 0..p.rows {
                        let (gr, pr) = (g.row(r), p.row(r));
                        let mut total = T::zero();
                        for &gv in gr {
                            total += gv;
                        }
                        d.extend(gr.iter().zip(pr).map(|(&gv, &pv)| gv - pv * total));
                    }
                    accumulate(&mut grads, a, Matrix::new(g.rows, g.cols, d));
                }
                &Op::SliceCols(a, start) => {
                    let av = self.value(a);
                    let mut d = Matrix::zeros(av.rows, av.cols);
                    for r in 0..g.rows {
                        d.data[r * av.cols + start..r * av.cols + start + g.cols]
                            .copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, a, d);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let pc = self.value(p).cols;
                        if self.needs(p) {
                            let mut d = Vec::with_capacity(g.rows * pc);
                            for r in 0..g.rows {
                                d.extend_from_slice(&g.row(r)[offset..offset + pc]);
                            }
                            accumulate(&mut grads, p, Matrix::new(g.rows, pc, d));
                        }
                        offset += pc;
                    }
                }
                &Op::Sum(a) => {
                    let av = self.value(a);
                    accumulate(&mut grads, a, Matrix::filled(av.rows, av.cols, g.data[0]));
                }
                Op::RowNormalize(a, norms) => {
                    let y = &node.value;
                    let mut d = Vec::with_capacity(g.data.len());
                    for r in 0..y.rows {
                        let (gr, yr) = (g.row(r), y.row(r));
                        let mut dot = T::zero();
                        for (&gv, &yv) in gr.iter().zip(yr) {
                            dot += gv * yv;
                        }
                        d.extend(
                            gr.iter()
                                .zip(yr)
                                .map(|(&gv, &yv)| (gv - yv * dot) / norms[r]),
                        );
                    }
                    accumulate(&mut grads, *a, Matrix::new(g.rows, g.cols, d));
                }
                Op::SoftTargetXent(logits, target) => {
                    let p = softmax_rows(self.value(*logits));
                    let s = g.data[0];
                    let d = p
                        .data
                        .iter()
                        .zip(&target.data)
                        .map(|(&pv, &t)| s * (pv - t))
                        .collect();
                    accumulate(&mut grads, *logits, Matrix::new(p.rows, p.cols, d));
                }
            }
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Matrix<T>>], v: Var, g: Matrix<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Adjoint of `v`, or `None` when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
