//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a Wengert list: every op appends a node holding its forward
//! value and enough bookkeeping to push an adjoint back to its inputs. Nodes
//! are addressed by the copyable handle [`Var`]. Only leaves created with
//! [`Graph::param`] receive gradients.

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Softmax(Var),
    LogSoftmax(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Gelu(Var),
    Tanh(Var),
    Exp(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    GatherRows { x: Var, index: Vec<usize> },
    ScatterRows { base: Var, src: Var, index: Vec<usize> },
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    DepthwiseConv { x: Var, kernel: Var },
    /// Scalar whose gradient w.r.t. each input was computed externally.
    External(Vec<(Var, Vec<f64>)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// `c = alpha * a·b + beta * c` for row/column strided operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: strides and extents describe regions inside the given slices;
    // callers pass row-major buffers of exactly m×k, k×n (or transposes) and m×n.
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
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(sigmoid(x))` without overflow for large |x|.
pub(crate) fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn softmax_row(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        sum += *d;
    }
    dst.iter_mut().for_each(|d| *d /= sum);
}

fn log_softmax_row(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + src.iter().map(|&s| (s - max).exp()).sum::<f64>().ln();
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = s - lse;
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf; receives a gradient on [`Graph::backward`].
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn matrix(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::Shape {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        Ok((s[0], s[1]))
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul")?;
        let (k2, n) = self.matrix(b, "matmul")?;
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            &mut out,
            0.0,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul_nt")?;
        let (n, k2) = self.matrix(b, "matmul_nt")?;
        if k != k2 {
            return Err(self.mismatch("matmul_nt", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (1, k as isize),
            &mut out,
            0.0,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulNt(a, b), rg))
    }

    fn zip_op(&mut self, a: Var, b: Var, name: &'static str, f: fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch(name, a, b));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(Tensor::from_parts(self.shape(a).to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_op(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_op(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_op(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    fn row_broadcast(&self, a: Var, b: Var, name: &'static str) -> Result<()> {
        let (_, c) = self.dims(a);
        if self.value(b).len() != c {
            return Err(self.mismatch(name, a, b));
        }
        Ok(())
    }

    /// Adds vector `b` (length = columns of `a`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.row_broadcast(a, b, "add_row")?;
        let c = self.dims(a).1;
        let bv = self.value(b).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % c])
            .collect();
        let t = Tensor::from_parts(self.shape(a).to_vec(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::AddRow(a, b), rg))
    }

    /// Multiplies every row of `a` elementwise by vector `b`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.row_broadcast(a, b, "mul_row")?;
        let c = self.dims(a).1;
        let bv = self.value(b).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * bv[i % c])
            .collect();
        let t = Tensor::from_parts(self.shape(a).to_vec(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::MulRow(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let data = self.value(a).data().iter().map(|&x| x * s).collect();
        let t = Tensor::from_parts(self.shape(a).to_vec(), data);
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, s), rg)
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let t = Tensor::from_parts(self.shape(x).to_vec(), out);
        let rg = self.rg(&[x]);
        self.push(t, Op::LayerNorm { x, inv_std }, rg)
    }

    fn rowwise(&mut self, x: Var, f: fn(&[f64], &mut [f64]), op: Op) -> Var {
        let (r, c) = self.dims(x);
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            f(&src[i * c..(i + 1) * c], &mut out[i * c..(i + 1) * c]);
        }
        let t = Tensor::from_parts(self.shape(x).to_vec(), out);
        let rg = self.rg(&[x]);
        self.push(t, op, rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        self.rowwise(x, softmax_row, Op::Softmax(x))
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        self.rowwise(x, log_softmax_row, Op::LogSoftmax(x))
    }

    fn map(&mut self, x: Var, f: fn(f64) -> f64, op: Op) -> Var {
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        let t = Tensor::from_parts(self.shape(x).to_vec(), data);
        let rg = self.rg(&[x]);
        self.push(t, op, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        self.map(x, log_sigmoid, Op::LogSigmoid(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, gelu, Op::Gelu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, f64::tanh, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, f64::exp, Op::Exp(x))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat_cols"))?;
        let rows = self.dims(first).0;
        let mut total = 0;
        for &p in parts {
            if self.dims(p).0 != rows {
                return Err(self.mismatch("concat_cols", first, p));
            }
            total += self.dims(p).1;
        }
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for &p in parts {
            let c = self.dims(p).1;
            let src = self.value(p).data();
            for r in 0..rows {
                out[r * total + off..r * total + off + c].copy_from_slice(&src[r * c..(r + 1) * c]);
            }
            off += c;
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::from_parts(vec![rows, total], out),
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat_rows"))?;
        let cols = self.dims(first).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            if self.dims(p).1 != cols {
                return Err(self.mismatch("concat_rows", first, p));
            }
            out.extend_from_slice(self.value(p).data());
            rows += self.dims(p).0;
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::from_parts(vec![rows, cols], out),
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if len == 0 || start + len > c {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: self.shape(x).to_vec(),
                rhs: vec![start, len],
            });
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![r, len], out),
            Op::SliceCols { x, start },
            rg,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if len == 0 || start + len > r {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: self.shape(x).to_vec(),
                rhs: vec![start, len],
            });
        }
        let out = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![len, c], out),
            Op::SliceRows { x, start },
            rg,
        ))
    }

    /// Selects rows of `x` in the order given by `index`.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(x);
        if index.is_empty() || index.iter().any(|&i| i >= r) {
            return Err(Error::Shape {
                op: "gather_rows",
                lhs: self.shape(x).to_vec(),
                rhs: vec![index.len()],
            });
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![index.len(), c], out),
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Copy of `base` with row `index[j]` replaced by row `j` of `src`.
    /// Rows of `base` not named in `index` are copied bit-for-bit.
    pub fn scatter_rows(&mut self, base: Var, src: Var, index: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(base);
        let (sr, sc) = self.dims(src);
        if sc != c || sr != index.len() || index.iter().any(|&i| i >= r) {
            return Err(self.mismatch("scatter_rows", base, src));
        }
        let mut out = self.value(base).data().to_vec();
        let s = self.value(src).data();
        for (j, &i) in index.iter().enumerate() {
            out[i * c..(i + 1) * c].copy_from_slice(&s[j * c..(j + 1) * c]);
        }
        let t = Tensor::from_parts(self.shape(base).to_vec(), out);
        let rg = self.rg(&[base, src]);
        Ok(self.push(
            t,
            Op::ScatterRows {
                base,
                src,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Sums each row, producing `[rows, 1]`.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let src = self.value(x).data();
        let out = (0..r).map(|i| src[i * c..(i + 1) * c].iter().sum()).collect();
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(vec![r, 1], out), Op::RowSum(x), rg)
    }

    /// Per-channel convolution along the time (row) axis with zero "same"
    /// padding. `kernel` is `[width, channels]` with odd width.
    pub fn depthwise_conv(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (t, c) = self.dims(x);
        let (w, kc) = self.dims(kernel);
        if kc != c || w % 2 == 0 {
            return Err(self.mismatch("depthwise_conv", x, kernel));
        }
        let pad = w / 2;
        let xs = self.value(x).data();
        let ks = self.value(kernel).data();
        let mut out = vec![0.0; t * c];
        for i in 0..t {
            for j in 0..w {
                let src = i + j;
                if src < pad || src - pad >= t {
                    continue;
                }
                let s = src - pad;
                let (o, xr, kr) = (&mut out[i * c..(i + 1) * c], &xs[s * c..(s + 1) * c], &ks[j * c..(j + 1) * c]);
                for ch in 0..c {
                    o[ch] += kr[ch] * xr[ch];
                }
            }
        }
        let rg = self.rg(&[x, kernel]);
        Ok(self.push(
            Tensor::from_parts(self.shape(x).to_vec(), out),
            Op::DepthwiseConv { x, kernel },
            rg,
        ))
    }

    /// Scalar node whose value and input gradients were computed outside the
    /// graph (e.g. by a dedicated dynamic program).
    pub fn external(&mut self, value: f64, grads: Vec<(Var, Vec<f64>)>) -> Result<Var> {
        for (v, g) in &grads {
            if self.value(*v).len() != g.len() {
                return Err(Error::Shape {
                    op: "external",
                    lhs: self.shape(*v).to_vec(),
                    rhs: vec![g.len()],
                });
            }
        }
        let inputs: Vec<Var> = grads.iter().map(|(v, _)| *v).collect();
        let rg = self.rg(&inputs);
        Ok(self.push(Tensor::scalar(value), Op::External(grads), rg))
    }

    /// Reverse sweep from a scalar `root`. Leaf gradients accumulate across
    /// calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if !self.value(root).is_scalar() {
            return Err(Error::NonScalarRoot(self.shape(root).to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = Vec::with_capacity(root.0 + 1);
        adj.resize_with(root.0 + 1, || None);
        adj[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                self.nodes[i].value.accumulate_grad(&g);
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let needs = |v: &Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                if needs(a) {
                    // dA = dC · Bᵀ
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, (n as isize, 1), self.value(*b).data(), (1, n as isize), &mut da, 0.0);
                    add_into(&mut adj[a.0], &da);
                }
                if needs(b) {
                    // dB = Aᵀ · dC
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, self.value(*a).data(), (1, k as isize), g, (n as isize, 1), &mut db, 0.0);
                    add_into(&mut adj[b.0], &db);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).0;
                if needs(a) {
                    // dA = dC · B
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, (n as isize, 1), self.value(*b).data(), (k as isize, 1), &mut da, 0.0);
                    add_into(&mut adj[a.0], &da);
                }
                if needs(b) {
                    // dB = dCᵀ · A
                    let mut db = vec![0.0; n * k];
                    gemm(n, m, k, g, (1, n as isize), self.value(*a).data(), (k as isize, 1), &mut db, 0.0);
                    add_into(&mut adj[b.0], &db);
                }
            }
            Op::Add(a, b) => {
                if needs(a) {
                    add_into(&mut adj[a.0], g);
                }
                if needs(b) {
                    add_into(&mut adj[b.0], g);
                }
            }
            Op::Sub(a, b) => {
                if needs(a) {
                    add_into(&mut adj[a.0], g);
                }
                if needs(b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    add_into(&mut adj[b.0], &neg);
                }
            }
            Op::Mul(a, b) => {
                if needs(a) {
                    let d: Vec<f64> = g.iter().zip(self.value(*b).data()).map(|(x, y)| x * y).collect();
                    add_into(&mut adj[a.0], &d);
                }
                if needs(b) {
                    let d: Vec<f64> = g.iter().zip(self.value(*a).data()).map(|(x, y)| x * y).collect();
                    add_into(&mut adj[b.0], &d);
                }
            }
            Op::AddRow(a, b) => {
                if needs(a) {
                    add_into(&mut adj[a.0], g);
                }
                if needs(b) {
                    let c = self.dims(*a).1;
                    let mut db = vec![0.0; c];
                    for (k, v) in g.iter().enumerate() {
                        db[k % c] += v;
                    }
                    add_into(&mut adj[b.0], &db);
                }
            }
            Op::MulRow(a, b) => {
                let c = self.dims(*a).1;
                let bv = self.value(*b).data();
                if needs(a) {
                    let d: Vec<f64> = g.iter().enumerate().map(|(k, v)| v * bv[k % c]).collect();
                    add_into(&mut adj[a.0], &d);
                }
                if needs(b) {
                    let av = self.value(*a).data();
                    let mut db = vec![0.0; c];
                    for (k, v) in g.iter().enumerate() {
                        db[k % c] += v * av[k];
                    }
                    add_into(&mut adj[b.0], &db);
                }
            }
            Op::Scale(a, s) => {
                let d: Vec<f64> = g.iter().map(|v| v * s).collect();
                add_into(&mut adj[a.0], &d);
            }
            Op::LayerNorm { x, inv_std } => {
                let (r, c) = self.dims(*x);
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let gy = &g[i * c..(i + 1) * c];
                    let y = &out[i * c..(i + 1) * c];
                    let mg = gy.iter().sum::<f64>() / c as f64;
                    let mgy = gy.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        dx[i * c + j] = inv_std[i] * (gy[j] - mg - y[j] * mgy);
                    }
                }
                add_into(&mut adj[x.0], &dx);
            }
            Op::Softmax(x) => {
                let (r, c) = self.dims(*x);
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let s = &out[i * c..(i + 1) * c];
                    let gy = &g[i * c..(i + 1) * c];
                    let dot: f64 = s.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[i * c + j] = s[j] * (gy[j] - dot);
                    }
                }
                add_into(&mut adj[x.0], &dx);
            }
            Op::LogSoftmax(x) => {
                let (r, c) = self.dims(*x);
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let ly = &out[i * c..(i + 1) * c];
                    let gy = &g[i * c..(i + 1) * c];
                    let total: f64 = gy.iter().sum();
                    for j in 0..c {
                        dx[i * c + j] = gy[j] - ly[j].exp() * total;
                    }
                }
                add_into(&mut adj[x.0], &dx);
            }
            Op::Sigmoid(x) => {
                let d: Vec<f64> = g.iter().zip(out).map(|(gv, s)| gv * s * (1.0 - s)).collect();
                add_into(&mut adj[x.0], &d);
            }
            Op::LogSigmoid(x) => {
                let xs = self.value(*x).data();
                let d: Vec<f64> = g.iter().zip(xs).map(|(gv, &v)| gv * sigmoid(-v)).collect();
                add_into(&mut adj[x.0], &d);
            }
            Op::Gelu(x) => {
                let xs = self.value(*x).data();
                let d: Vec<f64> = g.iter().zip(xs).map(|(gv, &v)| gv * gelu_grad(v)).collect();
                add_into(&mut adj[x.0], &d);
            }
            Op::Tanh(x) => {
                let d: Vec<f64> = g.iter().zip(out).map(|(gv, y)| gv * (1.0 - y * y)).collect();
                add_into(&mut adj[x.0], &d);
            }
            Op::Exp(x) => {
                let d: Vec<f64> = g.iter().zip(out).map(|(gv, y)| gv * y).collect();
                add_into(&mut adj[x.0], &d);
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut off = 0;
                for p in parts {
                    let c = self.dims(*p).1;
                    if needs(p) {
                        let mut d = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            d.extend_from_slice(&g[r * total + off..r * total + off + c]);
                        }
                        add_into(&mut adj[p.0], &d);
                    }
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    if needs(p) {
                        add_into(&mut adj[p.0], &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::SliceCols { x, start } => {
                let (r, c) = self.dims(*x);
                let len = node.value.cols();
                let slot = adj[x.0].get_or_insert_with(|| vec![0.0; r * c]);
                for i in 0..r {
                    for j in 0..len {
                        slot[i * c + start + j] += g[i * len + j];
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let (r, c) = self.dims(*x);
                let slot = adj[x.0].get_or_insert_with(|| vec![0.0; r * c]);
                for (k, v) in g.iter().enumerate() {
                    slot[start * c + k] += v;
                }
            }
            Op::GatherRows { x, index } => {
                let (r, c) = self.dims(*x);
                let slot = adj[x.0].get_or_insert_with(|| vec![0.0; r * c]);
                for (j, &i) in index.iter().enumerate() {
                    for k in 0..c {
                        slot[i * c + k] += g[j * c + k];
                    }
                }
            }
            Op::ScatterRows { base, src, index } => {
                let c = node.value.cols();
                if needs(base) {
                    let mut d = g.to_vec();
                    for &i in index {
                        d[i * c..(i + 1) * c].iter_mut().for_each(|v| *v = 0.0);
                    }
                    add_into(&mut adj[base.0], &d);
                }
                if needs(src) {
                    let mut d = Vec::with_capacity(index.len() * c);
                    for &i in index {
                        d.extend_from_slice(&g[i * c..(i + 1) * c]);
                    }
                    add_into(&mut adj[src.0], &d);
                }
            }
            Op::Sum(x) => {
                let d = vec![g[0]; self.value(*x).len()];
                add_into(&mut adj[x.0], &d);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let d = vec![g[0] / n as f64; n];
                add_into(&mut adj[x.0], &d);
            }
            Op::RowSum(x) => {
                let (r, c) = self.dims(*x);
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    d[i * c..(i + 1) * c].iter_mut().for_each(|v| *v = g[i]);
                }
                add_into(&mut adj[x.0], &d);
            }
            Op::DepthwiseConv { x, kernel } => {
                let (t, c) = self.dims(*x);
                let w = self.dims(*kernel).0;
                let pad = w / 2;
                let xs = self.value(*x).data();
                let ks = self.value(*kernel).data();
                let mut dx = vec![0.0; t * c];
                let mut dk = vec![0.0; w * c];
                for i in 0..t {
                    for j in 0..w {
                        let src = i + j;
                        if src < pad || src - pad >= t {
                            continue;
                        }
                        let s = src - pad;
                        for ch in 0..c {
                            let gv = g[i * c + ch];
                            dx[s * c + ch] += gv * ks[j * c + ch];
                            dk[j * c + ch] += gv * xs[s * c + ch];
                        }
                    }
                }
                if needs(x) {
                    add_into(&mut adj[x.0], &dx);
                }
                if needs(kernel) {
                    add_into(&mut adj[kernel.0], &dk);
                }
            }
            Op::External(grads) => {
                for (v, d) in grads {
                    if needs(v) {
                        let scaled: Vec<f64> = d.iter().map(|x| x * g[0]).collect();
                        add_into(&mut adj[v.0], &scaled);
                    }
                }
            }
        }
    }
}
