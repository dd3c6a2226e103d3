//! Minimal reverse-mode differentiation over dense row-major matrices.
//!
//! A [`Record`] is an append-only list of primitive operations. Every node
//! keeps its forward value, so the backward pass is a single reverse sweep.
//! Leaf values can be swapped and the record replayed, which is what the
//! finite-difference oracle uses to re-evaluate the same computation.
//!
//! All tensors taking part in a record are rank-2 (`rows x cols`); a rank-1
//! tensor of length `n` is treated as `1 x n` and a scalar as `1 x 1`.
//! There is no implicit broadcasting: row and column broadcasts are explicit
//! operations ([`Record::add_row`], [`Record::mul_col`]).

use std::sync::Arc;

use thiserror::Error;

/// SELU scale.
pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
/// SELU negative-branch coefficient.
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("value count {count} does not match shape {shape:?}")]
    BadLength { shape: Vec<usize>, count: usize },
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },
    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("non-finite gradient produced by `{op}` at node {node}")]
    NonFiniteGradient { op: &'static str, node: usize },
    #[error("node {0} is not a leaf")]
    NotALeaf(usize),
    #[error("finite-difference step must be positive, got {0}")]
    BadStep(f64),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Dense 64-bit tensor in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Checked constructor: the value count must match the shape and every
    /// value must be finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let t = Self::from_parts(shape, data)?;
        if let Some(index) = t.data.iter().position(|v| !v.is_finite()) {
            return Err(AutodiffError::NonFinite { index });
        }
        Ok(t)
    }

    /// Constructor that only checks the value count.
    pub fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let count: usize = shape.iter().product();
        if count != data.len() {
            return Err(AutodiffError::BadLength {
                shape,
                count: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    /// `rows x cols` matrix. Panics if the value count is wrong.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix {rows}x{cols}");
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    /// `1 x n` row vector.
    pub fn row_vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::matrix(1, n, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The tensor viewed as a matrix.
    pub fn dims(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            n => (self.shape[..n - 1].iter().product(), self.shape[n - 1]),
        }
    }

    pub fn rows(&self) -> usize {
        self.dims().0
    }

    pub fn cols(&self) -> usize {
        self.dims().1
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = self.dims();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::matrix(c, r, out)
    }

    /// Stack equally long rows into a matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Tensor {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Tensor::matrix(rows.len(), cols, data)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node of a [`Record`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Offset(Var, f64),
    Selu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    ClampMin(Var, f64),
    SumRows(Var),
    Sum(Var),
    RowNorm(Var),
    Gather(Var, Arc<[usize]>),
    Concat(Var, Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddRow(..) => "add_row",
            Op::MulCol(..) => "mul_col",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Selu(..) => "selu",
            Op::Tanh(..) => "tanh",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::ClampMin(..) => "clamp_min",
            Op::SumRows(..) => "sum_rows",
            Op::Sum(..) => "sum",
            Op::RowNorm(..) => "row_norm",
            Op::Gather(..) => "gather",
            Op::Concat(..) => "concat",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Arc<Tensor>,
    differentiable: bool,
}

/// Recorded computation (a Wengert list).
#[derive(Debug, Clone, Default)]
pub struct Record {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to the record's nodes.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros when the output does not depend on it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape().to_vec()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().map(|&x| f(x)).collect(),
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

fn selu(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA * x
    } else {
        SELU_LAMBDA * SELU_ALPHA * x.exp_m1()
    }
}

fn selu_grad(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA
    } else {
        SELU_LAMBDA * SELU_ALPHA * x.exp()
    }
}

/// `C[m,n] = A[m,k] B[k,n]` with arbitrary strides for `A` and `B`; `C` is
/// row-major and overwritten.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], rsa: usize, csa: usize, b: &[f64], rsb: usize, csb: usize, c: &mut [f64]) {
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.fill(0.0);
        return;
    }
    // SAFETY: the strides describe `m x k` and `k x n` views that lie inside
    // `a` and `b`, and `c` holds exactly `m * n` values.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `a[r,n] x b[n,c]`.
fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (r, n) = a.dims();
    let c = b.cols();
    let mut out = vec![0.0; r * c];
    gemm(r, n, c, &a.data, n, 1, &b.data, c, 1, &mut out);
    Tensor::matrix(r, c, out)
}

/// `g[r,c] x b[n,c]^T`.
fn matmul_bt(g: &Tensor, b: &Tensor) -> Tensor {
    let (r, c) = g.dims();
    let n = b.rows();
    let mut out = vec![0.0; r * n];
    gemm(r, c, n, &g.data, c, 1, &b.data, 1, c, &mut out);
    Tensor::matrix(r, n, out)
}

/// `a[r,n]^T x g[r,c]`.
fn matmul_at(a: &Tensor, g: &Tensor) -> Tensor {
    let (r, n) = a.dims();
    let c = g.cols();
    let mut out = vec![0.0; n * c];
    gemm(n, r, c, &a.data, 1, n, &g.data, c, 1, &mut out);
    Tensor::matrix(n, c, out)
}

fn same_dims(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(mismatch(op, a, b));
    }
    Ok(())
}

impl Record {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.leaf_shared(Arc::new(value))
    }

    pub fn leaf_shared(&mut self, value: Arc<Tensor>) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Input excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.constant_shared(Arc::new(value))
    }

    pub fn constant_shared(&mut self, value: Arc<Tensor>) -> Var {
        self.push(Op::Constant, value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_differentiable(&self, v: Var) -> bool {
        self.nodes[v.0].differentiable
    }

    fn push(&mut self, op: Op, value: Arc<Tensor>, differentiable: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            differentiable,
        });
        Var(self.nodes.len() - 1)
    }

    fn apply(&mut self, op: Op) -> Result<Var> {
        let value = self.compute(&op)?;
        let differentiable = self.inputs(&op).iter().any(|v| self.nodes[v.0].differentiable);
        Ok(self.push(op, Arc::new(value), differentiable))
    }

    fn inputs(&self, op: &Op) -> Vec<Var> {
        match *op {
            Op::Leaf | Op::Constant => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::AddRow(a, b)
            | Op::MulCol(a, b)
            | Op::Concat(a, b) => vec![a, b],
            Op::Scale(a, _)
            | Op::Offset(a, _)
            | Op::Selu(a)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::ClampMin(a, _)
            | Op::SumRows(a)
            | Op::Sum(a)
            | Op::RowNorm(a)
            | Op::Gather(a, _) => vec![a],
        }
    }

    /// Forward evaluation of one operation. Shared by recording and replay so
    /// both produce bit-identical values.
    fn compute(&self, op: &Op) -> Result<Tensor> {
        let v = |x: &Var| -> &Tensor { &self.nodes[x.0].value };
        Ok(match op {
            Op::Leaf | Op::Constant => unreachable!("inputs are not computed"),
            Op::MatMul(a, b) => {
                let (a, b) = (v(a), v(b));
                if a.cols() != b.rows() {
                    return Err(mismatch("matmul", a, b));
                }
                matmul(a, b)
            }
            Op::Add(a, b) => {
                same_dims("add", v(a), v(b))?;
                zip(v(a), v(b), |x, y| x + y)
            }
            Op::Sub(a, b) => {
                same_dims("sub", v(a), v(b))?;
                zip(v(a), v(b), |x, y| x - y)
            }
            Op::Mul(a, b) => {
                same_dims("mul", v(a), v(b))?;
                zip(v(a), v(b), |x, y| x * y)
            }
            Op::Div(a, b) => {
                same_dims("div", v(a), v(b))?;
                zip(v(a), v(b), |x, y| x / y)
            }
            Op::AddRow(a, b) => {
                let (a, b) = (v(a), v(b));
                if b.rows() != 1 || b.cols() != a.cols() {
                    return Err(mismatch("add_row", a, b));
                }
                let c = a.cols();
                let mut out = a.clone();
                for row in out.data.chunks_mut(c.max(1)) {
                    for (o, &bv) in row.iter_mut().zip(&b.data) {
                        *o += bv;
                    }
                }
                out
            }
            Op::MulCol(a, b) => {
                let (a, b) = (v(a), v(b));
                if b.cols() != 1 || b.rows() != a.rows() {
                    return Err(mismatch("mul_col", a, b));
                }
                let c = a.cols();
                let mut out = a.clone();
                if c > 0 {
                    for (row, &s) in out.data.chunks_mut(c).zip(&b.data) {
                        row.iter_mut().for_each(|o| *o *= s);
                    }
                }
                out
            }
            Op::Scale(a, s) => map(v(a), |x| x * s),
            Op::Offset(a, s) => map(v(a), |x| x + s),
            Op::Selu(a) => map(v(a), selu),
            Op::Tanh(a) => map(v(a), f64::tanh),
            Op::Exp(a) => map(v(a), f64::exp),
            Op::Log(a) => map(v(a), f64::ln),
            Op::ClampMin(a, lo) => map(v(a), |x| x.max(*lo)),
            Op::SumRows(a) => {
                let a = v(a);
                let (r, c) = a.dims();
                let data = (0..r)
                    .map(|i| a.data[i * c..(i + 1) * c].iter().sum())
                    .collect();
                Tensor::matrix(r, 1, data)
            }
            Op::Sum(a) => Tensor::scalar(v(a).data.iter().sum()),
            Op::RowNorm(a) => {
                let a = v(a);
                let (r, c) = a.dims();
                let data = (0..r)
                    .map(|i| {
                        a.data[i * c..(i + 1) * c]
                            .iter()
                            .map(|x| x * x)
                            .sum::<f64>()
                            .sqrt()
                    })
                    .collect();
                Tensor::matrix(r, 1, data)
            }
            Op::Gather(a, idx) => {
                let a = v(a);
                let (r, c) = a.dims();
                if let Some(&bad) = idx.iter().find(|&&j| j >= c) {
                    return Err(AutodiffError::ShapeMismatch {
                        op: "gather",
                        left: a.shape().to_vec(),
                        right: vec![bad],
                    });
                }
                let mut data = Vec::with_capacity(r * idx.len());
                for i in 0..r {
                    let row = &a.data[i * c..(i + 1) * c];
                    data.extend(idx.iter().map(|&j| row[j]));
                }
                Tensor::matrix(r, idx.len(), data)
            }
            Op::Concat(a, b) => {
                let (a, b) = (v(a), v(b));
                if a.rows() != b.rows() {
                    return Err(mismatch("concat", a, b));
                }
                let (r, ca) = a.dims();
                let cb = b.cols();
                let mut data = Vec::with_capacity(r * (ca + cb));
                for i in 0..r {
                    data.extend_from_slice(&a.data[i * ca..(i + 1) * ca]);
                    data.extend_from_slice(&b.data[i * cb..(i + 1) * cb]);
                }
                Tensor::matrix(r, ca + cb, data)
            }
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul(a, b))
    }

    /// Elementwise quotient.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Div(a, b))
    }

    /// `a[r,c] + b[1,c]` added to every row.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::AddRow(a, b))
    }

    /// `a[r,c] * b[r,1]`: each row of `a` scaled by the matching entry of `b`.
    pub fn mul_col(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MulCol(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.apply(Op::Scale(a, s))
    }

    pub fn offset(&mut self, a: Var, s: f64) -> Result<Var> {
        self.apply(Op::Offset(a, s))
    }

    pub fn selu(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Selu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Log(a))
    }

    /// `max(a, lo)`; gradient flows only where `a > lo`.
    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Result<Var> {
        self.apply(Op::ClampMin(a, lo))
    }

    /// Per-row sum, `[r,c] -> [r,1]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::SumRows(a))
    }

    /// Sum of all entries, `-> [1,1]`.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sum(a))
    }

    /// Per-row Euclidean norm, `[r,c] -> [r,1]`.
    pub fn row_norm(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::RowNorm(a))
    }

    /// Select columns by index.
    pub fn gather(&mut self, a: Var, cols: Arc<[usize]>) -> Result<Var> {
        self.apply(Op::Gather(a, cols))
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Concat(a, b))
    }

    /// Replace the value of an input node. Call [`Record::replay`] afterwards.
    pub fn set_input(&mut self, v: Var, value: Tensor) -> Result<()> {
        let node = &mut self.nodes[v.0];
        if !matches!(node.op, Op::Leaf | Op::Constant) {
            return Err(AutodiffError::NotALeaf(v.0));
        }
        if node.value.shape() != value.shape() {
            return Err(mismatch("set_input", &node.value, &value));
        }
        node.value = Arc::new(value);
        Ok(())
    }

    /// Recompute every derived node from the current inputs.
    pub fn replay(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf | Op::Constant) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let value = self.compute(&op)?;
            self.nodes[i].value = Arc::new(value);
        }
        Ok(())
    }

    /// Reverse sweep from a scalar output. Returns gradients for every
    /// differentiable node the output depends on.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = &self.nodes[output.0].value;
        if out.len() != 1 {
            return Err(AutodiffError::NonScalarOutput(out.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::filled(out.shape().to_vec(), 1.0));

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.differentiable {
                continue;
            }
            let name = node.op.name();
            let contributions = self.local_backward(&node.op, &node.value, &g);
            for (input, contribution) in contributions {
                if !self.nodes[input.0].differentiable {
                    continue;
                }
                if !contribution.is_finite() {
                    return Err(AutodiffError::NonFiniteGradient { op: name, node: i });
                }
                match &mut grads[input.0] {
                    Some(acc) => acc
                        .data
                        .iter_mut()
                        .zip(&contribution.data)
                        .for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contribution),
                }
            }
            // keep leaf gradients, drop intermediates
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn local_backward(&self, op: &Op, out: &Tensor, g: &Tensor) -> Vec<(Var, Tensor)> {
        let v = |x: &Var| -> &Tensor { &self.nodes[x.0].value };
        let wants = |x: &Var| self.nodes[x.0].differentiable;
        match op {
            Op::Leaf | Op::Constant => vec![],
            Op::MatMul(a, b) => {
                let mut res = Vec::new();
                if wants(a) {
                    res.push((*a, matmul_bt(g, v(b))));
                }
                if wants(b) {
                    res.push((*b, matmul_at(v(a), g)));
                }
                res
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, map(g, |x| -x))],
            Op::Mul(a, b) => vec![
                (*a, zip(g, v(b), |gv, bv| gv * bv)),
                (*b, zip(g, v(a), |gv, av| gv * av)),
            ],
            Op::Div(a, b) => {
                let (av, bv) = (v(a), v(b));
                let da = zip(g, bv, |gv, y| gv / y);
                let mut db = g.clone();
                for ((d, &x), &y) in db.data.iter_mut().zip(&av.data).zip(&bv.data) {
                    *d *= -x / (y * y);
                }
                vec![(*a, da), (*b, db)]
            }
            Op::AddRow(a, b) => {
                let c = g.cols();
                let mut db = vec![0.0; c];
                if c > 0 {
                    for row in g.data.chunks(c) {
                        db.iter_mut().zip(row).for_each(|(d, &x)| *d += x);
                    }
                }
                vec![(*a, g.clone()), (*b, Tensor::matrix(1, c, db))]
            }
            Op::MulCol(a, b) => {
                let (av, bv) = (v(a), v(b));
                let c = av.cols();
                let mut da = g.clone();
                let mut db = vec![0.0; av.rows()];
                if c > 0 {
                    for (i, row) in da.data.chunks_mut(c).enumerate() {
                        let s = bv.data[i];
                        let a_row = &av.data[i * c..(i + 1) * c];
                        db[i] = row.iter().zip(a_row).map(|(gv, x)| gv * x).sum();
                        row.iter_mut().for_each(|d| *d *= s);
                    }
                }
                vec![(*a, da), (*b, Tensor::matrix(av.rows(), 1, db))]
            }
            Op::Scale(a, s) => vec![(*a, map(g, |x| x * s))],
            Op::Offset(a, _) => vec![(*a, g.clone())],
            Op::Selu(a) => vec![(*a, zip(g, v(a), |gv, x| gv * selu_grad(x)))],
            Op::Tanh(a) => vec![(*a, zip(g, out, |gv, y| gv * (1.0 - y * y)))],
            Op::Exp(a) => vec![(*a, zip(g, out, |gv, y| gv * y))],
            Op::Log(a) => vec![(*a, zip(g, v(a), |gv, x| gv / x))],
            Op::ClampMin(a, lo) => vec![(
                *a,
                zip(g, v(a), |gv, x| if x > *lo { gv } else { 0.0 }),
            )],
            Op::SumRows(a) => {
                let (r, c) = v(a).dims();
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    da[i * c..(i + 1) * c].fill(g.data[i]);
                }
                vec![(*a, Tensor::from_parts(v(a).shape().to_vec(), da).unwrap())]
            }
            Op::Sum(a) => vec![(*a, Tensor::filled(v(a).shape().to_vec(), g.data[0]))],
            Op::RowNorm(a) => {
                let av = v(a);
                let c = av.cols();
                let mut da = av.clone();
                if c > 0 {
                    for (i, row) in da.data.chunks_mut(c).enumerate() {
                        let n = out.data[i];
                        // subgradient 0 at the origin
                        let f = if n > 0.0 { g.data[i] / n } else { 0.0 };
                        row.iter_mut().for_each(|x| *x *= f);
                    }
                }
                vec![(*a, da)]
            }
            Op::Gather(a, idx) => {
                let (r, c) = v(a).dims();
                let k = idx.len();
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for (j, &col) in idx.iter().enumerate() {
                        da[i * c + col] += g.data[i * k + j];
                    }
                }
                vec![(*a, Tensor::from_parts(v(a).shape().to_vec(), da).unwrap())]
            }
            Op::Concat(a, b) => {
                let (r, ca) = v(a).dims();
                let cb = v(b).cols();
                let mut da = Vec::with_capacity(r * ca);
                let mut db = Vec::with_capacity(r * cb);
                for row in g.data.chunks(ca + cb) {
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                vec![
                    (*a, Tensor::from_parts(v(a).shape().to_vec(), da).unwrap()),
                    (*b, Tensor::from_parts(v(b).shape().to_vec(), db).unwrap()),
                ]
            }
        }
    }
}

/// Forward value of a scalar output together with its gradients.
pub fn evaluate_with_gradient(record: &Record, output: Var) -> Result<(f64, Gradients)> {
    let grads = record.backward(output)?;
    Ok((record.value(output).item(), grads))
}

/// Central-difference gradient of a scalar output with respect to one input,
/// obtained by perturbing the input and replaying a copy of the record.
pub fn finite_difference_gradient(
    record: &Record,
    output: Var,
    input: Var,
    step: f64,
) -> Result<Tensor> {
    if !(step > 0.0) {
        return Err(AutodiffError::BadStep(step));
    }
    if record.value(output).len() != 1 {
        return Err(AutodiffError::NonScalarOutput(
            record.value(output).shape().to_vec(),
        ));
    }
    let mut work = record.clone();
    let base = record.value(input).clone();
    let mut grad = Tensor::zeros(base.shape().to_vec());
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus.data[i] += step;
        work.set_input(input, plus)?;
        work.replay()?;
        let f_plus = work.value(output).item();

        let mut minus = base.clone();
        minus.data[i] -= step;
        work.set_input(input, minus)?;
        work.replay()?;
        let f_minus = work.value(output).item();

        grad.data[i] = (f_plus - f_minus) / (2.0 * step);
    }
    Ok(grad)
}

/// Adam hyperparameters other than the learning rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn reset(&mut self) {
        self.m.fill(0.0);
        self.v.fill(0.0);
        self.t = 0;
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(AutodiffError::ShapeMismatch {
            op: "adam_step",
            left: vec![params.len()],
            right: vec![grads.len(), state.m.len()],
        });
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}
