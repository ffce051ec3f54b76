//! Minimal tape-based reverse-mode differentiation over 1-D and 2-D `f64` arrays.
//!
//! A [`Tape`] records primitive operations in execution order. Leaves are either
//! constants or parameters; [`Tape::backward`] walks the record in reverse and
//! returns a [`Gradients`] table holding one adjoint per parameter leaf.
//!
//! ```
//! use segpref_core::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::vector(vec![3.0]));
//! let y = tape.square(x).unwrap();
//! let root = tape.sum(y).unwrap();
//! let grads = tape.backward(root).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
//! ```
//!
//! A tape can be differentiated once. A second `backward` call is rejected with
//! [`AutodiffError::AlreadyDifferentiated`].

use std::borrow::Cow;
use std::fmt;

use thiserror::Error;

use crate::linalg::{gemm_nn, gemm_nt, gemm_tn, sigmoid};

/// Floor applied to the argument of [`Primitive::Log`].
pub const LOG_FLOOR: f64 = 1e-300;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {lhs} and {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },
    #[error("{op}: expected {expected} input(s), got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{op}: non-finite value at element {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("backward root must be a scalar, got shape {0}")]
    NonScalarRoot(Shape),
    #[error("tape has already been differentiated")]
    AlreadyDifferentiated,
    #[error("variable {0} does not belong to this tape")]
    UnknownVar(usize),
    #[error("tensor data length {len} does not match shape {shape}")]
    BadTensor { len: usize, shape: Shape },
    #[error("gradient check: non-finite value at coordinate {index}")]
    GradCheckNonFinite { index: usize },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Shape of a 1-D or 2-D tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Vector(usize),
    Matrix(usize, usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Vector(n) => n,
            Shape::Matrix(r, c) => r * c,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> Vec<usize> {
        match *self {
            Shape::Vector(n) => vec![n],
            Shape::Matrix(r, c) => vec![r, c],
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shape::Vector(n) => write!(f, "[{n}]"),
            Shape::Matrix(r, c) => write!(f, "[{r}, {c}]"),
        }
    }
}

/// Row-major array of `f64` with a 1-D or 2-D shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    data: Vec<f64>,
    shape: Shape,
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: Shape) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(AutodiffError::BadTensor {
                len: data.len(),
                shape,
            });
        }
        Ok(Self { data, shape })
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Self {
            data,
            shape: Shape::Vector(n),
        }
    }

    /// Panics if `data.len() != rows * cols`.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self {
            data,
            shape: Shape::Matrix(rows, cols),
        }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self {
            data: vec![0.0; shape.len()],
            shape,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self::vector(vec![v])
    }

    pub fn shape(&self) -> Shape {
        self.shape
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        match self.shape {
            Shape::Vector(_) => 1,
            Shape::Matrix(r, _) => r,
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape {
            Shape::Vector(n) => n,
            Shape::Matrix(_, c) => c,
        }
    }

    fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The supported primitive operations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive {
    /// `a[m×k] · b[k×n]`
    MatMul,
    /// `a[m×k] · b[n×k]ᵀ`; the transposed right operand is how linear layers
    /// apply their `out×in` weights.
    MatMulT,
    /// Elementwise sum; a 1-D right operand of length `n` is added to every row
    /// of an `m×n` left operand.
    Add,
    /// Elementwise product of equal shapes.
    Mul,
    Silu,
    Sin,
    /// Column-wise concatenation of matrices with equal row counts, or plain
    /// concatenation of vectors.
    Concat,
    Sum,
    Mean,
    Square,
    Scale(f64),
    Sigmoid,
    /// Natural log with the argument clamped at [`LOG_FLOOR`].
    Log,
}

impl Primitive {
    fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::MatMulT => "matmul_t",
            Primitive::Add => "add",
            Primitive::Mul => "mul",
            Primitive::Silu => "silu",
            Primitive::Sin => "sin",
            Primitive::Concat => "concat",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::Square => "square",
            Primitive::Scale(_) => "scale",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Log => "log",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LeafKind {
    Constant,
    Parameter,
}

#[derive(Debug)]
enum Origin {
    Leaf,
    Op(Primitive, Vec<Var>),
}

#[derive(Debug)]
struct Node<'a> {
    value: Cow<'a, Tensor>,
    origin: Origin,
    requires_grad: bool,
}

/// Ordered record of operations. Inputs always precede the nodes that use them.
///
/// Leaves may borrow their values (`'a`), so weights can be placed on many
/// short-lived tapes without copying.
#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    differentiated: bool,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Adjoint of a node that depends on a parameter; `None` for constants.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.adjoints.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.adjoints.get_mut(var.0).and_then(Option::take)
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf that does not receive a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(Cow::Owned(value), LeafKind::Constant)
    }

    /// Borrowed constant leaf.
    pub fn constant_ref(&mut self, value: &'a Tensor) -> Var {
        self.push_leaf(Cow::Borrowed(value), LeafKind::Constant)
    }

    /// Records a leaf whose adjoint is reported by `backward`.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(Cow::Owned(value), LeafKind::Parameter)
    }

    /// Borrowed parameter leaf.
    pub fn param_ref(&mut self, value: &'a Tensor) -> Var {
        self.push_leaf(Cow::Borrowed(value), LeafKind::Parameter)
    }

    fn push_leaf(&mut self, value: Cow<'a, Tensor>, kind: LeafKind) -> Var {
        self.nodes.push(Node {
            value,
            origin: Origin::Leaf,
            requires_grad: kind == LeafKind::Parameter,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn node(&self, var: Var) -> Result<&Node<'a>> {
        self.nodes.get(var.0).ok_or(AutodiffError::UnknownVar(var.0))
    }

    /// Applies `op` to `inputs`, records the result and returns its handle.
    pub fn forward(&mut self, op: Primitive, inputs: &[Var]) -> Result<Var> {
        for v in inputs {
            self.node(*v)?;
        }
        let value = self.evaluate(op, inputs)?;
        if let Some(index) = value.first_non_finite() {
            return Err(AutodiffError::NonFinite {
                op: op.name(),
                index,
            });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            origin: Origin::Op(op, inputs.to_vec()),
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward(Primitive::MatMul, &[a, b])
    }
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward(Primitive::MatMulT, &[a, b])
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward(Primitive::Add, &[a, b])
    }
    /// `a - b`, recorded as `a + (-1)·b`.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let neg = self.scale(b, -1.0)?;
        self.add(a, neg)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward(Primitive::Mul, &[a, b])
    }
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.forward(Primitive::Silu, &[a])
    }
    pub fn sin(&mut self, a: Var) -> Result<Var> {
        self.forward(Primitive::Sin, &[a])
    }
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.forward(Primitive::Concat, parts)
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.forward(Primitive::Sum, &[a])
    }
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.forward(Primitive::Mean, &[a])
    }
    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.forward(Primitive::Square, &[a])
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.forward(Primitive::Scale(c), &[a])
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.forward(Primitive::Sigmoid, &[a])
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.forward(Primitive::Log, &[a])
    }

    fn arity(op: Primitive, inputs: &[Var], expected: usize) -> Result<()> {
        if inputs.len() != expected {
            return Err(AutodiffError::Arity {
                op: op.name(),
                expected,
                got: inputs.len(),
            });
        }
        Ok(())
    }

    fn evaluate(&self, op: Primitive, inputs: &[Var]) -> Result<Tensor> {
        let unary = |f: &dyn Fn(f64) -> f64| -> Result<Tensor> {
            Self::arity(op, inputs, 1)?;
            let x = &self.nodes[inputs[0].0].value;
            Ok(Tensor {
                data: x.data.iter().map(|&v| f(v)).collect(),
                shape: x.shape,
            })
        };
        match op {
            Primitive::MatMul | Primitive::MatMulT => {
                Self::arity(op, inputs, 2)?;
                let a = &self.nodes[inputs[0].0].value;
                let b = &self.nodes[inputs[1].0].value;
                let (Shape::Matrix(m, k), Shape::Matrix(r, c)) = (a.shape, b.shape) else {
                    return Err(AutodiffError::ShapeMismatch {
                        op: op.name(),
                        lhs: a.shape,
                        rhs: b.shape,
                    });
                };
                let transposed = op == Primitive::MatMulT;
                let (inner, n) = if transposed { (c, r) } else { (r, c) };
                if inner != k {
                    return Err(AutodiffError::ShapeMismatch {
                        op: op.name(),
                        lhs: a.shape,
                        rhs: b.shape,
                    });
                }
                let mut out = vec![0.0; m * n];
                if transposed {
                    gemm_nt(&a.data, &b.data, &mut out, m, k, n);
                } else {
                    gemm_nn(&a.data, &b.data, &mut out, m, k, n);
                }
                Ok(Tensor::matrix(m, n, out))
            }
            Primitive::Add => {
                Self::arity(op, inputs, 2)?;
                let a = &self.nodes[inputs[0].0].value;
                let b = &self.nodes[inputs[1].0].value;
                if a.shape == b.shape {
                    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
                    return Ok(Tensor {
                        data,
                        shape: a.shape,
                    });
                }
                match (a.shape, b.shape) {
                    (Shape::Matrix(_, c), Shape::Vector(n)) if c == n => {
                        let mut data = a.data.clone();
                        for row in data.chunks_mut(c) {
                            for (x, y) in row.iter_mut().zip(&b.data) {
                                *x += y;
                            }
                        }
                        Ok(Tensor {
                            data,
                            shape: a.shape,
                        })
                    }
                    _ => Err(AutodiffError::ShapeMismatch {
                        op: op.name(),
                        lhs: a.shape,
                        rhs: b.shape,
                    }),
                }
            }
            Primitive::Mul => {
                Self::arity(op, inputs, 2)?;
                let a = &self.nodes[inputs[0].0].value;
                let b = &self.nodes[inputs[1].0].value;
                if a.shape != b.shape {
                    return Err(AutodiffError::ShapeMismatch {
                        op: op.name(),
                        lhs: a.shape,
                        rhs: b.shape,
                    });
                }
                let data = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
                Ok(Tensor {
                    data,
                    shape: a.shape,
                })
            }
            Primitive::Concat => self.eval_concat(inputs),
            Primitive::Sum | Primitive::Mean => {
                Self::arity(op, inputs, 1)?;
                let x = &self.nodes[inputs[0].0].value;
                let s: f64 = x.data.iter().sum();
                let v = if op == Primitive::Mean {
                    s / x.len() as f64
                } else {
                    s
                };
                Ok(Tensor::scalar(v))
            }
            Primitive::Silu => unary(&crate::linalg::silu),
            Primitive::Sin => unary(&f64::sin),
            Primitive::Square => unary(&|v| v * v),
            Primitive::Scale(c) => unary(&|v| c * v),
            Primitive::Sigmoid => unary(&sigmoid),
            Primitive::Log => unary(&|v| v.max(LOG_FLOOR).ln()),
        }
    }

    fn eval_concat(&self, inputs: &[Var]) -> Result<Tensor> {
        let op = Primitive::Concat;
        if inputs.is_empty() {
            return Err(AutodiffError::Arity {
                op: op.name(),
                expected: 1,
                got: 0,
            });
        }
        let first = self.nodes[inputs[0].0].value.shape;
        match first {
            Shape::Vector(_) => {
                let mut data = Vec::new();
                for v in inputs {
                    let t = &self.nodes[v.0].value;
                    if !matches!(t.shape, Shape::Vector(_)) {
                        return Err(AutodiffError::ShapeMismatch {
                            op: op.name(),
                            lhs: first,
                            rhs: t.shape,
                        });
                    }
                    data.extend_from_slice(&t.data);
                }
                Ok(Tensor::vector(data))
            }
            Shape::Matrix(rows, _) => {
                let mut total = 0;
                for v in inputs {
                    let t = &self.nodes[v.0].value;
                    match t.shape {
                        Shape::Matrix(r, c) if r == rows => total += c,
                        other => {
                            return Err(AutodiffError::ShapeMismatch {
                                op: op.name(),
                                lhs: first,
                                rhs: other,
                            })
                        }
                    }
                }
                let mut data = Vec::with_capacity(rows * total);
                for r in 0..rows {
                    for v in inputs {
                        let t = &self.nodes[v.0].value;
                        let c = t.cols();
                        data.extend_from_slice(&t.data[r * c..(r + 1) * c]);
                    }
                }
                Ok(Tensor::matrix(rows, total, data))
            }
        }
    }

    /// Propagates adjoints from the scalar `root` to every parameter leaf.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        if self.differentiated {
            return Err(AutodiffError::AlreadyDifferentiated);
        }
        let root_shape = self.node(root)?.value.shape;
        if root_shape.len() != 1 {
            return Err(AutodiffError::NonScalarRoot(root_shape));
        }
        self.differentiated = true;

        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[root.0].requires_grad {
            adj[root.0] = Some(vec![1.0]);
        }

        for idx in (0..=root.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Origin::Op(op, inputs) = &node.origin {
                self.propagate(*op, inputs, &node.value, &g, &mut adj);
            }
            adj[idx] = Some(g);
        }

        let adjoints = self
            .nodes
            .iter()
            .zip(adj)
            .map(|(node, a)| {
                if !node.requires_grad {
                    return None;
                }
                let data = a.unwrap_or_else(|| vec![0.0; node.value.len()]);
                Some(Tensor {
                    data,
                    shape: node.value.shape,
                })
            })
            .collect();
        Ok(Gradients { adjoints })
    }

    fn propagate(
        &self,
        op: Primitive,
        inputs: &[Var],
        out: &Tensor,
        g: &[f64],
        adj: &mut [Option<Vec<f64>>],
    ) {
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        match op {
            Primitive::MatMul | Primitive::MatMulT => {
                let (a, b) = (inputs[0], inputs[1]);
                let (av, bv) = (val(a), val(b));
                let (m, k) = (av.rows(), av.cols());
                let n = out.cols();
                if wants(a) {
                    let acc = slot(adj, a, m * k);
                    if op == Primitive::MatMul {
                        // dA = G · Bᵀ, B is k×n
                        gemm_nt(g, &bv.data, acc, m, n, k);
                    } else {
                        // dA = G · B, B is n×k
                        gemm_nn(g, &bv.data, acc, m, n, k);
                    }
                }
                if wants(b) {
                    if op == Primitive::MatMul {
                        // dB = Aᵀ · G
                        let acc = slot(adj, b, k * n);
                        gemm_tn(&av.data, g, acc, m, k, n);
                    } else {
                        // dB = Gᵀ · A
                        let acc = slot(adj, b, n * k);
                        gemm_tn(g, &av.data, acc, m, n, k);
                    }
                }
            }
            Primitive::Add => {
                let (a, b) = (inputs[0], inputs[1]);
                if wants(a) {
                    axpy(slot(adj, a, g.len()), g, 1.0);
                }
                if wants(b) {
                    let bl = val(b).len();
                    let acc = slot(adj, b, bl);
                    if bl == g.len() {
                        axpy(acc, g, 1.0);
                    } else {
                        for row in g.chunks(bl) {
                            axpy(acc, row, 1.0);
                        }
                    }
                }
            }
            Primitive::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                if wants(a) {
                    let bv = &val(b).data;
                    let acc = slot(adj, a, g.len());
                    for i in 0..g.len() {
                        acc[i] += g[i] * bv[i];
                    }
                }
                if wants(b) {
                    let av = &val(a).data;
                    let acc = slot(adj, b, g.len());
                    for i in 0..g.len() {
                        acc[i] += g[i] * av[i];
                    }
                }
            }
            Primitive::Concat => {
                let rows = out.rows();
                let total = out.cols();
                let mut offset = 0;
                for &v in inputs {
                    let c = val(v).cols();
                    if wants(v) {
                        let acc = slot(adj, v, rows * c);
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + c];
                            axpy(&mut acc[r * c..(r + 1) * c], src, 1.0);
                        }
                    }
                    offset += c;
                }
            }
            Primitive::Sum | Primitive::Mean => {
                let a = inputs[0];
                if wants(a) {
                    let n = val(a).len();
                    let d = if op == Primitive::Mean {
                        g[0] / n as f64
                    } else {
                        g[0]
                    };
                    for x in slot(adj, a, n).iter_mut() {
                        *x += d;
                    }
                }
            }
            Primitive::Silu
            | Primitive::Sin
            | Primitive::Square
            | Primitive::Scale(_)
            | Primitive::Sigmoid
            | Primitive::Log => {
                let a = inputs[0];
                if !wants(a) {
                    return;
                }
                let x = &val(a).data;
                let y = &out.data;
                let acc = slot(adj, a, g.len());
                for i in 0..g.len() {
                    let d = match op {
                        Primitive::Silu => {
                            let s = sigmoid(x[i]);
                            s * (1.0 + x[i] * (1.0 - s))
                        }
                        Primitive::Sin => x[i].cos(),
                        Primitive::Square => 2.0 * x[i],
                        Primitive::Scale(c) => c,
                        Primitive::Sigmoid => y[i] * (1.0 - y[i]),
                        Primitive::Log => {
                            if x[i] > LOG_FLOOR {
                                1.0 / x[i]
                            } else {
                                0.0
                            }
                        }
                        _ => unreachable!(),
                    };
                    acc[i] += g[i] * d;
                }
            }
        }
    }
}

fn slot(adj: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    adj[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn axpy(acc: &mut [f64], x: &[f64], a: f64) {
    for (o, v) in acc.iter_mut().zip(x) {
        *o += a * v;
    }
}

/// Compares an analytic gradient against central differences of `value` on the
/// listed coordinates. Returns the largest relative error
/// `|analytic − numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn check_gradient<F>(
    value: F,
    analytic: &[f64],
    point: &[f64],
    coords: &[usize],
    h: f64,
) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut probe = point.to_vec();
    let mut worst = 0.0f64;
    for &i in coords {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = value(&probe)?;
        probe[i] = orig - h;
        let minus = value(&probe)?;
        probe[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        if !numeric.is_finite() || !analytic[i].is_finite() {
            return Err(AutodiffError::GradCheckNonFinite { index: i });
        }
        let err = (analytic[i] - numeric).abs() / (analytic[i].abs() + numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Gradient check of a scalar function built on a tape. `f` receives the tape
/// and the parameter leaf holding `point`, and returns the scalar root.
pub fn grad_check<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&mut Tape<'t>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.param(point.clone());
    let root = f(&mut tape, x)?;
    let grads = tape.backward(root)?;
    let analytic = grads
        .get(x)
        .map(|t| t.data().to_vec())
        .unwrap_or_else(|| vec![0.0; point.len()]);
    let value = |p: &[f64]| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.param(Tensor {
            data: p.to_vec(),
            shape: point.shape,
        });
        let root = f(&mut tape, x)?;
        Ok(tape.value(root).item())
    };
    let coords: Vec<usize> = (0..point.len()).collect();
    check_gradient(value, &analytic, point.data(), &coords, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor {
        let data = (0..shape.len()).map(|_| rng.random_range(-1.5..1.5)).collect();
        Tensor::new(data, shape).unwrap()
    }

    #[test]
    fn silu_of_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(0.0));
        let y = tape.silu(x).unwrap();
        assert_eq!(tape.value(y).item(), 0.0);
    }

    #[test]
    fn identity_matmul_is_noop() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(Tensor::matrix(2, 2, vec![3.0, 4.0, 5.0, 6.0]));
        let y = tape.matmul(i, m).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let sq = tape.square(x).unwrap();
        let s = tape.sum(sq).unwrap();
        // 1 + 4 + 9
        assert_eq!(tape.value(s).item(), 14.0);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(2, 3, vec![0.0; 6]));
        let b = tape.constant(Tensor::matrix(2, 3, vec![0.0; 6]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul"), "{msg}");
        assert!(msg.contains("[2, 3]"), "{msg}");
        let v = tape.constant(Tensor::vector(vec![0.0; 4]));
        assert!(matches!(
            tape.add(a, v),
            Err(AutodiffError::ShapeMismatch { op: "add", .. })
        ));
    }

    #[test]
    fn non_finite_results_are_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1e200]));
        let err = tape.square(x).unwrap_err();
        assert_eq!(err, AutodiffError::NonFinite { op: "square", index: 0 });
    }

    #[test]
    fn derivative_of_square() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.square(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn neg_log_sigmoid_gradient_at_origin() {
        // d/dw [-log σ(w·x)] = -(1 - σ(w·x))·x = -0.5 at w = 0, x = 1
        let mut tape = Tape::new();
        let w = tape.param(Tensor::matrix(1, 1, vec![0.0]));
        let x = tape.constant(Tensor::matrix(1, 1, vec![1.0]));
        let wx = tape.matmul(w, x).unwrap();
        let s = tape.sigmoid(wx).unwrap();
        let l = tape.log(s).unwrap();
        let loss = tape.scale(l, -1.0).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!((g.get(w).unwrap().item() + 0.5).abs() < 1e-15);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let y = tape.square(x).unwrap();
        assert_eq!(
            tape.backward(y).unwrap_err(),
            AutodiffError::NonScalarRoot(Shape::Vector(2))
        );
    }

    #[test]
    fn second_backward_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let y = tape.square(x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(
            tape.backward(y).unwrap_err(),
            AutodiffError::AlreadyDifferentiated
        );
    }

    #[test]
    fn fan_out_accumulates() {
        // f = x·x + x, f' = 2x + 1
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(1.5));
        let xx = tape.mul(x, x).unwrap();
        let f = tape.add(xx, x).unwrap();
        let g = tape.backward(f).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 4.0);
    }

    #[test]
    fn unused_parameter_gets_zero_adjoint() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(1.0));
        let unused = tape.param(Tensor::matrix(2, 2, vec![1.0; 4]));
        let y = tape.square(x).unwrap();
        let g = tape.backward(y).unwrap();
        let gu = g.get(unused).unwrap();
        assert_eq!(gu.shape(), Shape::Matrix(2, 2));
        assert!(gu.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grad_check_sum_of_squares() {
        let err = grad_check(
            |t, x| {
                let s = t.square(x)?;
                t.sum(s)
            },
            &Tensor::vector(vec![1.0, 2.0]),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn grad_check_silu_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = random_tensor(&mut rng, Shape::Vector(16));
        let err = grad_check(
            |t, x| {
                let s = t.silu(x)?;
                t.sum(s)
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn grad_check_constant_function() {
        let err = grad_check(
            |t, _x| Ok(t.constant(Tensor::scalar(4.0))),
            &Tensor::vector(vec![0.3, -0.7, 2.0]),
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn grad_check_reports_non_finite_coordinate() {
        let value = |p: &[f64]| Ok(if p[1] > 0.5 { f64::NAN } else { p[0] });
        let err = check_gradient(value, &[1.0, 0.0], &[0.0, 0.5], &[0, 1], 1e-3).unwrap_err();
        assert_eq!(err, AutodiffError::GradCheckNonFinite { index: 1 });
    }

    /// Every primitive, composed into a scalar, on 10 seeded random points.
    #[test]
    fn every_primitive_passes_grad_check() {
        type Build = fn(&mut Tape, Var) -> Result<Var>;
        let cases: Vec<(&str, Shape, Build)> = vec![
            ("matmul", Shape::Matrix(3, 4), |t, x| {
                let w = t.constant(Tensor::matrix(4, 2, (0..8).map(|i| i as f64 * 0.3 - 1.0).collect()));
                let y = t.matmul(x, w)?;
                let y2 = t.square(y)?;
                t.sum(y2)
            }),
            ("matmul_rhs", Shape::Matrix(4, 2), |t, x| {
                let a = t.constant(Tensor::matrix(3, 4, (0..12).map(|i| (i as f64).sin()).collect()));
                let y = t.matmul(a, x)?;
                let y2 = t.square(y)?;
                t.sum(y2)
            }),
            ("matmul_t", Shape::Matrix(2, 4), |t, x| {
                let a = t.constant(Tensor::matrix(3, 4, (0..12).map(|i| (i as f64).cos()).collect()));
                let y = t.matmul_t(a, x)?;
                let y2 = t.square(y)?;
                t.sum(y2)
            }),
            ("matmul_t_lhs", Shape::Matrix(3, 4), |t, x| {
                let w = t.constant(Tensor::matrix(2, 4, (0..8).map(|i| (i as f64).cos()).collect()));
                let y = t.matmul_t(x, w)?;
                let y2 = t.square(y)?;
                t.sum(y2)
            }),
            ("add_broadcast", Shape::Vector(3), |t, x| {
                let m = t.constant(Tensor::matrix(2, 3, vec![0.1, -0.2, 0.3, 0.4, 0.5, -0.6]));
                let y = t.add(m, x)?;
                let y2 = t.square(y)?;
                t.sum(y2)
            }),
            ("mul", Shape::Vector(5), |t, x| {
                let y = t.mul(x, x)?;
                let z = t.mul(y, x)?;
                t.sum(z)
            }),
            ("silu", Shape::Vector(6), |t, x| {
                let y = t.silu(x)?;
                t.sum(y)
            }),
            ("sin", Shape::Vector(6), |t, x| {
                let y = t.sin(x)?;
                t.sum(y)
            }),
            ("concat", Shape::Matrix(2, 2), |t, x| {
                let c = t.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
                let y = t.concat(&[c, x, x])?;
                let w = t.constant(Tensor::matrix(2, 7, (0..14).map(|i| i as f64 * 0.1).collect()));
                let z = t.mul(y, w)?;
                let z2 = t.square(z)?;
                t.sum(z2)
            }),
            ("mean", Shape::Matrix(2, 3), |t, x| {
                let y = t.square(x)?;
                t.mean(y)
            }),
            ("scale", Shape::Vector(4), |t, x| {
                let y = t.scale(x, -2.5)?;
                let y2 = t.square(y)?;
                t.sum(y2)
            }),
            ("sigmoid", Shape::Vector(4), |t, x| {
                let y = t.sigmoid(x)?;
                t.sum(y)
            }),
            ("log", Shape::Vector(4), |t, x| {
                let s = t.sigmoid(x)?;
                let y = t.log(s)?;
                t.sum(y)
            }),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for (name, shape, build) in cases {
            for _ in 0..10 {
                let p = random_tensor(&mut rng, shape);
                let err = grad_check(build, &p, 1e-5).unwrap();
                assert!(err < 1e-5, "{name}: {err}");
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        /// ∇(a·f + b·g) = a·∇f + b·∇g
        #[test]
        fn gradient_is_linear(
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
            xs in proptest::collection::vec(-2.0f64..2.0, 6),
        ) {
            let f = |t: &mut Tape, x: Var| -> Result<Var> {
                let s = t.silu(x)?;
                let q = t.square(s)?;
                t.sum(q)
            };
            let g = |t: &mut Tape, x: Var| -> Result<Var> {
                let s = t.sin(x)?;
                let m = t.mul(s, x)?;
                t.mean(m)
            };
            let grad_of = |build: &dyn Fn(&mut Tape, Var) -> Result<Var>| {
                let mut tape = Tape::new();
                let x = tape.param(Tensor::vector(xs.clone()));
                let r = build(&mut tape, x).unwrap();
                tape.backward(r).unwrap().get(x).unwrap().data().to_vec()
            };
            let combined = grad_of(&|t, x| {
                let fv = f(t, x)?;
                let gv = g(t, x)?;
                let fa = t.scale(fv, a)?;
                let gb = t.scale(gv, b)?;
                t.add(fa, gb)
            });
            let gf = grad_of(&f);
            let gg = grad_of(&g);
            for i in 0..xs.len() {
                let want = a * gf[i] + b * gg[i];
                prop_assert!((combined[i] - want).abs() <= 1e-12 * (1.0 + want.abs()));
            }
        }
    }
}
