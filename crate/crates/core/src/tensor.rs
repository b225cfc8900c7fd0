//! Reverse-mode automatic differentiation over dense row-major arrays.
//!
//! A [`Tape`] records every primitive operation in execution order. Values
//! live on the tape as nodes addressed by [`Var`] handles; [`Tape::backward`]
//! replays the record in reverse and accumulates gradients into every node
//! that requires them. Gradients accumulate with `+=` until
//! [`Tape::zero_grad`] is called, so several roots may share parameters.
//!
//! There is no implicit broadcasting. The only shape-changing conveniences are
//! scalar constants ([`Tape::scale`], [`Tape::add_const`]) and the explicit
//! [`Tape::expand`] of a one-element tensor.

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("usage error: {0}")]
    Usage(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Owned dense array, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::Usage(format!(
                "shape must be non-empty with positive dimensions, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::Dimension {
                op: "array",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Array { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Array {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Array {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Array {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds a rows×cols matrix from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|row| row.len() != c) {
            return Err(TensorError::Usage("ragged rows".into()));
        }
        Array::new(vec![r, c], rows.concat())
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

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Width of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    /// Row `i` of a matrix (slice along the leading axis, flattened).
    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.data.len() / self.shape[0];
        &self.data[i * w..(i + 1) * w]
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
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

/// Primitive operation kinds, used for reporting and fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Scale,
    AddConst,
    MulConst,
    Softmax,
    MaskedSoftmax,
    Concat,
    Slice,
    Transpose,
    Sum,
    Mean,
    Expand,
    Pick,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Scale => "scale",
            OpKind::AddConst => "add_const",
            OpKind::MulConst => "mul_const",
            OpKind::Softmax => "softmax",
            OpKind::MaskedSoftmax => "masked_softmax",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::Transpose => "transpose",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Expand => "expand",
            OpKind::Pick => "pick",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        use OpKind::*;
        [
            Leaf, MatMul, Add, Sub, Mul, Tanh, Sigmoid, Exp, Log, Scale, AddConst, MulConst,
            Softmax, MaskedSoftmax, Concat, Slice, Transpose, Sum, Mean, Expand, Pick,
        ]
        .into_iter()
        .find(|k| k.name() == name)
    }
}

/// Elementwise operation selector for [`Tape::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Scale(f64),
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Scale(Var, f64),
    AddConst(Var),
    MulConst(Var, Vec<f64>),
    Softmax(Var),
    MaskedSoftmax(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { src: Var, axis: usize, start: usize },
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    Expand(Var),
    Pick(Var, Vec<usize>),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Exp(_) => OpKind::Exp,
            Op::Log(_) => OpKind::Log,
            Op::Scale(..) => OpKind::Scale,
            Op::AddConst(_) => OpKind::AddConst,
            Op::MulConst(..) => OpKind::MulConst,
            Op::Softmax(_) => OpKind::Softmax,
            Op::MaskedSoftmax(_) => OpKind::MaskedSoftmax,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::Expand(_) => OpKind::Expand,
            Op::Pick(..) => OpKind::Pick,
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Array,
    grad: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of primitive operations. Confined to one thread.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
}

/// Splits `shape` around `axis` into (outer, axis_len, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Makes the backward rule of `kind` deliberately wrong. Negative-control
    /// fixture for the gradient checker; never set in normal operation.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: Option<OpKind>) {
        self.fault = kind;
    }

    fn push(&mut self, value: Array, requires_grad: bool, op: Op) -> Var {
        let n = value.len();
        self.nodes.push(Node {
            value,
            grad: vec![0.0; n],
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Array, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Array) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    pub fn grad(&self, v: Var) -> &[f64] {
        &self.node(v).grad
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.node(v).op.kind()
    }

    /// Value of a one-element tensor.
    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value.data[0]
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::Dimension {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let x = self.value(a);
        let data = x.data.iter().map(|&v| f(v)).collect();
        let value = Array {
            shape: x.shape.clone(),
            data,
        };
        let rg = self.rg(&[a]);
        self.push(value, rg, op)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data.iter().zip(&y.data).map(|(&p, &q)| f(p, q)).collect();
        let value = Array {
            shape: x.shape.clone(),
            data,
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rg, op))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::Dimension {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (x, y) = (&self.value(a).data, &self.value(b).data);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let xv = x[i * k + p];
                if xv == 0.0 {
                    continue;
                }
                let yrow = &y[p * n..(p + 1) * n];
                for (o, &yv) in orow.iter_mut().zip(yrow) {
                    *o += xv * yv;
                }
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Array { shape: vec![m, n], data: out }, rg, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |p, q| p * q, Op::Mul(a, b))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data.iter().find(|&&v| !(v > 0.0)) {
            return Err(TensorError::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        Ok(self.unary(a, f64::ln, Op::Log(a)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |v| v * c, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |v| v + c, Op::AddConst(a))
    }

    /// Elementwise product with a fixed array of the same shape.
    pub fn mul_const(&mut self, a: Var, c: &Array) -> Result<Var> {
        if c.shape() != self.shape(a) {
            return Err(TensorError::Dimension {
                op: "mul_const",
                lhs: self.shape(a).to_vec(),
                rhs: c.shape().to_vec(),
            });
        }
        let x = self.value(a);
        let data = x.data.iter().zip(&c.data).map(|(p, q)| p * q).collect();
        let value = Array {
            shape: x.shape.clone(),
            data,
        };
        let rg = self.rg(&[a]);
        Ok(self.push(value, rg, Op::MulConst(a, c.data.clone())))
    }

    pub fn elementwise(&mut self, kind: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        let rhs = |b: Option<Var>| {
            b.ok_or_else(|| TensorError::Usage(format!("{kind:?} needs a second operand")))
        };
        match kind {
            Elementwise::Add => self.add(a, rhs(b)?),
            Elementwise::Sub => self.sub(a, rhs(b)?),
            Elementwise::Mul => self.mul(a, rhs(b)?),
            Elementwise::Tanh => Ok(self.tanh(a)),
            Elementwise::Sigmoid => Ok(self.sigmoid(a)),
            Elementwise::Exp => Ok(self.exp(a)),
            Elementwise::Log => self.log(a),
            Elementwise::Scale(c) => Ok(self.scale(a, c)),
        }
    }

    /// Softmax along the last axis, with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let w = x.cols();
        let mut data = x.data.clone();
        for row in data.chunks_mut(w) {
            softmax_in_place(row, None);
        }
        let value = Array {
            shape: x.shape.clone(),
            data,
        };
        let rg = self.rg(&[a]);
        self.push(value, rg, Op::Softmax(a))
    }

    /// Softmax along the last axis restricted to positions where `mask` is
    /// true. Masked entries come out as exactly 0; a row with no admissible
    /// position is all zeros.
    pub fn masked_softmax(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let x = self.value(a);
        if mask.len() != x.len() {
            return Err(TensorError::Dimension {
                op: "masked_softmax",
                lhs: x.shape.clone(),
                rhs: vec![mask.len()],
            });
        }
        let w = x.cols();
        let mut data = x.data.clone();
        for (row, m) in data.chunks_mut(w).zip(mask.chunks(w)) {
            softmax_in_place(row, Some(m));
        }
        let value = Array {
            shape: x.shape.clone(),
            data,
        };
        let rg = self.rg(&[a]);
        Ok(self.push(value, rg, Op::MaskedSoftmax(a)))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Usage("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::Usage(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().enumerate().all(|(i, &d)| i == axis || d == base[i]);
            if !compatible {
                return Err(TensorError::Dimension {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        if parts.len() == 1 {
            return Ok(*first);
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let chunk = v.shape[axis] * inner;
                data.extend_from_slice(&v.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Array { shape, data },
            rg,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Contiguous range `[start, start+len)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(TensorError::Dimension {
                op: "slice",
                lhs: shape,
                rhs: vec![axis, start, len],
            });
        }
        let (outer, alen, inner) = axis_split(&shape, axis);
        let x = &self.value(a).data;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * alen * inner + start * inner;
            data.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(&[a]);
        Ok(self.push(
            Array {
                shape: out_shape,
                data,
            },
            rg,
            Op::Slice { src: a, axis, start },
        ))
    }

    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        self.slice(a, 0, i, 1)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(TensorError::Dimension {
                op: "transpose",
                lhs: s,
                rhs: vec![],
            });
        }
        let (r, c) = (s[0], s[1]);
        let x = &self.value(a).data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = x[i * c + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Array { shape: vec![c, r], data }, rg, Op::Transpose(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data.iter().sum();
        let rg = self.rg(&[a]);
        self.push(Array::scalar(s), rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.data.iter().sum::<f64>() / x.len() as f64;
        let rg = self.rg(&[a]);
        self.push(Array::scalar(s), rg, Op::Mean(a))
    }

    /// Repeats a one-element tensor into `shape`.
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if self.value(a).len() != 1 {
            return Err(TensorError::Dimension {
                op: "expand",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let v = self.scalar(a);
        let rg = self.rg(&[a]);
        Ok(self.push(Array::filled(shape, v), rg, Op::Expand(a)))
    }

    /// For a rows×cols matrix, selects column `index[r]` from each row r,
    /// producing rows×1.
    pub fn pick(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || s[0] != index.len() || index.iter().any(|&i| i >= s[1]) {
            return Err(TensorError::Dimension {
                op: "pick",
                lhs: s,
                rhs: vec![index.len()],
            });
        }
        let x = self.value(a);
        let data = index.iter().enumerate().map(|(r, &c)| x.get2(r, c)).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(
            Array {
                shape: vec![index.len(), 1],
                data,
            },
            rg,
            Op::Pick(a, index.to_vec()),
        ))
    }

    /// Inverted dropout. Identity when not training or when `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let shape = self.shape(a).to_vec();
        let mask: Vec<f64> = (0..self.value(a).len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        self.mul_const(a, &Array { shape, data: mask })
    }

    /// Gradients of `root` with respect to every node, without touching the
    /// accumulated `grad` buffers. Entries for nodes that do not require
    /// gradients are `None`.
    pub fn gradients(&self, root: Var) -> Result<Vec<Option<Vec<f64>>>> {
        if self.value(root).len() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let Some(mut g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if self.fault == Some(node.op.kind()) {
                g.iter_mut().for_each(|v| *v *= 1.5);
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(grads)
    }

    /// Accumulates d(root)/d(node) into the `grad` buffer of every node that
    /// requires gradients.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let grads = self.gradients(root)?;
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if let (true, Some(g)) = (node.requires_grad, g) {
                for (acc, v) in node.grad.iter_mut().zip(g) {
                    *acc += v;
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut send = |v: Var, contrib: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            contrib(buf);
        };
        let out = &node.value.data;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let x = &self.value(*a).data;
                let y = &self.value(*b).data;
                send(*a, &|buf| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * y[p * n + j];
                            }
                            buf[i * k + p] += s;
                        }
                    }
                });
                send(*b, &|buf| {
                    for i in 0..m {
                        for p in 0..k {
                            let xv = x[i * k + p];
                            if xv == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                buf[p * n + j] += xv * g[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                send(*a, &|buf| add_into(buf, g));
                send(*b, &|buf| add_into(buf, g));
            }
            Op::Sub(a, b) => {
                send(*a, &|buf| add_into(buf, g));
                send(*b, &|buf| buf.iter_mut().zip(g).for_each(|(o, v)| *o -= v));
            }
            Op::Mul(a, b) => {
                let x = &self.value(*a).data;
                let y = &self.value(*b).data;
                send(*a, &|buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * y[i];
                    }
                });
                send(*b, &|buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * x[i];
                    }
                });
            }
            Op::Tanh(a) => send(*a, &|buf| {
                for i in 0..buf.len() {
                    buf[i] += g[i] * (1.0 - out[i] * out[i]);
                }
            }),
            Op::Sigmoid(a) => send(*a, &|buf| {
                for i in 0..buf.len() {
                    buf[i] += g[i] * out[i] * (1.0 - out[i]);
                }
            }),
            Op::Exp(a) => send(*a, &|buf| {
                for i in 0..buf.len() {
                    buf[i] += g[i] * out[i];
                }
            }),
            Op::Log(a) => {
                let x = &self.value(*a).data;
                send(*a, &|buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] / x[i];
                    }
                })
            }
            Op::Scale(a, c) => send(*a, &|buf| {
                for i in 0..buf.len() {
                    buf[i] += g[i] * c;
                }
            }),
            Op::AddConst(a) => send(*a, &|buf| add_into(buf, g)),
            Op::MulConst(a, c) => send(*a, &|buf| {
                for i in 0..buf.len() {
                    buf[i] += g[i] * c[i];
                }
            }),
            Op::Softmax(a) | Op::MaskedSoftmax(a) => {
                let w = node.value.cols();
                send(*a, &|buf| {
                    for ((b, y), gr) in buf.chunks_mut(w).zip(out.chunks(w)).zip(g.chunks(w)) {
                        let dot: f64 = y.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for i in 0..w {
                            b[i] += y[i] * (gr[i] - dot);
                        }
                    }
                })
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let plen = self.shape(p)[*axis];
                    send(p, &|buf| {
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            let dst = o * plen * inner;
                            add_into(&mut buf[dst..dst + plen * inner], &g[src..src + plen * inner]);
                        }
                    });
                    offset += plen;
                }
            }
            Op::Slice { src, axis, start } => {
                let (outer, alen, inner) = axis_split(self.shape(*src), *axis);
                let len = node.value.shape()[*axis];
                send(*src, &|buf| {
                    for o in 0..outer {
                        let base = o * alen * inner + start * inner;
                        add_into(&mut buf[base..base + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                    }
                })
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let (r, c) = (s[0], s[1]);
                send(*a, &|buf| {
                    for i in 0..r {
                        for j in 0..c {
                            buf[i * c + j] += g[j * r + i];
                        }
                    }
                })
            }
            Op::Sum(a) => send(*a, &|buf| buf.iter_mut().for_each(|o| *o += g[0])),
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                send(*a, &|buf| buf.iter_mut().for_each(|o| *o += g[0] / n))
            }
            Op::Expand(a) => send(*a, &|buf| buf[0] += g.iter().sum::<f64>()),
            Op::Pick(a, index) => {
                let c = self.value(*a).cols();
                send(*a, &|buf| {
                    for (r, &col) in index.iter().enumerate() {
                        buf[r * c + col] += g[r];
                    }
                })
            }
        }
    }
}

fn add_into(buf: &mut [f64], g: &[f64]) {
    buf.iter_mut().zip(g).for_each(|(o, v)| *o += v);
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_in_place(row: &mut [f64], mask: Option<&[bool]>) {
    let allowed = |i: usize| mask.is_none_or(|m| m[i]);
    let max = (0..row.len())
        .filter(|&i| allowed(i))
        .map(|i| row[i])
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        row.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let mut z = 0.0;
    for i in 0..row.len() {
        row[i] = if allowed(i) { (row[i] - max).exp() } else { 0.0 };
        z += row[i];
    }
    row.iter_mut().for_each(|v| *v /= z);
}

/// Outcome of [`finite_diff_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (parameter index, flat coordinate) of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
}

/// Compares tape gradients of the scalar `f` against central differences.
///
/// `f` receives a fresh tape and one leaf per entry of `params`, and must be
/// deterministic. The relative error of each coordinate is
/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn finite_diff_check<F, E>(f: F, params: &[Array], step: f64) -> std::result::Result<GradCheckReport, E>
where
    F: Fn(&mut Tape, &[Var]) -> std::result::Result<Var, E>,
    E: From<TensorError>,
{
    finite_diff_check_with(f, params, step, None)
}

#[doc(hidden)]
pub fn finite_diff_check_with<F, E>(
    f: F,
    params: &[Array],
    step: f64,
    fault: Option<OpKind>,
) -> std::result::Result<GradCheckReport, E>
where
    F: Fn(&mut Tape, &[Var]) -> std::result::Result<Var, E>,
    E: From<TensorError>,
{
    if !(step > 0.0) {
        return Err(TensorError::Usage(format!("finite-difference step must be positive, got {step}")).into());
    }
    let eval = |ps: &[Array], backward: bool| -> std::result::Result<(f64, Vec<Vec<f64>>), E> {
        let mut tape = Tape::new();
        tape.inject_fault(fault);
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone(), true)).collect();
        let root = f(&mut tape, &vars)?;
        let value = tape.scalar(root);
        if !value.is_finite() {
            return Err(TensorError::NonFinite(format!("objective evaluated to {value}")).into());
        }
        let mut grads = Vec::new();
        if backward {
            tape.backward(root)?;
            grads = vars.iter().map(|&v| tape.grad(v).to_vec()).collect();
        }
        Ok((value, grads))
    };
    let (_, analytic) = eval(params, true)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    let mut work = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for ci in 0..p.len() {
            let orig = p.data[ci];
            work[pi].data[ci] = orig + step;
            let (plus, _) = eval(&work, false)?;
            work[pi].data[ci] = orig - step;
            let (minus, _) = eval(&work, false)?;
            work[pi].data[ci] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[pi][ci];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let err = (a - numeric).abs() / denom;
            report.coordinates += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((pi, ci));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Array {
        let n = shape.iter().product();
        Array::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
    }

    #[test]
    fn matmul_identity_and_ones() {
        let mut t = Tape::new();
        let a = t.constant(Array::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let i = t.constant(Array::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let ones = t.constant(Array::from_rows(&[vec![1.0], vec![1.0]]).unwrap());
        let ai = t.matmul(a, i).unwrap();
        assert_eq!(t.value(ai).data(), &[1.0, 2.0, 3.0, 4.0]);
        let ao = t.matmul(a, ones).unwrap();
        assert_eq!(t.value(ao).shape(), &[2, 1]);
        assert_eq!(t.value(ao).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Array::zeros(&[2, 3]));
        let b = t.constant(Array::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::Dimension {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_array(&mut rng, &[3, 4], -2.0, 2.0);
        let b = rand_array(&mut rng, &[4, 2], -2.0, 2.0);
        let r = finite_diff_check(
            |t: &mut Tape, v: &[Var]| -> Result<Var> {
                let m = t.matmul(v[0], v[1])?;
                Ok(t.sum(m))
            },
            &[a, b],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn elementwise_fixed_points() {
        let mut t = Tape::new();
        let z = t.constant(Array::zeros(&[2, 3]));
        let th = t.tanh(z);
        let sg = t.sigmoid(z);
        assert!(t.value(th).data().iter().all(|&v| v == 0.0));
        assert!(t.value(sg).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn elementwise_errors() {
        let mut t = Tape::new();
        let a = t.constant(Array::new(vec![2], vec![1.0, 0.0]).unwrap());
        assert!(matches!(t.log(a), Err(TensorError::Domain { op: "log", .. })));
        let b = t.constant(Array::zeros(&[3]));
        assert!(matches!(t.add(a, b), Err(TensorError::Dimension { .. })));
        assert!(matches!(t.elementwise(Elementwise::Mul, a, None), Err(TensorError::Usage(_))));
    }

    #[test]
    fn every_elementwise_kind_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let kinds = [
            Elementwise::Add,
            Elementwise::Sub,
            Elementwise::Mul,
            Elementwise::Tanh,
            Elementwise::Sigmoid,
            Elementwise::Exp,
            Elementwise::Log,
            Elementwise::Scale(-1.7),
        ];
        for kind in kinds {
            let lo = if kind == Elementwise::Log { 0.2 } else { -2.0 };
            let a = rand_array(&mut rng, &[2, 3], lo, 2.0);
            let b = rand_array(&mut rng, &[2, 3], -2.0, 2.0);
            let w = rand_array(&mut rng, &[2, 3], -1.0, 1.0);
            let r = finite_diff_check(
                |t: &mut Tape, v: &[Var]| -> Result<Var> {
                    let y = t.elementwise(kind, v[0], Some(v[1]))?;
                    let weighted = t.mul_const(y, &w)?;
                    Ok(t.sum(weighted))
                },
                &[a, b],
                1e-5,
            )
            .unwrap();
            assert!(r.max_rel_error < 1e-6, "{kind:?}: {r:?}");
        }
    }

    #[test]
    fn softmax_closed_forms() {
        let mut t = Tape::new();
        let a = t.constant(Array::new(vec![2], vec![0.0, 0.0]).unwrap());
        let s = t.softmax(a);
        assert_eq!(t.value(s).data(), &[0.5, 0.5]);
        let b = t.constant(Array::new(vec![2], vec![1f64.ln(), 3f64.ln()]).unwrap());
        let s = t.softmax(b);
        assert!((t.value(s).data()[0] - 0.25).abs() < 1e-15);
        assert!((t.value(s).data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_matches_direct_exponentials() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_array(&mut rng, &[6], -3.0, 3.0);
        let z: f64 = x.data().iter().map(|v| v.exp()).sum();
        let mut t = Tape::new();
        let v = t.constant(x.clone());
        let s = t.softmax(v);
        for (got, xi) in t.value(s).data().iter().zip(x.data()) {
            assert!((got - xi.exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let mut t = Tape::new();
        let v = t.constant(Array::new(vec![1, 3], vec![1000.0, 999.0, -1000.0]).unwrap());
        let s = t.softmax(v);
        assert!(t.value(s).data().iter().all(|x| x.is_finite()));
        assert!((t.value(s).data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn masked_softmax_zeroes_masked_and_empty_rows() {
        let mut t = Tape::new();
        let v = t.constant(Array::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let s = t
            .masked_softmax(v, &[false, false, false, true, false, true])
            .unwrap();
        let d = t.value(s).data();
        assert_eq!(&d[..3], &[0.0, 0.0, 0.0]);
        assert_eq!(d[4], 0.0);
        assert!((d[3] + d[5] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn concat_cases() {
        let mut t = Tape::new();
        let a = t.leaf(Array::new(vec![1, 2], vec![1.0, 2.0]).unwrap(), true);
        let b = t.leaf(Array::new(vec![1, 3], vec![3.0, 4.0, 5.0]).unwrap(), true);
        assert_eq!(t.concat(&[a], 1).unwrap(), a);
        let c = t.concat(&[a, b], 1).unwrap();
        assert_eq!(t.shape(c), &[1, 5]);
        assert_eq!(t.value(c).data(), &[1.0, 2.0, 3.0, 4.0, 5.0]);
        let s = t.sum(c);
        t.backward(s).unwrap();
        assert_eq!(t.grad(a), &[1.0, 1.0]);
        assert_eq!(t.grad(b), &[1.0, 1.0, 1.0]);
        assert!(matches!(t.concat(&[a, b], 0), Err(TensorError::Dimension { .. })));
    }

    #[test]
    fn shape_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rand_array(&mut rng, &[3, 4], -2.0, 2.0);
        let b = rand_array(&mut rng, &[2, 4], -2.0, 2.0);
        let s = rand_array(&mut rng, &[1], -2.0, 2.0);
        let w = rand_array(&mut rng, &[4, 5], -1.0, 1.0);
        let r = finite_diff_check(
            |t: &mut Tape, v: &[Var]| -> Result<Var> {
                let c = t.concat(&[v[0], v[1]], 0)?;
                let sl = t.slice(c, 1, 1, 3)?;
                let tr = t.transpose(sl)?;
                let e = t.expand(v[2], &[3, 5])?;
                let ww = t.constant(w.clone());
                let cw = t.matmul(c, ww)?;
                let top = t.slice(cw, 0, 1, 3)?;
                let m = t.mul(top, e)?;
                let p = t.pick(m, &[0, 4, 2])?;
                let sp = t.sum(p);
                let mt = t.mean(tr);
                let ac = t.add_const(mt, 0.3);
                let sq = t.mul(ac, ac)?;
                t.add(sp, sq)
            },
            &[a, b, s],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn dropout_identity_cases_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut t = Tape::new();
        let x = t.constant(Array::filled(&[10], 2.0));
        assert_eq!(t.dropout(x, 0.2, false, &mut rng).unwrap(), x);
        assert_eq!(t.dropout(x, 0.0, true, &mut rng).unwrap(), x);
        assert!(matches!(t.dropout(x, 1.0, true, &mut rng), Err(TensorError::Config(_))));
        assert!(matches!(t.dropout(x, -0.1, false, &mut rng), Err(TensorError::Config(_))));
    }

    #[test]
    fn dropout_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut t = Tape::new();
        let input = rand_array(&mut rng, &[100_000], 0.5, 1.5);
        let mean_in = input.data().iter().sum::<f64>() / 1e5;
        let x = t.constant(input);
        let y = t.dropout(x, 0.5, true, &mut rng).unwrap();
        let out = t.value(y).data();
        let survivors = out.iter().filter(|&&v| v != 0.0).count() as f64 / 1e5;
        assert!((survivors - 0.5).abs() < 0.01, "{survivors}");
        let mean_out = out.iter().sum::<f64>() / 1e5;
        assert!(((mean_out - mean_in) / mean_in).abs() < 0.01);
    }

    #[test]
    fn backward_closed_forms_and_accumulation() {
        let mut t = Tape::new();
        let x = t.leaf(Array::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap(), true);
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x), &[1.0, 1.0, 1.0]);
        assert_eq!(t.grad(s), &[1.0]);
        t.zero_grad();
        let sq = t.mul(x, x).unwrap();
        let r = t.sum(sq);
        t.backward(r).unwrap();
        assert_eq!(t.grad(x), &[2.0, -4.0, 1.0]);
        let once = t.grad(x).to_vec();
        t.backward(r).unwrap();
        for (g, o) in t.grad(x).iter().zip(once) {
            assert_eq!(*g, 2.0 * o);
        }
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut t = Tape::new();
        let x = t.leaf(Array::zeros(&[2]), true);
        assert!(matches!(t.backward(x), Err(TensorError::Usage(_))));
    }

    #[test]
    fn composite_expression_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = rand_array(&mut rng, &[3, 4], -2.0, 2.0);
        let w = rand_array(&mut rng, &[4, 5], -2.0, 2.0);
        let r = finite_diff_check(
            |t: &mut Tape, v: &[Var]| -> Result<Var> {
                let m = t.matmul(v[0], v[1])?;
                let h = t.tanh(m);
                let s = t.softmax(h);
                let l = t.log(s)?;
                Ok(t.sum(l))
            },
            &[a, w],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    #[test]
    fn finite_diff_check_trivial_cases() {
        let c = Array::new(vec![2], vec![0.3, -0.4]).unwrap();
        let r = finite_diff_check(
            |t: &mut Tape, v: &[Var]| -> Result<Var> {
                let z = t.scale(v[0], 0.0);
                Ok(t.sum(z))
            },
            &[c.clone()],
            1e-5,
        )
        .unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        let r = finite_diff_check(
            |t: &mut Tape, v: &[Var]| -> Result<Var> {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.sum(sq))
            },
            &[c],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-7, "{r:?}");
    }

    #[test]
    fn finite_diff_check_reports_nonfinite_and_bad_step() {
        let c = Array::new(vec![1], vec![800.0]).unwrap();
        let f = |t: &mut Tape, v: &[Var]| -> Result<Var> {
            let e = t.exp(v[0]);
            Ok(t.sum(e))
        };
        assert!(matches!(finite_diff_check(f, &[c.clone()], 1e-5), Err(TensorError::NonFinite(_))));
        assert!(matches!(finite_diff_check(f, &[c], 0.0), Err(TensorError::Usage(_))));
    }

    #[test]
    fn injected_fault_is_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = rand_array(&mut rng, &[2, 3], -2.0, 2.0);
        let r: GradCheckReport = finite_diff_check_with(
            |t: &mut Tape, v: &[Var]| -> Result<Var> {
                let h = t.tanh(v[0]);
                Ok(t.sum(h))
            },
            &[a],
            1e-5,
            Some(OpKind::Tanh),
        )
        .unwrap();
        assert!(r.max_rel_error > 0.1);
    }
}
