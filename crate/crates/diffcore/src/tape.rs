//! The recording tape and its primitive operations.
//!
//! Every primitive appends one node whose inputs all have smaller ids, so the
//! node list is already in topological order and the backward sweep is a
//! single reverse scan.
//!
//! Binary elementwise primitives broadcast only in two ways: a single-element
//! operand against anything, or an operand whose shape is a trailing suffix of
//! the other operand's shape (`[R, N, 3] + [3]`). Anything else is rejected.

use std::collections::HashMap;
use std::rc::Rc;

use crate::array::{gemm, Array};
use crate::error::{DiffError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    HardClip(Var, Var),
    Neg(Var),
    Square(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softplus(Var),
    Sin(Var),
    Cos(Var),
    ClampMin0(Var),
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Sum(Var),
    Mean(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    Reshape(Var),
    Concat(Vec<Var>),
    ConcatRows(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
        end: usize,
    },
    ExpandLast {
        x: Var,
        k: usize,
    },
    CumsumExclusive(Var),
    Gather {
        x: Var,
        index: Rc<[usize]>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Array,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::HardClip(..) => "hard_clip",
            Op::Neg(_) => "neg",
            Op::Square(_) => "square",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::Softplus(_) => "softplus",
            Op::Sin(_) => "sin",
            Op::Cos(_) => "cos",
            Op::ClampMin0(_) => "clamp_min0",
            Op::Clamp { .. } => "clamp",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumAxis { .. } => "sum_axis",
            Op::Reshape(_) => "reshape",
            Op::Concat(_) => "concat",
            Op::ConcatRows(_) => "concat_rows",
            Op::Slice { .. } => "slice",
            Op::ExpandLast { .. } => "expand_last",
            Op::CumsumExclusive(_) => "cumsum_exclusive",
            Op::Gather { .. } => "gather",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Array,
    requires_grad: bool,
}

/// Gradients of a scalar root with respect to the tape's parameters.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: HashMap<Var, Array>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Array> {
        self.grads.get(&var)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Dynamic reverse-mode tape. Rebuilt for every forward pass.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<Var>,
}

#[derive(Clone, Copy)]
enum Broadcast {
    Same,
    /// The right operand repeats with period `len(rhs)`.
    Rhs,
    /// The left operand repeats with period `len(lhs)`.
    Lhs,
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() < big.len() && big[big.len() - small.len()..] == *small
}

fn broadcast_rule(op: &'static str, a: &Array, b: &Array) -> Result<(Broadcast, Vec<usize>)> {
    if a.shape() == b.shape() {
        Ok((Broadcast::Same, a.shape().to_vec()))
    } else if b.len() == 1 || is_suffix(b.shape(), a.shape()) {
        Ok((Broadcast::Rhs, a.shape().to_vec()))
    } else if a.len() == 1 || is_suffix(a.shape(), b.shape()) {
        Ok((Broadcast::Lhs, b.shape().to_vec()))
    } else {
        Err(DiffError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

/// Splits `shape` around `axis` into (outer, extent, inner) sizes.
fn axis_sizes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
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

    /// Trainable leaf. Gradients are reported for it by [`Tape::backward`].
    pub fn param(&mut self, value: Array) -> Var {
        let v = self.push(Op::Leaf, value, true);
        self.params.push(v);
        v
    }

    /// Non-trainable leaf; no gradient flows into it.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Array::scalar(value))
    }

    pub fn params(&self) -> &[Var] {
        &self.params
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Name of the primitive that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Input ids of the node behind `v`.
    pub fn inputs(&self, v: Var) -> Vec<Var> {
        match &self.nodes[v.0].op {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::HardClip(a, b)
            | Op::MatMul(a, b) => vec![*a, *b],
            Op::Neg(x)
            | Op::Square(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Tanh(x)
            | Op::Sigmoid(x)
            | Op::Relu(x)
            | Op::Softplus(x)
            | Op::Sin(x)
            | Op::Cos(x)
            | Op::ClampMin0(x)
            | Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Reshape(x)
            | Op::CumsumExclusive(x) => vec![*x],
            Op::Clamp { x, .. }
            | Op::SumAxis { x, .. }
            | Op::Slice { x, .. }
            | Op::ExpandLast { x, .. }
            | Op::Gather { x, .. } => vec![*x],
            Op::Concat(xs) | Op::ConcatRows(xs) => xs.clone(),
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
        }
    }

    fn push(&mut self, op: Op, value: Array, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(id)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (rule, shape) = broadcast_rule(op.name(), va, vb)?;
        let (da, db) = (va.data(), vb.data());
        let data: Vec<f64> = match rule {
            Broadcast::Same => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Rhs => {
                let m = db.len();
                da.iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, db[i % m]))
                    .collect()
            }
            Broadcast::Lhs => {
                let m = da.len();
                db.iter()
                    .enumerate()
                    .map(|(i, &y)| f(da[i % m], y))
                    .collect()
            }
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(op, Array::new(shape, data)?, rg))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.nodes[x.0].value.map(f);
        let rg = self.nodes[x.0].requires_grad;
        self.push(op, value, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Elementwise division; a zero anywhere in the denominator is rejected.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.nodes[b.0].value.data().iter().any(|&v| v == 0.0) {
            return Err(DiffError::Domain {
                op: "div",
                detail: "zero denominator".into(),
            });
        }
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// `min(max(x, -bound), bound)`. The gradient is zero wherever the clip
    /// is active, which is the whole point of having it as a primitive.
    pub fn hard_clip(&mut self, x: Var, bound: Var) -> Result<Var> {
        if self.nodes[bound.0].value.data().iter().any(|&b| !(b > 0.0)) {
            return Err(DiffError::Domain {
                op: "hard_clip",
                detail: "bound must be positive".into(),
            });
        }
        self.binary(x, bound, Op::HardClip(x, bound), |v, b| v.clamp(-b, b))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Op::Neg(x), |v| -v)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    /// Natural log; nonpositive inputs are rejected.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.nodes[x.0].value.data().iter().find(|&&v| !(v > 0.0)) {
            return Err(DiffError::Domain {
                op: "log",
                detail: format!("log of {bad}"),
            });
        }
        Ok(self.unary(x, Op::Log(x), f64::ln))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    /// `max(x, 0)` with zero gradient at the kink.
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), softplus)
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sin(x), f64::sin)
    }

    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(x, Op::Cos(x), f64::cos)
    }

    /// `max(x, 0)` that passes the gradient through at exactly zero, so a
    /// quantity sitting on the floor can still be pushed upward.
    pub fn clamp_min0(&mut self, x: Var) -> Var {
        self.unary(x, Op::ClampMin0(x), |v| v.max(0.0))
    }

    /// Clamp to `[lo, hi]`; gradient passes on the closed interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Op::Clamp { x, lo, hi }, |v| v.clamp(lo, hi))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.unary(x, Op::Scale(x, factor), |v| v * factor)
    }

    pub fn add_scalar(&mut self, x: Var, offset: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + offset)
    }

    /// Two-dimensional matrix product `[m, k] x [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.ndim() != 2 || vb.ndim() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, va.data(), false, vb.data(), false, &mut out);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), Array::new(vec![m, n], out)?, rg))
    }

    /// Sum of all elements, as a zero-dimensional array.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.sum();
        let rg = self.nodes[x.0].requires_grad;
        self.push(Op::Sum(x), Array::scalar(s), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        if v.is_empty() {
            return Err(DiffError::InvalidArgument("mean of empty array".into()));
        }
        let m = v.sum() / v.len() as f64;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::Mean(x), Array::scalar(m), rg))
    }

    /// Sum over one axis, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        if axis >= v.ndim() {
            return Err(DiffError::InvalidArgument(format!(
                "sum_axis: axis {axis} out of range for shape {:?}",
                v.shape()
            )));
        }
        let (outer, extent, inner) = axis_sizes(v.shape(), axis);
        let d = v.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for e in 0..extent {
                let src = &d[(o * extent + e) * inner..(o * extent + e + 1) * inner];
                for (acc, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += s;
                }
            }
        }
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::SumAxis { x, axis }, Array::new(shape, out)?, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[x.0].value.clone().reshape(shape)?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::Reshape(x), value, rg))
    }

    /// Concatenation along the last axis; leading dimensions must agree.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| DiffError::InvalidArgument("concat of nothing".into()))?;
        let lead = {
            let s = self.shape(*first);
            if s.is_empty() {
                return Err(DiffError::InvalidArgument("concat of scalars".into()));
            }
            s[..s.len() - 1].to_vec()
        };
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(DiffError::ShapeMismatch {
                    op: "concat",
                    lhs: self.shape(*first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(*s.last().unwrap());
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&x, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[x.0].value.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = self.any_grad(xs);
        Ok(self.push(Op::Concat(xs.to_vec()), Array::new(shape, out)?, rg))
    }

    /// Concatenation along the first axis; trailing dimensions must agree.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| DiffError::InvalidArgument("concat_rows of nothing".into()))?;
        let tail = {
            let s = self.shape(*first);
            if s.is_empty() {
                return Err(DiffError::InvalidArgument("concat_rows of scalars".into()));
            }
            s[1..].to_vec()
        };
        let mut rows = 0;
        let mut out = Vec::new();
        for &x in xs {
            let v = &self.nodes[x.0].value;
            if v.ndim() == 0 || v.shape()[1..] != tail[..] {
                return Err(DiffError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(*first).to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            rows += v.shape()[0];
            out.extend_from_slice(v.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let rg = self.any_grad(xs);
        Ok(self.push(Op::ConcatRows(xs.to_vec()), Array::new(shape, out)?, rg))
    }

    /// Columns `start..end` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        let w = *v.shape().last().unwrap_or(&0);
        if v.ndim() == 0 || start >= end || end > w {
            return Err(DiffError::InvalidArgument(format!(
                "slice_last: range {start}..{end} invalid for shape {:?}",
                v.shape()
            )));
        }
        let rows = v.len() / w;
        let mut out = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            out.extend_from_slice(&v.data()[r * w + start..r * w + end]);
        }
        let mut shape = v.shape().to_vec();
        *shape.last_mut().unwrap() = end - start;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::Slice { x, start, end }, Array::new(shape, out)?, rg))
    }

    /// Repeats a trailing unit axis `k` times: `[.., 1] -> [.., k]`.
    pub fn expand_last(&mut self, x: Var, k: usize) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        if v.shape().last() != Some(&1) || k == 0 {
            return Err(DiffError::ShapeMismatch {
                op: "expand_last",
                lhs: v.shape().to_vec(),
                rhs: vec![k],
            });
        }
        let out: Vec<f64> = v
            .data()
            .iter()
            .flat_map(|&e| std::iter::repeat_n(e, k))
            .collect();
        let mut shape = v.shape().to_vec();
        *shape.last_mut().unwrap() = k;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::ExpandLast { x, k }, Array::new(shape, out)?, rg))
    }

    /// Exclusive prefix sum along the last axis: `y[j] = sum_{i<j} x[i]`.
    pub fn cumsum_exclusive(&mut self, x: Var) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        let w = *v
            .shape()
            .last()
            .ok_or_else(|| DiffError::InvalidArgument("cumsum of a scalar".into()))?;
        let mut out = vec![0.0; v.len()];
        for (src, dst) in v.data().chunks(w.max(1)).zip(out.chunks_mut(w.max(1))) {
            let mut acc = 0.0;
            for (s, d) in src.iter().zip(dst.iter_mut()) {
                *d = acc;
                acc += s;
            }
        }
        let shape = v.shape().to_vec();
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::CumsumExclusive(x), Array::new(shape, out)?, rg))
    }

    /// `out.flat[i] = x.flat[index[i]]`, reshaped to `shape`. Indices may
    /// repeat; the backward pass scatter-adds.
    pub fn gather(&mut self, x: Var, index: Rc<[usize]>, shape: &[usize]) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        if shape.iter().product::<usize>() != index.len() {
            return Err(DiffError::InvalidArgument(format!(
                "gather: {} indices cannot fill shape {shape:?}",
                index.len()
            )));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= v.len()) {
            return Err(DiffError::InvalidArgument(format!(
                "gather: index {bad} out of range for {} elements",
                v.len()
            )));
        }
        let out: Vec<f64> = index.iter().map(|&i| v.data()[i]).collect();
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(
            Op::Gather { x, index },
            Array::new(shape.to_vec(), out)?,
            rg,
        ))
    }

    /// Mean softmax cross-entropy of `logits: [B, C]` against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let v = &self.nodes[logits.0].value;
        if v.ndim() != 2 || v.shape()[0] != labels.len() || labels.is_empty() {
            return Err(DiffError::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: v.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let (b, c) = (v.shape()[0], v.shape()[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(DiffError::InvalidArgument(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = v.row(i);
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &z| a.max(z));
            let z: f64 = row.iter().map(|&r| (r - m).exp()).sum();
            for j in 0..c {
                probs[i * c + j] = (row[j] - m).exp() / z;
            }
            loss += m + z.ln() - row[label];
        }
        let probs = Array::new(vec![b, c], probs)?;
        let rg = self.nodes[logits.0].requires_grad;
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            Array::scalar(loss / b as f64),
            rg,
        ))
    }

    /// Reverse sweep from a scalar `root`. Returns one gradient per parameter
    /// (zeros for parameters the root does not depend on).
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = &self.nodes[root.0].value;
        if rv.len() != 1 {
            return Err(DiffError::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Array>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Array::full(rv.shape(), 1.0));

        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }

        let mut out = Gradients::default();
        for &p in &self.params {
            let g = grads
                .get_mut(p.0)
                .and_then(Option::take)
                .unwrap_or_else(|| Array::zeros(self.nodes[p.0].value.shape()));
            out.grads.insert(p, g);
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Array>], target: Var, contribution: Array) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        match &mut grads[target.0] {
            Some(existing) => existing.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    /// Gradient of a broadcast binary op with local partials `da`, `db`.
    fn binary_backward(
        &self,
        a: Var,
        b: Var,
        g: &Array,
        grads: &mut [Option<Array>],
        da: impl Fn(f64, f64) -> f64,
        db: impl Fn(f64, f64) -> f64,
    ) {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (na, nb) = (va.len(), vb.len());
        let (xa, xb) = (va.data(), vb.data());
        let need_a = self.nodes[a.0].requires_grad;
        let need_b = self.nodes[b.0].requires_grad;
        let mut ga = vec![0.0; if need_a { na } else { 0 }];
        let mut gb = vec![0.0; if need_b { nb } else { 0 }];
        for (i, &gi) in g.data().iter().enumerate() {
            let (ia, ib) = (i % na, i % nb);
            if need_a {
                ga[ia] += gi * da(xa[ia], xb[ib]);
            }
            if need_b {
                gb[ib] += gi * db(xa[ia], xb[ib]);
            }
        }
        if need_a {
            let ga = Array::new(va.shape().to_vec(), ga).expect("shape preserved");
            self.accumulate(grads, a, ga);
        }
        if need_b {
            let gb = Array::new(vb.shape().to_vec(), gb).expect("shape preserved");
            self.accumulate(grads, b, gb);
        }
    }

    /// Gradient of an elementwise unary op; `d(x, y)` is the local derivative
    /// given input `x` and output `y`.
    fn unary_backward(
        &self,
        x: Var,
        y: &Array,
        g: &Array,
        grads: &mut [Option<Array>],
        d: impl Fn(f64, f64) -> f64,
    ) {
        let xv = &self.nodes[x.0].value;
        let data = xv
            .data()
            .iter()
            .zip(y.data())
            .zip(g.data())
            .map(|((&xi, &yi), &gi)| gi * d(xi, yi))
            .collect();
        let gx = Array::new(xv.shape().to_vec(), data).expect("shape preserved");
        self.accumulate(grads, x, gx);
    }

    fn propagate(&self, node: &Node, g: &Array, grads: &mut [Option<Array>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => self.binary_backward(*a, *b, g, grads, |_, _| 1.0, |_, _| 1.0),
            Op::Sub(a, b) => self.binary_backward(*a, *b, g, grads, |_, _| 1.0, |_, _| -1.0),
            Op::Mul(a, b) => self.binary_backward(*a, *b, g, grads, |_, y| y, |x, _| x),
            Op::Div(a, b) => {
                self.binary_backward(*a, *b, g, grads, |_, y| 1.0 / y, |x, y| -x / (y * y))
            }
            Op::HardClip(a, b) => self.binary_backward(
                *a,
                *b,
                g,
                grads,
                |x, b| if x.abs() < b { 1.0 } else { 0.0 },
                |x, b| if x.abs() >= b { x.signum() } else { 0.0 },
            ),
            Op::Neg(x) => self.unary_backward(*x, y, g, grads, |_, _| -1.0),
            Op::Square(x) => self.unary_backward(*x, y, g, grads, |x, _| 2.0 * x),
            Op::Exp(x) => self.unary_backward(*x, y, g, grads, |_, y| y),
            Op::Log(x) => self.unary_backward(*x, y, g, grads, |x, _| 1.0 / x),
            Op::Tanh(x) => self.unary_backward(*x, y, g, grads, |_, y| 1.0 - y * y),
            Op::Sigmoid(x) => self.unary_backward(*x, y, g, grads, |_, y| y * (1.0 - y)),
            Op::Relu(x) => {
                self.unary_backward(*x, y, g, grads, |x, _| if x > 0.0 { 1.0 } else { 0.0 })
            }
            Op::Softplus(x) => self.unary_backward(*x, y, g, grads, |x, _| sigmoid(x)),
            Op::Sin(x) => self.unary_backward(*x, y, g, grads, |x, _| x.cos()),
            Op::Cos(x) => self.unary_backward(*x, y, g, grads, |x, _| -x.sin()),
            Op::ClampMin0(x) => {
                self.unary_backward(*x, y, g, grads, |x, _| if x >= 0.0 { 1.0 } else { 0.0 })
            }
            Op::Clamp { x, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                self.unary_backward(*x, y, g, grads, move |x, _| {
                    if (lo..=hi).contains(&x) {
                        1.0
                    } else {
                        0.0
                    }
                })
            }
            Op::Scale(x, f) => {
                let f = *f;
                self.unary_backward(*x, y, g, grads, move |_, _| f)
            }
            Op::AddScalar(x) => self.unary_backward(*x, y, g, grads, |_, _| 1.0),
            Op::MatMul(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.nodes[a.0].requires_grad {
                    // dA = dC · Bᵀ
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, vb.data(), true, &mut ga);
                    self.accumulate(grads, *a, Array::new(vec![m, k], ga).expect("m×k"));
                }
                if self.nodes[b.0].requires_grad {
                    // dB = Aᵀ · dC
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, va.data(), true, g.data(), false, &mut gb);
                    self.accumulate(grads, *b, Array::new(vec![k, n], gb).expect("k×n"));
                }
            }
            Op::Sum(x) => {
                let s = self.nodes[x.0].value.shape();
                self.accumulate(grads, *x, Array::full(s, g.data()[0]));
            }
            Op::Mean(x) => {
                let xv = &self.nodes[x.0].value;
                let gx = Array::full(xv.shape(), g.data()[0] / xv.len() as f64);
                self.accumulate(grads, *x, gx);
            }
            Op::SumAxis { x, axis } => {
                let s = self.nodes[x.0].value.shape();
                let (outer, extent, inner) = axis_sizes(s, *axis);
                let mut gx = vec![0.0; outer * extent * inner];
                for o in 0..outer {
                    let src = &g.data()[o * inner..(o + 1) * inner];
                    for e in 0..extent {
                        gx[(o * extent + e) * inner..(o * extent + e + 1) * inner]
                            .copy_from_slice(src);
                    }
                }
                self.accumulate(grads, *x, Array::new(s.to_vec(), gx).expect("shape"));
            }
            Op::Reshape(x) => {
                let s = self.nodes[x.0].value.shape();
                let gx = g.clone().reshape(s).expect("reshape preserves size");
                self.accumulate(grads, *x, gx);
            }
            Op::Concat(xs) => {
                let total = *y.shape().last().unwrap();
                let rows = y.len() / total.max(1);
                let mut offset = 0;
                for &x in xs {
                    let s = self.nodes[x.0].value.shape();
                    let w = *s.last().unwrap();
                    if self.nodes[x.0].requires_grad {
                        let mut gx = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gx.extend_from_slice(
                                &g.data()[r * total + offset..r * total + offset + w],
                            );
                        }
                        self.accumulate(grads, x, Array::new(s.to_vec(), gx).expect("shape"));
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let v = &self.nodes[x.0].value;
                    let n = v.len();
                    if self.nodes[x.0].requires_grad {
                        let gx = g.data()[offset..offset + n].to_vec();
                        let gx = Array::new(v.shape().to_vec(), gx).expect("shape");
                        self.accumulate(grads, x, gx);
                    }
                    offset += n;
                }
            }
            Op::Slice { x, start, end } => {
                let s = self.nodes[x.0].value.shape();
                let w = *s.last().unwrap();
                let width = end - start;
                let mut gx = vec![0.0; self.nodes[x.0].value.len()];
                for (r, src) in g.data().chunks(width).enumerate() {
                    gx[r * w + start..r * w + end].copy_from_slice(src);
                }
                self.accumulate(grads, *x, Array::new(s.to_vec(), gx).expect("shape"));
            }
            Op::ExpandLast { x, k } => {
                let s = self.nodes[x.0].value.shape();
                let gx = g.data().chunks(*k).map(|c| c.iter().sum()).collect();
                self.accumulate(grads, *x, Array::new(s.to_vec(), gx).expect("shape"));
            }
            Op::CumsumExclusive(x) => {
                let s = self.nodes[x.0].value.shape();
                let w = *s.last().unwrap();
                let mut gx = vec![0.0; g.len()];
                for (src, dst) in g.data().chunks(w).zip(gx.chunks_mut(w)) {
                    let mut acc = 0.0;
                    for j in (0..w).rev() {
                        dst[j] = acc;
                        acc += src[j];
                    }
                }
                self.accumulate(grads, *x, Array::new(s.to_vec(), gx).expect("shape"));
            }
            Op::Gather { x, index } => {
                let s = self.nodes[x.0].value.shape();
                let mut gx = vec![0.0; self.nodes[x.0].value.len()];
                for (&i, &gi) in index.iter().zip(g.data()) {
                    gx[i] += gi;
                }
                self.accumulate(grads, *x, Array::new(s.to_vec(), gx).expect("shape"));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let b = labels.len();
                let c = probs.shape()[1];
                let scale = g.data()[0] / b as f64;
                let mut gx: Vec<f64> = probs.data().iter().map(|p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    gx[i * c + l] -= scale;
                }
                self.accumulate(grads, *logits, Array::new(vec![b, c], gx).expect("shape"));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(t: &mut Tape, v: f64) -> Var {
        t.param(Array::scalar(v))
    }

    #[test]
    fn square_by_mul() {
        let mut t = Tape::new();
        let x = scalar_param(&mut t, 3.0);
        let y = t.mul(x, x).unwrap();
        assert_eq!(t.value(y).item(), Some(9.0));
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), Some(6.0));
    }

    #[test]
    fn tanh_at_origin() {
        let mut t = Tape::new();
        let x = scalar_param(&mut t, 0.0);
        let y = t.tanh(x);
        assert_eq!(t.value(y).item(), Some(0.0));
        assert_eq!(t.backward(y).unwrap().get(x).unwrap().item(), Some(1.0));
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let a = t.constant(Array::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
        let i = t.constant(Array::eye(2));
        let c = t.matmul(a, i).unwrap();
        assert_eq!(t.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut t = Tape::new();
        let x = scalar_param(&mut t, 1.0);
        let xx = t.mul(x, x).unwrap();
        let y = t.add(xx, x).unwrap();
        assert_eq!(t.backward(y).unwrap().get(x).unwrap().item(), Some(3.0));
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut t = Tape::new();
        let x = t.param(Array::zeros(&[2]));
        assert!(matches!(t.backward(x), Err(DiffError::NonScalarRoot(_))));
    }

    #[test]
    fn shape_mismatch_names_primitive_and_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Array::zeros(&[2, 3]));
        let b = t.constant(Array::zeros(&[2]));
        let err = t.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("add") && msg.contains("[2, 3]") && msg.contains("[2]"),
            "{msg}"
        );
        let m = t.matmul(a, a).unwrap_err();
        assert!(m.to_string().contains("matmul"));
    }

    #[test]
    fn log_domain_rejected() {
        let mut t = Tape::new();
        let x = t.constant(Array::vector(vec![1.0, 0.0]));
        assert!(matches!(t.log(x), Err(DiffError::Domain { op: "log", .. })));
    }

    #[test]
    fn suffix_broadcast_reduces_gradient() {
        let mut t = Tape::new();
        let a = t.param(Array::new(vec![2, 3], vec![1.0; 6]).unwrap());
        let b = t.param(Array::vector(vec![1.0, 2.0, 3.0]));
        let c = t.mul(a, b).unwrap();
        let s = t.sum(c);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(b).unwrap().data(), &[2.0, 2.0, 2.0]);
        assert_eq!(g.get(a).unwrap().data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn leading_broadcast_is_rejected() {
        let mut t = Tape::new();
        let a = t.constant(Array::zeros(&[2, 3]));
        let b = t.constant(Array::zeros(&[2, 1]));
        assert!(t.mul(a, b).is_err());
    }

    #[test]
    fn unused_param_gets_zero_gradient() {
        let mut t = Tape::new();
        let x = scalar_param(&mut t, 2.0);
        let unused = t.param(Array::zeros(&[3]));
        let y = t.square(x);
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(unused).unwrap().data(), &[0.0, 0.0, 0.0]);
        assert_eq!(g.len(), 2);
    }

    #[test]
    fn inputs_precede_outputs() {
        let mut t = Tape::new();
        let x = t.param(Array::vector(vec![0.1, 0.2]));
        let y = t.sin(x);
        let z = t.mul(y, x).unwrap();
        let s = t.sum(z);
        for v in [y, z, s] {
            assert!(t.inputs(v).iter().all(|i| i.id() < v.id()));
        }
    }

    #[test]
    fn cumsum_exclusive_values() {
        let mut t = Tape::new();
        let x = t.constant(Array::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let c = t.cumsum_exclusive(x).unwrap();
        assert_eq!(t.value(c).data(), &[0.0, 1.0, 3.0, 0.0, 4.0, 9.0]);
    }

    #[test]
    fn hard_clip_gradient_vanishes_when_saturated() {
        let mut t = Tape::new();
        let x = t.param(Array::vector(vec![3.0, 0.5, -3.0]));
        let b = t.constant(Array::scalar(1.0));
        let y = t.hard_clip(x, b).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, 0.5, -1.0]);
        let s = t.sum(y);
        assert_eq!(
            t.backward(s).unwrap().get(x).unwrap().data(),
            &[0.0, 1.0, 0.0]
        );
    }

    #[test]
    fn softmax_cross_entropy_uniform() {
        let mut t = Tape::new();
        let z = t.param(Array::zeros(&[1, 4]));
        let l = t.softmax_cross_entropy(z, &[2]).unwrap();
        assert!((t.value(l).item().unwrap() - 4f64.ln()).abs() < 1e-15);
        assert!(t.softmax_cross_entropy(z, &[4]).is_err());
    }
}
