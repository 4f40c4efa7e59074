//! Dense tensors with tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation performed on its [`Var`] handles during
//! a forward pass. Calling [`Tape::backward`] on a scalar result walks the
//! recorded operations once, in reverse, and accumulates gradients for every
//! leaf created with `requires_grad`. Tapes are rebuilt per forward pass and
//! are single-threaded; independent tapes may run concurrently over shared
//! read-only parameter tensors.
//!
//! All values are `f64`. Gradient correctness is checked against central
//! finite differences in `gradcheck`.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

/// Probability floor inside the cross-entropy loss.
pub const CROSS_ENTROPY_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    BadAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    NonFinite {
        op: &'static str,
    },
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    NonScalarRoot {
        numel: usize,
    },
    LengthMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            TensorError::BadAxis { op, axis, shape } => {
                write!(f, "{op}: axis {axis} invalid for shape {shape:?}")
            }
            TensorError::NonFinite { op } => write!(f, "{op}: non-finite input"),
            TensorError::IndexOutOfRange { op, index, bound } => {
                write!(f, "{op}: index {index} out of range 0..{bound}")
            }
            TensorError::NonScalarRoot { numel } => {
                write!(f, "backward: root must be scalar, has {numel} elements")
            }
            TensorError::LengthMismatch { op, expected, got } => {
                write!(f, "{op}: expected length {expected}, got {got}")
            }
        }
    }
}

impl std::error::Error for TensorError {}

/// A dense row-major tensor value with no gradient tracking.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::LengthMismatch {
                op: "Tensor::new",
                expected: numel,
                got: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Tensor {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    /// A rank-0 scalar.
    pub fn scalar(value: f64) -> Tensor {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ReduceKind {
    Max,
    Mean,
    Sum,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        trans_b: bool,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Div {
        a: usize,
        b: usize,
    },
    Relu {
        a: usize,
    },
    Exp {
        a: usize,
    },
    Scale {
        a: usize,
        factor: f64,
    },
    Softmax {
        a: usize,
        axis: usize,
    },
    Reduce {
        a: usize,
        axis: usize,
        kind: ReduceKind,
        // flat argmax position within the axis, one per output slot (max only)
        arg: Vec<usize>,
    },
    SumAll {
        a: usize,
    },
    GatherRows {
        a: usize,
        rows: Vec<usize>,
    },
    ScatterAddRows {
        dst: usize,
        src: usize,
        rows: Vec<usize>,
    },
    LayerNorm {
        a: usize,
        gain: usize,
        bias: usize,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Reshape {
        a: usize,
    },
    SwapAxes {
        a: usize,
        ax0: usize,
        ax1: usize,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    needs_grad: bool,
    requires_grad: bool, // leaves only
    op: Op,
}

struct TapeInner {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

/// Records operations for one forward pass. Cheap to clone (shared handle).
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// A handle to one tensor on a tape.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                grads: Vec::new(),
            })),
        }
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable leaf.
    pub fn var(&self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// A non-differentiable leaf.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            shape: value.shape,
            data: value.data,
            needs_grad: requires_grad,
            requires_grad,
            op: Op::Leaf,
        });
        inner.grads.push(None);
        Var {
            tape: self.clone(),
            id,
        }
    }

    fn push_node(&self, shape: Vec<usize>, data: Vec<f64>, needs_grad: bool, op: Op) -> Var {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            shape,
            data,
            needs_grad,
            requires_grad: false,
            op,
        });
        inner.grads.push(None);
        Var {
            tape: self.clone(),
            id,
        }
    }

    /// Gradient of the most recent `backward` call with respect to `v`.
    /// `None` for constants and for vars never touched by a backward pass.
    pub fn grad(&self, v: &Var) -> Option<Tensor> {
        assert!(Rc::ptr_eq(&self.inner, &v.tape.inner), "var from another tape");
        let inner = self.inner.borrow();
        inner.grads[v.id].as_ref().map(|g| Tensor {
            shape: inner.nodes[v.id].shape.clone(),
            data: g.clone(),
        })
    }

    /// Reverse pass from a scalar root. Visits every recorded operation
    /// exactly once, newest to oldest; deterministic.
    pub fn backward(&self, root: &Var) -> Result<(), TensorError> {
        assert!(Rc::ptr_eq(&self.inner, &root.tape.inner), "var from another tape");
        let mut inner = self.inner.borrow_mut();
        let inner = &mut *inner;
        if inner.nodes[root.id].data.len() != 1 {
            return Err(TensorError::NonScalarRoot {
                numel: inner.nodes[root.id].data.len(),
            });
        }
        for g in inner.grads.iter_mut() {
            *g = None;
        }
        inner.grads[root.id] = Some(vec![1.0]);

        for id in (0..=root.id).rev() {
            if !inner.nodes[id].needs_grad {
                continue;
            }
            let go = match inner.grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            backward_op(inner, id, &go);
            inner.grads[id] = Some(go);
        }

        // Requires-grad leaves never reached by the root still report a
        // (zero) gradient.
        for id in 0..inner.nodes.len() {
            if inner.nodes[id].requires_grad && inner.grads[id].is_none() {
                inner.grads[id] = Some(vec![0.0; inner.nodes[id].data.len()]);
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, delta: &[f64]) {
    if !nodes[id].needs_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].data.len()]);
    for (g, d) in slot.iter_mut().zip(delta.iter()) {
        *g += d;
    }
}

impl Var {
    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.inner.borrow().nodes[self.id].data.len()
    }

    pub fn value(&self) -> Tensor {
        let inner = self.tape.inner.borrow();
        Tensor {
            shape: inner.nodes[self.id].shape.clone(),
            data: inner.nodes[self.id].data.clone(),
        }
    }

    pub fn item(&self) -> f64 {
        let inner = self.tape.inner.borrow();
        assert_eq!(inner.nodes[self.id].data.len(), 1, "item() on non-scalar var");
        inner.nodes[self.id].data[0]
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(self)
    }

    fn same_tape(&self, other: &Var) {
        assert!(
            Rc::ptr_eq(&self.tape.inner, &other.tape.inner),
            "vars from different tapes"
        );
    }

    fn with<R>(&self, f: impl FnOnce(&[usize], &[f64]) -> R) -> R {
        let inner = self.tape.inner.borrow();
        let n = &inner.nodes[self.id];
        f(&n.shape, &n.data)
    }

    fn needs_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].needs_grad
    }

    // ── binary elementwise ──────────────────────────────────────────────

    fn binary(
        &self,
        rhs: &Var,
        op_name: &'static str,
        make_op: impl FnOnce(usize, usize) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var, TensorError> {
        self.same_tape(rhs);
        let (out_shape, data) = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id];
            let b = &inner.nodes[rhs.id];
            let out_shape = broadcast_shapes(&a.shape, &b.shape).ok_or_else(|| {
                TensorError::ShapeMismatch {
                    op: op_name,
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                }
            })?;
            let data = broadcast_zip(&a.data, &a.shape, &b.data, &b.shape, &out_shape, &f);
            (out_shape, data)
        };
        let needs = self.needs_grad() || rhs.needs_grad();
        Ok(self
            .tape
            .push_node(out_shape, data, needs, make_op(self.id, rhs.id)))
    }

    pub fn add(&self, rhs: &Var) -> Result<Var, TensorError> {
        self.binary(rhs, "add", |a, b| Op::Add { a, b }, |x, y| x + y)
    }

    pub fn sub(&self, rhs: &Var) -> Result<Var, TensorError> {
        self.binary(rhs, "sub", |a, b| Op::Sub { a, b }, |x, y| x - y)
    }

    pub fn mul(&self, rhs: &Var) -> Result<Var, TensorError> {
        self.binary(rhs, "mul", |a, b| Op::Mul { a, b }, |x, y| x * y)
    }

    pub fn div(&self, rhs: &Var) -> Result<Var, TensorError> {
        self.binary(rhs, "div", |a, b| Op::Div { a, b }, |x, y| x / y)
    }

    // ── unary ───────────────────────────────────────────────────────────

    pub fn relu(&self) -> Var {
        let (shape, data) = self.with(|s, d| {
            (s.to_vec(), d.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect())
        });
        self.tape
            .push_node(shape, data, self.needs_grad(), Op::Relu { a: self.id })
    }

    pub fn exp(&self) -> Var {
        let (shape, data) = self.with(|s, d| (s.to_vec(), d.iter().map(|x| x.exp()).collect()));
        self.tape
            .push_node(shape, data, self.needs_grad(), Op::Exp { a: self.id })
    }

    pub fn scale(&self, factor: f64) -> Var {
        let (shape, data) = self.with(|s, d| (s.to_vec(), d.iter().map(|x| x * factor).collect()));
        self.tape.push_node(
            shape,
            data,
            self.needs_grad(),
            Op::Scale {
                a: self.id,
                factor,
            },
        )
    }

    // ── matmul ──────────────────────────────────────────────────────────

    /// Batched matrix product `a · b`. Trailing two axes are the matrix
    /// dimensions; leading batch axes broadcast where one side has extent 1
    /// (a rank-2 operand broadcasts over the whole batch).
    pub fn matmul(&self, rhs: &Var) -> Result<Var, TensorError> {
        self.matmul_impl(rhs, false)
    }

    /// `a · bᵀ` with the transpose applied to the trailing two axes of `b`.
    pub fn matmul_nt(&self, rhs: &Var) -> Result<Var, TensorError> {
        self.matmul_impl(rhs, true)
    }

    fn matmul_impl(&self, rhs: &Var, trans_b: bool) -> Result<Var, TensorError> {
        self.same_tape(rhs);
        let (out_shape, data) = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id];
            let b = &inner.nodes[rhs.id];
            batched_matmul(&a.data, &a.shape, &b.data, &b.shape, trans_b).ok_or_else(|| {
                TensorError::ShapeMismatch {
                    op: "matmul",
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                }
            })?
        };
        let needs = self.needs_grad() || rhs.needs_grad();
        Ok(self.tape.push_node(
            out_shape,
            data,
            needs,
            Op::MatMul {
                a: self.id,
                b: rhs.id,
                trans_b,
            },
        ))
    }

    // ── softmax ─────────────────────────────────────────────────────────

    /// Numerically stable softmax along `axis`. Errors on non-finite input.
    pub fn softmax(&self, axis: usize) -> Result<Var, TensorError> {
        let (shape, data) = {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.id];
            if axis >= n.shape.len() || n.shape[axis] == 0 {
                return Err(TensorError::BadAxis {
                    op: "softmax",
                    axis,
                    shape: n.shape.clone(),
                });
            }
            if !n.data.iter().all(|v| v.is_finite()) {
                return Err(TensorError::NonFinite { op: "softmax" });
            }
            let mut out = n.data.clone();
            let (outer, len, inner_sz) = axis_split(&n.shape, axis);
            for o in 0..outer {
                for i in 0..inner_sz {
                    let base = o * len * inner_sz + i;
                    let mut max = f64::NEG_INFINITY;
                    for a in 0..len {
                        max = max.max(out[base + a * inner_sz]);
                    }
                    let mut sum = 0.0;
                    for a in 0..len {
                        let e = (out[base + a * inner_sz] - max).exp();
                        out[base + a * inner_sz] = e;
                        sum += e;
                    }
                    for a in 0..len {
                        out[base + a * inner_sz] /= sum;
                    }
                }
            }
            (n.shape.clone(), out)
        };
        Ok(self.tape.push_node(
            shape,
            data,
            self.needs_grad(),
            Op::Softmax { a: self.id, axis },
        ))
    }

    // ── reductions ──────────────────────────────────────────────────────

    pub fn reduce_max(&self, axis: usize) -> Result<Var, TensorError> {
        self.reduce(axis, ReduceKind::Max)
    }

    pub fn reduce_mean(&self, axis: usize) -> Result<Var, TensorError> {
        self.reduce(axis, ReduceKind::Mean)
    }

    pub fn reduce_sum(&self, axis: usize) -> Result<Var, TensorError> {
        self.reduce(axis, ReduceKind::Sum)
    }

    fn reduce(&self, axis: usize, kind: ReduceKind) -> Result<Var, TensorError> {
        let (out_shape, data, arg) = {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.id];
            if axis >= n.shape.len() || n.shape[axis] == 0 {
                return Err(TensorError::BadAxis {
                    op: "reduce",
                    axis,
                    shape: n.shape.clone(),
                });
            }
            let (outer, len, inner_sz) = axis_split(&n.shape, axis);
            let mut out_shape = n.shape.clone();
            out_shape.remove(axis);
            let mut out = vec![0.0; outer * inner_sz];
            let mut arg = Vec::new();
            if kind == ReduceKind::Max {
                arg = vec![0usize; outer * inner_sz];
            }
            for o in 0..outer {
                for i in 0..inner_sz {
                    let base = o * len * inner_sz + i;
                    let slot = o * inner_sz + i;
                    match kind {
                        ReduceKind::Sum | ReduceKind::Mean => {
                            let mut s = 0.0;
                            for a in 0..len {
                                s += n.data[base + a * inner_sz];
                            }
                            out[slot] = if kind == ReduceKind::Mean {
                                s / len as f64
                            } else {
                                s
                            };
                        }
                        ReduceKind::Max => {
                            // ties go to the lowest index
                            let mut best = n.data[base];
                            let mut best_a = 0;
                            for a in 1..len {
                                let v = n.data[base + a * inner_sz];
                                if v > best {
                                    best = v;
                                    best_a = a;
                                }
                            }
                            out[slot] = best;
                            arg[slot] = best_a;
                        }
                    }
                }
            }
            (out_shape, out, arg)
        };
        Ok(self.tape.push_node(
            out_shape,
            data,
            self.needs_grad(),
            Op::Reduce {
                a: self.id,
                axis,
                kind,
                arg,
            },
        ))
    }

    /// Sum of every element, as a rank-0 scalar.
    pub fn sum_all(&self) -> Var {
        let total = self.with(|_, d| d.iter().sum());
        self.tape.push_node(
            vec![],
            vec![total],
            self.needs_grad(),
            Op::SumAll { a: self.id },
        )
    }

    // ── indexing ────────────────────────────────────────────────────────

    /// Select rows of a 2-D tensor; `out[i] = self[rows[i]]`.
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Var, TensorError> {
        let (cols, data) = {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.id];
            if n.shape.len() != 2 {
                return Err(TensorError::ShapeMismatch {
                    op: "gather_rows",
                    lhs: n.shape.clone(),
                    rhs: vec![],
                });
            }
            let (rows_in, cols) = (n.shape[0], n.shape[1]);
            let mut data = Vec::with_capacity(rows.len() * cols);
            for &r in rows {
                if r >= rows_in {
                    return Err(TensorError::IndexOutOfRange {
                        op: "gather_rows",
                        index: r,
                        bound: rows_in,
                    });
                }
                data.extend_from_slice(&n.data[r * cols..(r + 1) * cols]);
            }
            (cols, data)
        };
        Ok(self.tape.push_node(
            vec![rows.len(), cols],
            data,
            self.needs_grad(),
            Op::GatherRows {
                a: self.id,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Row accumulation: `out = self` then `out[rows[i]] += src[i]`.
    pub fn scatter_add_rows(&self, rows: &[usize], src: &Var) -> Result<Var, TensorError> {
        self.same_tape(src);
        let (shape, data) = {
            let inner = self.tape.inner.borrow();
            let dst = &inner.nodes[self.id];
            let s = &inner.nodes[src.id];
            if dst.shape.len() != 2 || s.shape.len() != 2 || dst.shape[1] != s.shape[1] {
                return Err(TensorError::ShapeMismatch {
                    op: "scatter_add_rows",
                    lhs: dst.shape.clone(),
                    rhs: s.shape.clone(),
                });
            }
            if rows.len() != s.shape[0] {
                return Err(TensorError::LengthMismatch {
                    op: "scatter_add_rows",
                    expected: s.shape[0],
                    got: rows.len(),
                });
            }
            let cols = dst.shape[1];
            let mut data = dst.data.clone();
            for (i, &r) in rows.iter().enumerate() {
                if r >= dst.shape[0] {
                    return Err(TensorError::IndexOutOfRange {
                        op: "scatter_add_rows",
                        index: r,
                        bound: dst.shape[0],
                    });
                }
                for c in 0..cols {
                    data[r * cols + c] += s.data[i * cols + c];
                }
            }
            (dst.shape.clone(), data)
        };
        let needs = self.needs_grad() || src.needs_grad();
        Ok(self.tape.push_node(
            shape,
            data,
            needs,
            Op::ScatterAddRows {
                dst: self.id,
                src: src.id,
                rows: rows.to_vec(),
            },
        ))
    }

    // ── normalization and loss ──────────────────────────────────────────

    /// Layer normalization over the last axis, then affine `gain`/`bias`.
    pub fn layer_norm(&self, gain: &Var, bias: &Var, eps: f64) -> Result<Var, TensorError> {
        self.same_tape(gain);
        self.same_tape(bias);
        let (shape, data, mean, inv_std) = {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.id];
            let g = &inner.nodes[gain.id];
            let b = &inner.nodes[bias.id];
            let d = *n.shape.last().ok_or(TensorError::BadAxis {
                op: "layer_norm",
                axis: 0,
                shape: n.shape.clone(),
            })?;
            if d == 0 || g.shape != [d] || b.shape != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: n.shape.clone(),
                    rhs: g.shape.clone(),
                });
            }
            let slices = n.data.len() / d;
            let mut out = vec![0.0; n.data.len()];
            let mut mean = vec![0.0; slices];
            let mut inv_std = vec![0.0; slices];
            for s in 0..slices {
                let x = &n.data[s * d..(s + 1) * d];
                let mu = x.iter().sum::<f64>() / d as f64;
                let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + eps).sqrt();
                mean[s] = mu;
                inv_std[s] = inv;
                for j in 0..d {
                    out[s * d + j] = (x[j] - mu) * inv * g.data[j] + b.data[j];
                }
            }
            (n.shape.clone(), out, mean, inv_std)
        };
        let needs = self.needs_grad() || gain.needs_grad() || bias.needs_grad();
        Ok(self.tape.push_node(
            shape,
            data,
            needs,
            Op::LayerNorm {
                a: self.id,
                gain: gain.id,
                bias: bias.id,
                mean,
                inv_std,
            },
        ))
    }

    /// Mean of `−log softmax(logits)[label]` over rows, with the probability
    /// clamped at 1e-12. Returns a rank-0 scalar.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Var, TensorError> {
        let (loss, probs) = {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.id];
            if n.shape.len() != 2 {
                return Err(TensorError::ShapeMismatch {
                    op: "cross_entropy",
                    lhs: n.shape.clone(),
                    rhs: vec![],
                });
            }
            let (rows, classes) = (n.shape[0], n.shape[1]);
            if labels.len() != rows {
                return Err(TensorError::LengthMismatch {
                    op: "cross_entropy",
                    expected: rows,
                    got: labels.len(),
                });
            }
            let mut probs = vec![0.0; rows * classes];
            let mut total = 0.0;
            for r in 0..rows {
                let label = labels[r];
                if label >= classes {
                    return Err(TensorError::IndexOutOfRange {
                        op: "cross_entropy",
                        index: label,
                        bound: classes,
                    });
                }
                let row = &n.data[r * classes..(r + 1) * classes];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for c in 0..classes {
                    let e = (row[c] - max).exp();
                    probs[r * classes + c] = e;
                    sum += e;
                }
                for c in 0..classes {
                    probs[r * classes + c] /= sum;
                }
                total += -(probs[r * classes + label].max(CROSS_ENTROPY_CLAMP)).ln();
            }
            (total / rows as f64, probs)
        };
        Ok(self.tape.push_node(
            vec![],
            vec![loss],
            self.needs_grad(),
            Op::CrossEntropy {
                logits: self.id,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    // ── shape ───────────────────────────────────────────────────────────

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Var, TensorError> {
        let data = {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.id];
            let numel: usize = shape.iter().product();
            if numel != n.data.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "reshape",
                    lhs: n.shape.clone(),
                    rhs: shape.clone(),
                });
            }
            n.data.clone()
        };
        Ok(self
            .tape
            .push_node(shape, data, self.needs_grad(), Op::Reshape { a: self.id }))
    }

    pub fn swap_axes(&self, ax0: usize, ax1: usize) -> Result<Var, TensorError> {
        let (shape, data) = {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.id];
            if ax0 >= n.shape.len() || ax1 >= n.shape.len() {
                return Err(TensorError::BadAxis {
                    op: "swap_axes",
                    axis: ax0.max(ax1),
                    shape: n.shape.clone(),
                });
            }
            (
                swapped_shape(&n.shape, ax0, ax1),
                swap_axes_data(&n.data, &n.shape, ax0, ax1),
            )
        };
        Ok(self.tape.push_node(
            shape,
            data,
            self.needs_grad(),
            Op::SwapAxes {
                a: self.id,
                ax0,
                ax1,
            },
        ))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Var], axis: usize) -> Result<Var, TensorError> {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let tape = parts[0].tape.clone();
        for p in parts[1..].iter() {
            parts[0].same_tape(p);
        }
        let (out_shape, data) = {
            let inner = tape.inner.borrow();
            let first = &inner.nodes[parts[0].id];
            if axis >= first.shape.len() {
                return Err(TensorError::BadAxis {
                    op: "concat",
                    axis,
                    shape: first.shape.clone(),
                });
            }
            let mut out_shape = first.shape.clone();
            let mut axis_total = 0;
            for p in parts {
                let sh = &inner.nodes[p.id].shape;
                if sh.len() != out_shape.len()
                    || sh
                        .iter()
                        .enumerate()
                        .any(|(i, &e)| i != axis && e != out_shape[i])
                {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat",
                        lhs: out_shape.clone(),
                        rhs: sh.clone(),
                    });
                }
                axis_total += sh[axis];
            }
            out_shape[axis] = axis_total;
            let outer: usize = out_shape[..axis].iter().product();
            let inner_sz: usize = out_shape[axis + 1..].iter().product();
            let mut data = Vec::with_capacity(out_shape.iter().product());
            for o in 0..outer {
                for p in parts {
                    let n = &inner.nodes[p.id];
                    let len = n.shape[axis] * inner_sz;
                    data.extend_from_slice(&n.data[o * len..(o + 1) * len]);
                }
            }
            (out_shape, data)
        };
        let needs = parts.iter().any(|p| p.needs_grad());
        Ok(tape.push_node(
            out_shape,
            data,
            needs,
            Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
                axis,
            },
        ))
    }
}

// ── backward rules ──────────────────────────────────────────────────────

fn backward_op(inner: &mut TapeInner, id: usize, go: &[f64]) {
    // Split borrows: reading node data while writing grads is safe because
    // grads and nodes are separate vecs.
    let nodes = &inner.nodes;
    let grads = &mut inner.grads;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::MatMul { a, b, trans_b } => {
            matmul_backward(nodes, grads, id, *a, *b, *trans_b, go);
        }
        Op::Add { a, b } => {
            let out_shape = &nodes[id].shape;
            for &(src, sign) in [(*a, 1.0), (*b, 1.0f64)].iter() {
                let _ = sign;
                if nodes[src].needs_grad {
                    let d = reduce_to_shape(go, out_shape, &nodes[src].shape);
                    accumulate(grads, nodes, src, &d);
                }
            }
        }
        Op::Sub { a, b } => {
            let out_shape = &nodes[id].shape;
            if nodes[*a].needs_grad {
                let d = reduce_to_shape(go, out_shape, &nodes[*a].shape);
                accumulate(grads, nodes, *a, &d);
            }
            if nodes[*b].needs_grad {
                let mut d = reduce_to_shape(go, out_shape, &nodes[*b].shape);
                for v in d.iter_mut() {
                    *v = -*v;
                }
                accumulate(grads, nodes, *b, &d);
            }
        }
        Op::Mul { a, b } => {
            let out_shape = nodes[id].shape.clone();
            let (a, b) = (*a, *b);
            if nodes[a].needs_grad {
                let rhs = broadcast_zip(
                    go,
                    &out_shape,
                    &nodes[b].data,
                    &nodes[b].shape,
                    &out_shape,
                    &|g, y| g * y,
                );
                let d = reduce_to_shape(&rhs, &out_shape, &nodes[a].shape);
                accumulate(grads, nodes, a, &d);
            }
            if nodes[b].needs_grad {
                let lhs = broadcast_zip(
                    go,
                    &out_shape,
                    &nodes[a].data,
                    &nodes[a].shape,
                    &out_shape,
                    &|g, x| g * x,
                );
                let d = reduce_to_shape(&lhs, &out_shape, &nodes[b].shape);
                accumulate(grads, nodes, b, &d);
            }
        }
        Op::Div { a, b } => {
            let out_shape = nodes[id].shape.clone();
            let (a, b) = (*a, *b);
            if nodes[a].needs_grad {
                let d_full = broadcast_zip(
                    go,
                    &out_shape,
                    &nodes[b].data,
                    &nodes[b].shape,
                    &out_shape,
                    &|g, y| g / y,
                );
                let d = reduce_to_shape(&d_full, &out_shape, &nodes[a].shape);
                accumulate(grads, nodes, a, &d);
            }
            if nodes[b].needs_grad {
                // d/dy (x/y) = -x/y² ; use out = x/y to avoid recomputing x/y
                let gy = broadcast_zip(
                    go,
                    &out_shape,
                    &nodes[id].data,
                    &out_shape,
                    &out_shape,
                    &|g, o| g * o,
                );
                let d_full = broadcast_zip(
                    &gy,
                    &out_shape,
                    &nodes[b].data,
                    &nodes[b].shape,
                    &out_shape,
                    &|v, y| -v / y,
                );
                let d = reduce_to_shape(&d_full, &out_shape, &nodes[b].shape);
                accumulate(grads, nodes, b, &d);
            }
        }
        Op::Relu { a } => {
            if nodes[*a].needs_grad {
                let d: Vec<f64> = nodes[*a]
                    .data
                    .iter()
                    .zip(go.iter())
                    .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                accumulate(grads, nodes, *a, &d);
            }
        }
        Op::Exp { a } => {
            if nodes[*a].needs_grad {
                let d: Vec<f64> = nodes[id]
                    .data
                    .iter()
                    .zip(go.iter())
                    .map(|(&o, &g)| o * g)
                    .collect();
                accumulate(grads, nodes, *a, &d);
            }
        }
        Op::Scale { a, factor } => {
            if nodes[*a].needs_grad {
                let d: Vec<f64> = go.iter().map(|&g| g * factor).collect();
                accumulate(grads, nodes, *a, &d);
            }
        }
        Op::Softmax { a, axis } => {
            if nodes[*a].needs_grad {
                let s = &nodes[id].data;
                let (outer, len, inner_sz) = axis_split(&nodes[id].shape, *axis);
                let mut d = vec![0.0; s.len()];
                for o in 0..outer {
                    for i in 0..inner_sz {
                        let base = o * len * inner_sz + i;
                        let mut dot = 0.0;
                        for k in 0..len {
                            let idx = base + k * inner_sz;
                            dot += go[idx] * s[idx];
                        }
                        for k in 0..len {
                            let idx = base + k * inner_sz;
                            d[idx] = s[idx] * (go[idx] - dot);
                        }
                    }
                }
                accumulate(grads, nodes, *a, &d);
            }
        }
        Op::Reduce {
            a,
            axis,
            kind,
            arg,
        } => {
            if nodes[*a].needs_grad {
                let (outer, len, inner_sz) = axis_split(&nodes[*a].shape, *axis);
                let mut d = vec![0.0; nodes[*a].data.len()];
                for o in 0..outer {
                    for i in 0..inner_sz {
                        let base = o * len * inner_sz + i;
                        let slot = o * inner_sz + i;
                        match kind {
                            ReduceKind::Sum => {
                                for k in 0..len {
                                    d[base + k * inner_sz] += go[slot];
                                }
                            }
                            ReduceKind::Mean => {
                                let w = go[slot] / len as f64;
                                for k in 0..len {
                                    d[base + k * inner_sz] += w;
                                }
                            }
                            ReduceKind::Max => {
                                d[base + arg[slot] * inner_sz] += go[slot];
                            }
                        }
                    }
                }
                accumulate(grads, nodes, *a, &d);
            }
        }
        Op::SumAll { a } => {
            if nodes[*a].needs_grad {
                let d = vec![go[0]; nodes[*a].data.len()];
                accumulate(grads, nodes, *a, &d);
            }
        }
        Op::GatherRows { a, rows } => {
            if nodes[*a].needs_grad {
                let cols = nodes[*a].shape[1];
                let mut d = vec![0.0; nodes[*a].data.len()];
                for (i, &r) in rows.iter().enumerate() {
                    for c in 0..cols {
                        d[r * cols + c] += go[i * cols + c];
                    }
                }
                accumulate(grads, nodes, *a, &d);
            }
        }
        Op::ScatterAddRows { dst, src, rows } => {
            if nodes[*dst].needs_grad {
                accumulate(grads, nodes, *dst, go);
            }
            if nodes[*src].needs_grad {
                let cols = nodes[*src].shape[1];
                let mut d = vec![0.0; nodes[*src].data.len()];
                for (i, &r) in rows.iter().enumerate() {
                    for c in 0..cols {
                        d[i * cols + c] = go[r * cols + c];
                    }
                }
                accumulate(grads, nodes, *src, &d);
            }
        }
        Op::LayerNorm {
            a,
            gain,
            bias,
            mean,
            inv_std,
        } => {
            let d = *nodes[*a].shape.last().unwrap();
            let slices = nodes[*a].data.len() / d;
            let x = &nodes[*a].data;
            let g = &nodes[*gain].data;
            if nodes[*a].needs_grad {
                let mut dx = vec![0.0; x.len()];
                for s in 0..slices {
                    let inv = inv_std[s];
                    let mu = mean[s];
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..d {
                        let xhat = (x[s * d + j] - mu) * inv;
                        let dxhat = go[s * d + j] * g[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    let dn = d as f64;
                    for j in 0..d {
                        let xhat = (x[s * d + j] - mu) * inv;
                        let dxhat = go[s * d + j] * g[j];
                        dx[s * d + j] =
                            inv * (dxhat - sum_dxhat / dn - xhat * sum_dxhat_xhat / dn);
                    }
                }
                accumulate(grads, nodes, *a, &dx);
            }
            if nodes[*gain].needs_grad {
                let mut dg = vec![0.0; d];
                for s in 0..slices {
                    let inv = inv_std[s];
                    let mu = mean[s];
                    for j in 0..d {
                        dg[j] += go[s * d + j] * (x[s * d + j] - mu) * inv;
                    }
                }
                accumulate(grads, nodes, *gain, &dg);
            }
            if nodes[*bias].needs_grad {
                let mut db = vec![0.0; d];
                for s in 0..slices {
                    for j in 0..d {
                        db[j] += go[s * d + j];
                    }
                }
                accumulate(grads, nodes, *bias, &db);
            }
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            if nodes[*logits].needs_grad {
                let classes = nodes[*logits].shape[1];
                let rows = labels.len();
                let mut d = vec![0.0; rows * classes];
                let w = go[0] / rows as f64;
                for r in 0..rows {
                    let p_true = probs[r * classes + labels[r]];
                    if p_true <= CROSS_ENTROPY_CLAMP {
                        continue; // clamped region: the loss is locally constant
                    }
                    for c in 0..classes {
                        let delta = if c == labels[r] { 1.0 } else { 0.0 };
                        d[r * classes + c] = w * (probs[r * classes + c] - delta);
                    }
                }
                accumulate(grads, nodes, *logits, &d);
            }
        }
        Op::Reshape { a } => {
            if nodes[*a].needs_grad {
                accumulate(grads, nodes, *a, go);
            }
        }
        Op::SwapAxes { a, ax0, ax1 } => {
            if nodes[*a].needs_grad {
                let d = swap_axes_data(go, &nodes[id].shape, *ax0, *ax1);
                accumulate(grads, nodes, *a, &d);
            }
        }
        Op::Concat { parts, axis } => {
            let out_shape = &nodes[id].shape;
            let outer: usize = out_shape[..*axis].iter().product();
            let inner_sz: usize = out_shape[*axis + 1..].iter().product();
            let mut offset = 0;
            let stride_out = out_shape[*axis] * inner_sz;
            for &p in parts {
                let len = nodes[p].shape[*axis] * inner_sz;
                if nodes[p].needs_grad {
                    let mut d = vec![0.0; nodes[p].data.len()];
                    for o in 0..outer {
                        d[o * len..(o + 1) * len]
                            .copy_from_slice(&go[o * stride_out + offset..o * stride_out + offset + len]);
                    }
                    accumulate(grads, nodes, p, &d);
                }
                offset += len;
            }
        }
    }
}

fn matmul_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    out: usize,
    a: usize,
    b: usize,
    trans_b: bool,
    go: &[f64],
) {
    let a_shape = &nodes[a].shape;
    let b_shape = &nodes[b].shape;
    let out_shape = &nodes[out].shape;
    let (m, k) = (a_shape[a_shape.len() - 2], a_shape[a_shape.len() - 1]);
    let n = out_shape[out_shape.len() - 1];
    let batch = &out_shape[..out_shape.len() - 2];
    let a_batch = &a_shape[..a_shape.len() - 2];
    let b_batch = &b_shape[..b_shape.len() - 2];

    let need_a = nodes[a].needs_grad;
    let need_b = nodes[b].needs_grad;
    let mut da = if need_a {
        vec![0.0; nodes[a].data.len()]
    } else {
        Vec::new()
    };
    let mut db = if need_b {
        vec![0.0; nodes[b].data.len()]
    } else {
        Vec::new()
    };

    let a_data = &nodes[a].data;
    let b_data = &nodes[b].data;
    let count: usize = batch.iter().product();

    // mirror of the forward fast path: shared rank-2 rhs
    if b_batch.is_empty() && a_batch.iter().product::<usize>() == count {
        let rows = count * m;
        if trans_b {
            if need_a {
                mm_nn(go, b_data, &mut da, rows, n, k);
            }
            if need_b {
                mm_tn(go, a_data, &mut db, rows, n, k);
            }
        } else {
            if need_a {
                mm_nt(go, b_data, &mut da, rows, k, n);
            }
            if need_b {
                mm_tn(a_data, go, &mut db, rows, k, n);
            }
        }
        if need_a {
            accumulate(grads, nodes, a, &da);
        }
        if need_b {
            accumulate(grads, nodes, b, &db);
        }
        return;
    }

    let mut idx = vec![0usize; batch.len()];
    for c in 0..count {
        let ai = broadcast_offset(&idx, a_batch) * m * k;
        let bi = broadcast_offset(&idx, b_batch)
            * if trans_b { n * k } else { k * n };
        let oi = c * m * n;
        let go_c = &go[oi..oi + m * n];
        if trans_b {
            // out = A·Bᵀ with B stored [n,k]
            if need_a {
                mm_nn(go_c, &b_data[bi..bi + n * k], &mut da[ai..ai + m * k], m, n, k);
            }
            if need_b {
                mm_tn(go_c, &a_data[ai..ai + m * k], &mut db[bi..bi + n * k], m, n, k);
            }
        } else {
            if need_a {
                // dA = dC·Bᵀ with B stored [k,n]
                mm_nt(go_c, &b_data[bi..bi + k * n], &mut da[ai..ai + m * k], m, k, n);
            }
            if need_b {
                mm_tn(&a_data[ai..ai + m * k], go_c, &mut db[bi..bi + k * n], m, k, n);
            }
        }
        increment_index(&mut idx, batch);
    }
    if need_a {
        accumulate(grads, nodes, a, &da);
    }
    if need_b {
        accumulate(grads, nodes, b, &db);
    }
}

// ── raw kernels ─────────────────────────────────────────────────────────

/// c += a·b for a[m×k], b[k×n].
pub(crate) fn mm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for (arow, crow) in a.chunks_exact(k).zip(c.chunks_exact_mut(n)) {
        for (&aip, brow) in arow.iter().zip(b.chunks_exact(n)) {
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
    let _ = m;
}

/// c += a·bᵀ for a[m×k], b[n×k].
pub(crate) fn mm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    let _ = m;
    for (arow, crow) in a.chunks_exact(k).zip(c.chunks_exact_mut(n)) {
        for (cv, brow) in crow.iter_mut().zip(b.chunks_exact(k)) {
            let mut s = 0.0;
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            *cv += s;
        }
    }
}

/// c += aᵀ·b for a[m×k], b[m×n], producing c[k×n].
pub(crate) fn mm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    let _ = m;
    for (arow, brow) in a.chunks_exact(k).zip(b.chunks_exact(n)) {
        for (&v, crow) in arow.iter().zip(c.chunks_exact_mut(n)) {
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += v * bv;
            }
        }
    }
}

fn batched_matmul(
    a: &[f64],
    a_shape: &[usize],
    b: &[f64],
    b_shape: &[usize],
    trans_b: bool,
) -> Option<(Vec<usize>, Vec<f64>)> {
    if a_shape.len() < 2 || b_shape.len() < 2 {
        return None;
    }
    let (m, k) = (a_shape[a_shape.len() - 2], a_shape[a_shape.len() - 1]);
    let (bk, n) = if trans_b {
        (b_shape[b_shape.len() - 1], b_shape[b_shape.len() - 2])
    } else {
        (b_shape[b_shape.len() - 2], b_shape[b_shape.len() - 1])
    };
    if k != bk || k == 0 || m == 0 || n == 0 {
        return None;
    }
    let a_batch = &a_shape[..a_shape.len() - 2];
    let b_batch = &b_shape[..b_shape.len() - 2];
    let batch = broadcast_shapes(a_batch, b_batch)?;
    let count: usize = batch.iter().product();

    // shared rank-2 rhs: the whole batch collapses into one 2-D product
    if b_shape.len() == 2 && a_batch.iter().product::<usize>() == count {
        let rows = count * m;
        let mut out = vec![0.0; rows * n];
        if trans_b {
            mm_nt(a, b, &mut out, rows, n, k);
        } else {
            mm_nn(a, b, &mut out, rows, k, n);
        }
        let mut out_shape = batch;
        out_shape.push(m);
        out_shape.push(n);
        return Some((out_shape, out));
    }

    let mut out = vec![0.0; count * m * n];
    let mut idx = vec![0usize; batch.len()];
    for c in 0..count {
        let ai = broadcast_offset(&idx, a_batch) * m * k;
        let bi = broadcast_offset(&idx, b_batch) * k * n;
        let chunk = &mut out[c * m * n..(c + 1) * m * n];
        if trans_b {
            mm_nt(&a[ai..ai + m * k], &b[bi..bi + n * k], chunk, m, n, k);
        } else {
            mm_nn(&a[ai..ai + m * k], &b[bi..bi + k * n], chunk, m, k, n);
        }
        increment_index(&mut idx, &batch);
    }
    let mut out_shape = batch;
    out_shape.push(m);
    out_shape.push(n);
    Some((out_shape, out))
}

// ── broadcasting helpers ────────────────────────────────────────────────

/// NumPy-style broadcast of two shapes; `None` when incompatible.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da != db && da != 1 && db != 1 {
            return None;
        }
        out[i] = da.max(db);
    }
    Some(out)
}

/// Flat offset of a (batch) multi-index into an operand shape, clamping
/// broadcast axes (extent 1, or missing leading axes) to zero.
fn broadcast_offset(idx: &[usize], shape: &[usize]) -> usize {
    let skip = idx.len() - shape.len();
    let mut off = 0;
    for (d, &e) in shape.iter().enumerate() {
        let c = if e == 1 { 0 } else { idx[skip + d] };
        off = off * e + c;
    }
    off
}

fn increment_index(idx: &mut [usize], shape: &[usize]) {
    for d in (0..shape.len()).rev() {
        idx[d] += 1;
        if idx[d] < shape[d] {
            return;
        }
        idx[d] = 0;
    }
}

/// Per-axis strides into `shape` viewed under `out` rank, zero where the
/// operand broadcasts.
fn broadcast_strides(shape: &[usize], out_rank: usize) -> Vec<usize> {
    let mut strides = vec![0usize; out_rank];
    let skip = out_rank - shape.len();
    let mut s = 1;
    for d in (0..shape.len()).rev() {
        strides[skip + d] = if shape[d] == 1 { 0 } else { s };
        s *= shape[d];
    }
    strides
}

/// Walks every flat offset of a broadcast operand over `out_shape` in
/// row-major order, maintaining the offset incrementally.
struct BroadcastIter<'a> {
    out_shape: &'a [usize],
    strides: Vec<usize>,
    idx: Vec<usize>,
    offset: usize,
}

impl<'a> BroadcastIter<'a> {
    fn new(shape: &[usize], out_shape: &'a [usize]) -> Self {
        BroadcastIter {
            out_shape,
            strides: broadcast_strides(shape, out_shape.len()),
            idx: vec![0; out_shape.len()],
            offset: 0,
        }
    }

    #[inline]
    fn advance(&mut self) {
        for d in (0..self.out_shape.len()).rev() {
            self.idx[d] += 1;
            self.offset += self.strides[d];
            if self.idx[d] < self.out_shape[d] {
                return;
            }
            self.offset -= self.strides[d] * self.out_shape[d];
            self.idx[d] = 0;
        }
    }
}

/// Elementwise zip of two broadcast operands into `out_shape`.
fn broadcast_zip(
    a: &[f64],
    a_shape: &[usize],
    b: &[f64],
    b_shape: &[usize],
    out_shape: &[usize],
    f: &impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    if a_shape == out_shape && b_shape == out_shape {
        return a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect();
    }
    // one operand full-shape, the other a trailing block (bias patterns)
    if a_shape == out_shape {
        if let Some(block) = trailing_block(b_shape, out_shape) {
            if block > 0 {
                return a
                    .chunks_exact(block)
                    .flat_map(|chunk| chunk.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)))
                    .collect();
            }
        }
    }
    let numel: usize = out_shape.iter().product();
    let mut out = Vec::with_capacity(numel);
    let mut ai = BroadcastIter::new(a_shape, out_shape);
    let mut bi = BroadcastIter::new(b_shape, out_shape);
    for _ in 0..numel {
        out.push(f(a[ai.offset], b[bi.offset]));
        ai.advance();
        bi.advance();
    }
    out
}

/// When `shape` matches the trailing axes of `out_shape` exactly (leading
/// axes absent or 1), returns the trailing block length.
fn trailing_block(shape: &[usize], out_shape: &[usize]) -> Option<usize> {
    let mut block = 1usize;
    let skip = out_shape.len() - shape.len();
    for d in (0..shape.len()).rev() {
        if shape[d] == 1 && out_shape[skip + d] != 1 {
            return None;
        }
        if shape[d] != out_shape[skip + d] {
            return None;
        }
        block *= shape[d];
    }
    Some(block)
}

/// Sum `grad` (shaped `from`) down to `to`, undoing broadcasting.
fn reduce_to_shape(grad: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    if from == to {
        return grad.to_vec();
    }
    let numel: usize = to.iter().product();
    let mut out = vec![0.0; numel];
    if let Some(block) = trailing_block(to, from) {
        if block == numel && block > 0 {
            for chunk in grad.chunks_exact(block) {
                for (o, &g) in out.iter_mut().zip(chunk.iter()) {
                    *o += g;
                }
            }
            return out;
        }
    }
    let mut it = BroadcastIter::new(to, from);
    for &g in grad {
        out[it.offset] += g;
        it.advance();
    }
    out
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn swapped_shape(shape: &[usize], ax0: usize, ax1: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.swap(ax0, ax1);
    s
}

fn swap_axes_data(data: &[f64], shape: &[usize], ax0: usize, ax1: usize) -> Vec<f64> {
    if ax0 == ax1 {
        return data.to_vec();
    }
    let (lo, hi) = (ax0.min(ax1), ax0.max(ax1));
    // view the array as [outer, p, mid, q, inner] and exchange p with q,
    // moving inner-sized blocks at a time
    let outer: usize = shape[..lo].iter().product();
    let p = shape[lo];
    let mid: usize = shape[lo + 1..hi].iter().product();
    let q = shape[hi];
    let inner: usize = shape[hi + 1..].iter().product();
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        let base = o * p * mid * q * inner;
        for i0 in 0..p {
            for m0 in 0..mid {
                for j0 in 0..q {
                    let src = base + ((i0 * mid + m0) * q + j0) * inner;
                    let dst = base + ((j0 * mid + m0) * p + i0) * inner;
                    out[dst..dst + inner].copy_from_slice(&data[src..src + inner]);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// Independent triple-loop oracle for 2-D matmul.
    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn matmul_identity() {
        let tape = Tape::new();
        let i2 = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let c = i2.matmul(&a).unwrap();
        assert_eq!(c.value().data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_case() {
        // [[1,0],[0,0]] × [[0,1],[1,0]] = [[0,1],[0,0]], cross-checked
        // against the triple-loop oracle.
        let a = [1.0, 0.0, 0.0, 0.0];
        let b = [0.0, 1.0, 1.0, 0.0];
        let expect = naive_matmul(&a, &b, 2, 2, 2);
        assert_eq!(expect, vec![0.0, 1.0, 0.0, 0.0]);
        let tape = Tape::new();
        let va = tape.constant(t(&[2, 2], &a));
        let vb = tape.constant(t(&[2, 2], &b));
        assert_eq!(va.matmul(&vb).unwrap().value().data(), &expect[..]);
    }

    #[test]
    fn matmul_random_against_oracle() {
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..50 {
            let m = rng.gen_range(1..5);
            let k = rng.gen_range(1..5);
            let n = rng.gen_range(1..5);
            let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let tape = Tape::new();
            let va = tape.constant(t(&[m, k], &a));
            let vb = tape.constant(t(&[k, n], &b));
            let got = va.matmul(&vb).unwrap().value();
            let want = naive_matmul(&a, &b, m, k, n);
            for (g, w) in got.data().iter().zip(want.iter()) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_batched_matches_per_slice_oracle() {
        let mut rng = StdRng::seed_from_u64(12);
        let (bsz, m, k, n) = (3, 2, 4, 3);
        let a: Vec<f64> = (0..bsz * m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let tape = Tape::new();
        let va = tape.constant(t(&[bsz, m, k], &a));
        let vb = tape.constant(t(&[k, n], &b));
        let got = va.matmul(&vb).unwrap();
        assert_eq!(got.shape(), vec![bsz, m, k].iter().take(2).cloned().chain([n]).collect::<Vec<_>>());
        for s in 0..bsz {
            let want = naive_matmul(&a[s * m * k..(s + 1) * m * k], &b, m, k, n);
            let v = got.value();
            for (g, w) in v.data()[s * m * n..(s + 1) * m * n].iter().zip(want.iter()) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_nt_matches_explicit_transpose() {
        let mut rng = StdRng::seed_from_u64(13);
        let (m, k, n) = (3, 4, 2);
        let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..n * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut bt = vec![0.0; k * n];
        for r in 0..n {
            for c in 0..k {
                bt[c * n + r] = b[r * k + c];
            }
        }
        let want = naive_matmul(&a, &bt, m, k, n);
        let tape = Tape::new();
        let va = tape.constant(t(&[m, k], &a));
        let vb = tape.constant(t(&[n, k], &b));
        let got = va.matmul_nt(&vb).unwrap().value();
        for (g, w) in got.data().iter().zip(want.iter()) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 2]));
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn matmul_gradient_of_sum_is_ones_times_bt() {
        let mut rng = StdRng::seed_from_u64(14);
        let (m, k, n) = (2, 3, 2);
        let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let tape = Tape::new();
        let va = tape.var(t(&[m, k], &a));
        let vb = tape.constant(t(&[k, n], &b));
        let loss = va.matmul(&vb).unwrap().sum_all();
        tape.backward(&loss).unwrap();
        let ga = va.grad().unwrap();
        // d sum(AB) / dA = ones[m,n] · Bᵀ, i.e. each row is the row sums of B
        for i in 0..m {
            for p in 0..k {
                let want: f64 = (0..n).map(|j| b[p * n + j]).sum();
                assert!((ga.data()[i * k + p] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::new();
        let x = tape.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let s = x.softmax(0).unwrap().value();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let x = tape.constant(t(&[2], &[0.0, (2.0f64).ln()]));
        let s = x.softmax(0).unwrap().value();
        assert!((s.data()[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((s.data()[1] - 2.0 / 3.0).abs() < 1e-12);
        let x = tape.constant(t(&[1], &[42.0]));
        assert_eq!(x.softmax(0).unwrap().value().data(), &[1.0]);
    }

    #[test]
    fn softmax_slices_sum_to_one() {
        let mut rng = StdRng::seed_from_u64(15);
        for _ in 0..20 {
            let (a, b, c) = (
                rng.gen_range(1..4),
                rng.gen_range(1..5),
                rng.gen_range(1..4),
            );
            let data: Vec<f64> = (0..a * b * c).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let tape = Tape::new();
            let x = tape.constant(t(&[a, b, c], &data));
            for axis in 0..3 {
                let s = x.softmax(axis).unwrap().value();
                let shape = [a, b, c];
                let (outer, len, inner) = axis_split(&shape, axis);
                for o in 0..outer {
                    for i in 0..inner {
                        let sum: f64 = (0..len)
                            .map(|k| s.data()[o * len * inner + k * inner + i])
                            .sum();
                        assert!((sum - 1.0).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn softmax_rejects_nan() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2], &[f64::NAN, 0.0]));
        assert!(matches!(
            x.softmax(0),
            Err(TensorError::NonFinite { .. })
        ));
    }

    #[test]
    fn elementwise_examples() {
        let tape = Tape::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        assert_eq!(x.relu().value().data(), &[0.0, 0.0, 2.0]);
        let zero = tape.constant(Tensor::zeros(vec![3]));
        let same = x.add(&zero).unwrap();
        assert_eq!(same.value().data(), x.value().data());
    }

    #[test]
    fn broadcast_add_bias() {
        let tape = Tape::new();
        let x = tape.var(t(&[2, 2, 3], &(0..12).map(|v| v as f64).collect::<Vec<_>>()));
        let b = tape.var(t(&[3], &[10.0, 20.0, 30.0]));
        let y = x.add(&b).unwrap();
        assert_eq!(y.value().data()[0], 10.0);
        assert_eq!(y.value().data()[4], 24.0);
        let loss = y.sum_all();
        tape.backward(&loss).unwrap();
        // bias grad sums over the 4 broadcast slices
        assert_eq!(b.grad().unwrap().data(), &[4.0, 4.0, 4.0]);
        assert_eq!(x.grad().unwrap().data()[0], 1.0);
    }

    #[test]
    fn reduce_examples() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[1.0, 5.0, 3.0, 2.0]));
        assert_eq!(x.reduce_max(0).unwrap().value().data(), &[3.0, 5.0]);
        let y = tape.constant(t(&[2], &[2.0, 4.0]));
        assert_eq!(y.reduce_mean(0).unwrap().value().data(), &[3.0]);
    }

    #[test]
    fn reduce_max_gradient_routes_to_argmax() {
        let tape = Tape::new();
        let x = tape.var(t(&[2], &[1.0, 5.0]));
        let m = x.reduce_max(0).unwrap();
        tape.backward(&m).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn reduce_max_tie_goes_to_lowest_index() {
        let tape = Tape::new();
        let x = tape.var(t(&[3], &[2.0, 2.0, 1.0]));
        let m = x.reduce_max(0).unwrap();
        tape.backward(&m).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn gather_scatter_examples() {
        let tape = Tape::new();
        let x = tape.constant(t(&[3, 1], &[1.0, 2.0, 3.0]));
        let g = x.gather_rows(&[2, 0]).unwrap();
        assert_eq!(g.value().data(), &[3.0, 1.0]);

        let zeros = tape.constant(Tensor::zeros(vec![2, 1]));
        let src = tape.constant(t(&[2, 1], &[1.0, 2.0]));
        let s = zeros.scatter_add_rows(&[0, 0], &src).unwrap();
        assert_eq!(s.value().data(), &[3.0, 0.0]);
    }

    #[test]
    fn gather_out_of_range_errors() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![2, 2]));
        assert!(matches!(
            x.gather_rows(&[2]),
            Err(TensorError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn gather_then_scatter_over_permutation_is_identity() {
        let mut rng = StdRng::seed_from_u64(16);
        for _ in 0..200 {
            let n = rng.gen_range(1..12);
            let c = rng.gen_range(1..4);
            let data: Vec<f64> = (0..n * c).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                perm.swap(i, rng.gen_range(0..=i));
            }
            let tape = Tape::new();
            let x = tape.constant(t(&[n, c], &data));
            let gathered = x.gather_rows(&perm).unwrap();
            let zeros = tape.constant(Tensor::zeros(vec![n, c]));
            let back = zeros.scatter_add_rows(&perm, &gathered).unwrap();
            assert_eq!(back.value().data(), &data[..]);
        }
    }

    #[test]
    fn layer_norm_examples() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 3], &[5.0, 5.0, 5.0]));
        let gain = tape.constant(t(&[3], &[1.0, 1.0, 1.0]));
        let bias = tape.constant(t(&[3], &[0.5, -0.5, 0.0]));
        let y = x.layer_norm(&gain, &bias, 1e-5).unwrap().value();
        // constant row: normalized part is 0, output is the bias
        for (got, want) in y.data().iter().zip([0.5, -0.5, 0.0]) {
            assert!((got - want).abs() < 1e-9);
        }

        // an already zero-mean unit-variance row passes through (gain 1, bias 0)
        let r = 3.0f64.sqrt() / 2.0_f64.sqrt(); // {-r, 0, r} has population variance 1
        let x = tape.constant(t(&[1, 3], &[-r, 0.0, r]));
        let zero = tape.constant(Tensor::zeros(vec![3]));
        let y = x.layer_norm(&gain, &zero, 1e-12).unwrap().value();
        for (got, want) in y.data().iter().zip([-r, 0.0, r]) {
            assert!((got - want).abs() < 1e-5);
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let tape = Tape::new();
        let confident = tape.constant(t(&[1, 3], &[50.0, 0.0, 0.0]));
        assert!(confident.cross_entropy(&[0]).unwrap().item() < 1e-6);

        let uniform = tape.constant(Tensor::zeros(vec![2, 4]));
        let loss = uniform.cross_entropy(&[1, 3]).unwrap().item();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn backward_product_rule() {
        let tape = Tape::new();
        let x = tape.var(Tensor::scalar(3.0));
        let y = tape.var(Tensor::scalar(4.0));
        let z = x.mul(&y).unwrap();
        tape.backward(&z).unwrap();
        assert_eq!(x.grad().unwrap().item(), 4.0);
        assert_eq!(y.grad().unwrap().item(), 3.0);
    }

    #[test]
    fn constant_leaf_gets_no_grad() {
        let tape = Tape::new();
        let x = tape.var(Tensor::scalar(2.0));
        let c = tape.constant(Tensor::scalar(5.0));
        let z = x.mul(&c).unwrap();
        tape.backward(&z).unwrap();
        assert!(c.grad().is_none());
        assert_eq!(x.grad().unwrap().item(), 5.0);
    }

    #[test]
    fn unreachable_requires_grad_leaf_gets_zero_grad() {
        let tape = Tape::new();
        let x = tape.var(Tensor::scalar(2.0));
        let unused = tape.var(Tensor::scalar(7.0));
        let z = x.mul(&x).unwrap();
        tape.backward(&z).unwrap();
        assert_eq!(unused.grad().unwrap().item(), 0.0);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let tape = Tape::new();
        let x = tape.var(Tensor::zeros(vec![2]));
        let y = x.relu();
        assert!(matches!(
            tape.backward(&y),
            Err(TensorError::NonScalarRoot { numel: 2 })
        ));
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut rng = StdRng::seed_from_u64(17);
            let a: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let tape = Tape::new();
            let va = tape.var(t(&[3, 4], &a));
            let vb = tape.var(t(&[4, 3], &b));
            let y = va.matmul(&vb).unwrap().relu().softmax(1).unwrap().sum_all();
            tape.backward(&y).unwrap();
            (
                va.grad().unwrap().data().to_vec(),
                vb.grad().unwrap().data().to_vec(),
            )
        };
        let (ga1, gb1) = run();
        let (ga2, gb2) = run();
        assert_eq!(ga1, ga2);
        assert_eq!(gb1, gb2);
    }

    #[test]
    fn swap_axes_round_trip() {
        let mut rng = StdRng::seed_from_u64(18);
        let data: Vec<f64> = (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let tape = Tape::new();
        let x = tape.constant(t(&[2, 3, 4], &data));
        let y = x.swap_axes(0, 2).unwrap();
        assert_eq!(y.shape(), vec![4, 3, 2]);
        let z = y.swap_axes(0, 2).unwrap();
        assert_eq!(z.value().data(), &data[..]);
    }

    #[test]
    fn concat_and_backward() {
        let tape = Tape::new();
        let a = tape.var(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.var(t(&[2, 1], &[5.0, 6.0]));
        let c = Var::concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), vec![2, 3]);
        assert_eq!(c.value().data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let loss = c.sum_all();
        tape.backward(&loss).unwrap();
        assert_eq!(a.grad().unwrap().data(), &[1.0; 4]);
        assert_eq!(b.grad().unwrap().data(), &[1.0; 2]);
    }
}
