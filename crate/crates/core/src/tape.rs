//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Every operation appends a node (output value + op record) to a [`Tape`];
//! handles are lightweight [`Var`] indices. Because nodes are appended in
//! execution order the tape is already topologically sorted, so
//! [`Tape::backward`] is a single reverse sweep that pushes vector-Jacobian
//! products into per-node adjoint buffers. A tape supports exactly one
//! backward pass; training steps build a fresh tape each time.

use crate::error::{Error, Result};
use crate::num::{lit, Element};
use crate::tensor::{
    broadcast_apply, broadcast_shapes, coords_to_linear_bcast, linear_to_coords, mm_nn, mm_nt,
    mm_tn, reduce_to_shape, Tensor,
};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Training/evaluation switch for mode-dependent ops (batch norm, dropout).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch statistics produced by a train-mode batch norm, used by the caller
/// to update running statistics.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, k: T },
    Matmul { a: Var, b: Var },
    TransposeLast2 { a: Var },
    Reshape { a: Var },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize, len: usize },
    GatherRows { table: Var, indices: Vec<usize> },
    Gelu { a: Var },
    SoftmaxRows { a: Var },
    SumAll { a: Var },
    MeanAll { a: Var },
    SmoothL1 { pred: Var, target: Var, threshold: T },
    CosineRows { a: Var, b: Var },
    BatchNormTrain { x: Var, gamma: Var, beta: Var, mean: Vec<T>, invstd: Vec<T> },
    BatchNormEval { x: Var, gamma: Var, beta: Var, invstd: Vec<T>, rmean: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    is_param: bool,
}

/// Flat autodiff tape; owns every intermediate value of one forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

/// Gradients returned by [`Tape::backward`], addressable by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Accumulated gradient for a node, if any reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value stored at a node.
    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Shape of the value stored at a node.
    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool, is_param: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            is_param,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_needs_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    // ── leaves ──────────────────────────────────────────────────────────

    /// Register a tensor as a leaf. `requires_grad` leaves accumulate
    /// gradients during [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad, requires_grad)
    }

    /// Register a tensor that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Detach a value from the graph: the returned node is value-identical
    /// (bit for bit) but no gradient flows through it.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.clone();
        self.push(value, Op::Leaf, false, false)
    }

    // ── elementwise and linear ops ──────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = broadcast_apply("add", &self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| {
            x + y
        })?;
        let ng = self.any_needs_grad(&[a, b]);
        Ok(self.push(value, Op::Add { a, b }, ng, false))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = broadcast_apply("sub", &self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| {
            x - y
        })?;
        let ng = self.any_needs_grad(&[a, b]);
        Ok(self.push(value, Op::Sub { a, b }, ng, false))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = broadcast_apply("mul", &self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| {
            x * y
        })?;
        let ng = self.any_needs_grad(&[a, b]);
        Ok(self.push(value, Op::Mul { a, b }, ng, false))
    }

    /// Multiply every element by a compile-time-known scalar.
    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let value = Tensor::new(
            self.nodes[a.0].value.shape().to_vec(),
            self.nodes[a.0].value.data().iter().map(|&x| x * k).collect(),
        )
        .expect("scale preserves shape");
        let ng = self.nodes[a.0].needs_grad;
        self.push(value, Op::Scale { a, k }, ng, false)
    }

    /// Matrix product over the last two axes; leading axes broadcast.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ashape, bshape) = (
            self.nodes[a.0].value.shape().to_vec(),
            self.nodes[b.0].value.shape().to_vec(),
        );
        let shape_err = || Error::Shape {
            op: "matmul",
            lhs: ashape.clone(),
            rhs: bshape.clone(),
        };
        if ashape.len() < 2 || bshape.len() < 2 {
            return Err(shape_err());
        }
        let (abatch, m, ka) = split_matrix_shape(&ashape);
        let (bbatch, kb, n) = split_matrix_shape(&bshape);
        if ka != kb {
            return Err(shape_err());
        }
        let batch = broadcast_shapes(abatch, bbatch).ok_or_else(shape_err)?;
        let mut out_shape = batch.clone();
        out_shape.extend_from_slice(&[m, n]);
        let batch_numel: usize = batch.iter().product();
        let mut data = vec![T::zero(); batch_numel * m * n];
        let adata = self.nodes[a.0].value.data();
        let bdata = self.nodes[b.0].value.data();
        for bi in 0..batch_numel {
            let coords = linear_to_coords(bi, &batch);
            let ao = coords_to_linear_bcast(&coords, abatch) * m * ka;
            let bo = coords_to_linear_bcast(&coords, bbatch) * ka * n;
            mm_nn(
                &adata[ao..ao + m * ka],
                &bdata[bo..bo + ka * n],
                m,
                ka,
                n,
                &mut data[bi * m * n..(bi + 1) * m * n],
            );
        }
        let value = Tensor::new(out_shape, data)?;
        let ng = self.any_needs_grad(&[a, b]);
        Ok(self.push(value, Op::Matmul { a, b }, ng, false))
    }

    /// Swap the last two axes.
    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let shape = self.nodes[a.0].value.shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::contract(format!(
                "transpose_last2 needs rank >= 2, got shape {:?}",
                shape
            )));
        }
        let value = transpose_last2_values(&self.nodes[a.0].value);
        let ng = self.nodes[a.0].needs_grad;
        Ok(self.push(value, Op::TransposeLast2 { a }, ng, false))
    }

    /// View the same elements under a new shape.
    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.nodes[a.0].value.reshaped(shape)?;
        let ng = self.nodes[a.0].needs_grad;
        Ok(self.push(value, Op::Reshape { a }, ng, false))
    }

    /// Concatenate along `axis`; all other dimensions must match.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::contract("concat needs at least one input"));
        }
        let first = self.nodes[inputs[0].0].value.shape().to_vec();
        if axis >= first.len() {
            return Err(Error::contract(format!(
                "concat axis {} out of range for rank {}",
                axis,
                first.len()
            )));
        }
        let mut axis_total = 0usize;
        for v in inputs {
            let s = self.nodes[v.0].value.shape();
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (&x, &y))| i != axis && x != y)
            {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![T::zero(); out_shape.iter().product()];
        let row_out = axis_total * inner;
        let mut offset = 0usize;
        for v in inputs {
            let t = &self.nodes[v.0].value;
            let len = t.shape()[axis];
            let row_in = len * inner;
            for o in 0..outer {
                let src = &t.data()[o * row_in..(o + 1) * row_in];
                let dst = &mut data[o * row_out + offset..o * row_out + offset + row_in];
                dst.copy_from_slice(src);
            }
            offset += row_in;
        }
        let value = Tensor::new(out_shape, data)?;
        let ng = self.any_needs_grad(inputs);
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            ng,
            false,
        ))
    }

    /// Take `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.nodes[a.0].value.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::contract(format!(
                "slice [{start}, {start}+{len}) on axis {axis} out of range for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut data = vec![T::zero(); outer * len * inner];
        let src = self.nodes[a.0].value.data();
        let row_in = shape[axis] * inner;
        let row_out = len * inner;
        for o in 0..outer {
            let from = o * row_in + start * inner;
            data[o * row_out..(o + 1) * row_out].copy_from_slice(&src[from..from + row_out]);
        }
        let value = Tensor::new(out_shape, data)?;
        let ng = self.nodes[a.0].needs_grad;
        Ok(self.push(value, Op::Slice { a, axis, start, len }, ng, false))
    }

    /// Select rows of a 2-D table; duplicates allowed. The adjoint
    /// scatter-adds back into the table, so lookups are differentiable.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.nodes[table.0].value.shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::contract(format!(
                "gather_rows expects a 2-D table, got shape {:?}",
                shape
            )));
        }
        let (rows, width) = (shape[0], shape[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::config(format!(
                "gather_rows index {bad} out of range for table with {rows} rows"
            )));
        }
        let src = self.nodes[table.0].value.data();
        let mut data = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            data.extend_from_slice(&src[i * width..(i + 1) * width]);
        }
        let value = Tensor::new(vec![indices.len(), width], data)?;
        let ng = self.nodes[table.0].needs_grad;
        Ok(self.push(
            value,
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
            ng,
            false,
        ))
    }

    // ── nonlinearities and reductions ───────────────────────────────────

    /// GELU activation (tanh form).
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = Tensor::new(
            self.nodes[a.0].value.shape().to_vec(),
            self.nodes[a.0]
                .value
                .data()
                .iter()
                .map(|&x| gelu_value(x))
                .collect(),
        )
        .expect("gelu preserves shape");
        let ng = self.nodes[a.0].needs_grad;
        self.push(value, Op::Gelu { a }, ng, false)
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let shape = self.nodes[a.0].value.shape().to_vec();
        if shape.is_empty() {
            return Err(Error::contract("softmax_rows needs rank >= 1"));
        }
        let width = shape[shape.len() - 1];
        let src = self.nodes[a.0].value.data();
        let mut data = vec![T::zero(); src.len()];
        for r in 0..src.len() / width {
            let row = &src[r * width..(r + 1) * width];
            let out = &mut data[r * width..(r + 1) * width];
            let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for (o, &x) in out.iter_mut().zip(row) {
                *o = (x - max).exp();
                sum += *o;
            }
            for o in out.iter_mut() {
                *o /= sum;
            }
        }
        let value = Tensor::new(shape, data)?;
        let ng = self.nodes[a.0].needs_grad;
        Ok(self.push(value, Op::SoftmaxRows { a }, ng, false))
    }

    /// Sum of all elements, as a rank-0 scalar.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: T = self.nodes[a.0].value.data().iter().copied().sum();
        let ng = self.nodes[a.0].needs_grad;
        self.push(Tensor::scalar(s), Op::SumAll { a }, ng, false)
    }

    /// Mean of all elements, as a rank-0 scalar.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.numel();
        let s: T = self.nodes[a.0].value.data().iter().copied().sum();
        let ng = self.nodes[a.0].needs_grad;
        self.push(
            Tensor::scalar(s / lit(n as f64)),
            Op::MeanAll { a },
            ng,
            false,
        )
    }

    /// Smooth L1 (Huber-style) loss, mean-reduced over all elements:
    /// `0.5 d²/threshold` when `|d| < threshold`, else `|d| − 0.5 threshold`.
    pub fn smooth_l1(&mut self, pred: Var, target: Var, threshold: T) -> Result<Var> {
        if threshold <= T::zero() {
            return Err(Error::contract(format!(
                "smooth_l1 threshold must be positive, got {threshold}"
            )));
        }
        let (p, t) = (&self.nodes[pred.0].value, &self.nodes[target.0].value);
        if p.shape() != t.shape() {
            return Err(Error::Shape {
                op: "smooth_l1",
                lhs: p.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        let half = lit::<T>(0.5);
        let mut acc = T::zero();
        for (&pv, &tv) in p.data().iter().zip(t.data()) {
            let d = pv - tv;
            acc += if d.abs() < threshold {
                half * d * d / threshold
            } else {
                d.abs() - half * threshold
            };
        }
        let value = Tensor::scalar(acc / lit(p.numel() as f64));
        let ng = self.any_needs_grad(&[pred, target]);
        Ok(self.push(
            value,
            Op::SmoothL1 {
                pred,
                target,
                threshold,
            },
            ng,
            false,
        ))
    }

    /// Mean cosine distance `1 − cos(a_r, b_r)` over matching rows (last axis).
    pub fn cosine_distance_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() || av.ndim() == 0 {
            return Err(Error::Shape {
                op: "cosine_distance_rows",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let width = av.shape()[av.ndim() - 1];
        let rows = av.numel() / width;
        let eps = lit::<T>(1e-12);
        let mut acc = T::zero();
        for r in 0..rows {
            let x = &av.data()[r * width..(r + 1) * width];
            let y = &bv.data()[r * width..(r + 1) * width];
            let (mut s, mut nx, mut ny) = (T::zero(), T::zero(), T::zero());
            for (&xi, &yi) in x.iter().zip(y) {
                s += xi * yi;
                nx += xi * xi;
                ny += yi * yi;
            }
            acc += T::one() - s / (nx.sqrt() * ny.sqrt() + eps);
        }
        let value = Tensor::scalar(acc / lit(rows as f64));
        let ng = self.any_needs_grad(&[a, b]);
        Ok(self.push(value, Op::CosineRows { a, b }, ng, false))
    }

    /// Batch normalization over every axis except the last (channel) axis.
    ///
    /// In `Train` mode statistics come from the batch (biased variance) and
    /// are returned so the caller can fold them into running statistics; in
    /// `Eval` mode the provided running statistics are used as constants.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: T,
        mode: Mode,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let xv = &self.nodes[x.0].value;
        if xv.ndim() < 2 {
            return Err(Error::contract(format!(
                "batch_norm needs rank >= 2, got shape {:?}",
                xv.shape()
            )));
        }
        let d = xv.shape()[xv.ndim() - 1];
        for (name, v) in [
            ("gamma", self.nodes[gamma.0].value.shape()),
            ("beta", self.nodes[beta.0].value.shape()),
            ("running_mean", running_mean.shape()),
            ("running_var", running_var.shape()),
        ] {
            if v != [d] {
                return Err(Error::contract(format!(
                    "batch_norm {name} must have shape [{d}], got {v:?}"
                )));
            }
        }
        let rows = xv.numel() / d;
        let (mean, var): (Vec<T>, Vec<T>) = match mode {
            Mode::Train => {
                let mut mean = vec![T::zero(); d];
                let mut var = vec![T::zero(); d];
                let data = xv.data();
                for r in 0..rows {
                    for c in 0..d {
                        mean[c] += data[r * d + c];
                    }
                }
                let n = lit::<T>(rows as f64);
                for m in mean.iter_mut() {
                    *m /= n;
                }
                for r in 0..rows {
                    for c in 0..d {
                        let diff = data[r * d + c] - mean[c];
                        var[c] += diff * diff;
                    }
                }
                for v in var.iter_mut() {
                    *v /= n;
                }
                (mean, var)
            }
            Mode::Eval => (running_mean.data().to_vec(), running_var.data().to_vec()),
        };
        let invstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.nodes[gamma.0].value.data().to_vec();
        let b = self.nodes[beta.0].value.data().to_vec();
        let mut out = vec![T::zero(); xv.numel()];
        let data = xv.data();
        for r in 0..rows {
            for c in 0..d {
                out[r * d + c] = g[c] * (data[r * d + c] - mean[c]) * invstd[c] + b[c];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let ng = self.any_needs_grad(&[x, gamma, beta]);
        let (op, stats) = match mode {
            Mode::Train => (
                Op::BatchNormTrain {
                    x,
                    gamma,
                    beta,
                    mean: mean.clone(),
                    invstd,
                },
                Some(BatchStats { mean, var }),
            ),
            Mode::Eval => (
                Op::BatchNormEval {
                    x,
                    gamma,
                    beta,
                    invstd,
                    rmean: mean,
                },
                None,
            ),
        };
        Ok((self.push(value, op, ng, false), stats))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a finite scalar `loss`; consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::state(
                "backward was already called on this tape; build a fresh tape per step",
            ));
        }
        self.consumed = true;
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let l = lv.data()[0];
        if !l.is_finite() {
            return Err(Error::NonFinite {
                context: "loss passed to backward".to_string(),
            });
        }
        let mut adj: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                adj[id] = None;
                continue;
            }
            let Some(out_grad) = adj[id].take() else {
                continue;
            };
            self.backward_op(id, &out_grad, &mut adj);
            if self.nodes[id].is_param {
                adj[id] = Some(out_grad);
            }
        }
        let grads = adj
            .into_iter()
            .enumerate()
            .map(|(id, g)| {
                g.map(|buf| {
                    Tensor::new(self.nodes[id].value.shape().to_vec(), buf)
                        .expect("adjoint matches node shape")
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accum(&self, adj: &mut [Option<Vec<T>>], v: Var, contribution: &[T]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut adj[v.0] {
            Some(buf) => {
                for (b, &c) in buf.iter_mut().zip(contribution) {
                    *b += c;
                }
            }
            slot => *slot = Some(contribution.to_vec()),
        }
    }

    fn backward_op(&self, id: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let out_shape = self.nodes[id].value.shape().to_vec();
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                let ga = reduce_to_shape(g, &out_shape, self.nodes[a.0].value.shape());
                self.accum(adj, *a, &ga);
                let gb = reduce_to_shape(g, &out_shape, self.nodes[b.0].value.shape());
                self.accum(adj, *b, &gb);
            }
            Op::Sub { a, b } => {
                let ga = reduce_to_shape(g, &out_shape, self.nodes[a.0].value.shape());
                self.accum(adj, *a, &ga);
                let neg: Vec<T> = g.iter().map(|&x| -x).collect();
                let gb = reduce_to_shape(&neg, &out_shape, self.nodes[b.0].value.shape());
                self.accum(adj, *b, &gb);
            }
            Op::Mul { a, b } => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                if av.shape() == bv.shape() {
                    let ga: Vec<T> = g.iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
                    self.accum(adj, *a, &ga);
                    let gb: Vec<T> = g.iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
                    self.accum(adj, *b, &gb);
                } else {
                    let mut ga_full = vec![T::zero(); g.len()];
                    let mut gb_full = vec![T::zero(); g.len()];
                    for (idx, &gv) in g.iter().enumerate() {
                        let coords = linear_to_coords(idx, &out_shape);
                        let avv = av.data()[coords_to_linear_bcast(&coords, av.shape())];
                        let bvv = bv.data()[coords_to_linear_bcast(&coords, bv.shape())];
                        ga_full[idx] = gv * bvv;
                        gb_full[idx] = gv * avv;
                    }
                    let ga = reduce_to_shape(&ga_full, &out_shape, av.shape());
                    self.accum(adj, *a, &ga);
                    let gb = reduce_to_shape(&gb_full, &out_shape, bv.shape());
                    self.accum(adj, *b, &gb);
                }
            }
            Op::Scale { a, k } => {
                let ga: Vec<T> = g.iter().map(|&x| x * *k).collect();
                self.accum(adj, *a, &ga);
            }
            Op::Matmul { a, b } => {
                let (ashape, bshape) = (
                    self.nodes[a.0].value.shape().to_vec(),
                    self.nodes[b.0].value.shape().to_vec(),
                );
                let (abatch, m, k) = split_matrix_shape(&ashape);
                let (bbatch, _, n) = split_matrix_shape(&bshape);
                let batch = broadcast_shapes(abatch, bbatch).expect("validated in forward");
                let batch_numel: usize = batch.iter().product();
                let adata = self.nodes[a.0].value.data();
                let bdata = self.nodes[b.0].value.data();
                let mut ga = vec![T::zero(); adata.len()];
                let mut gb = vec![T::zero(); bdata.len()];
                for bi in 0..batch_numel {
                    let coords = linear_to_coords(bi, &batch);
                    let ao = coords_to_linear_bcast(&coords, abatch) * m * k;
                    let bo = coords_to_linear_bcast(&coords, bbatch) * k * n;
                    let go = bi * m * n;
                    // dA += dY · Bᵀ ; dB += Aᵀ · dY
                    mm_nt(
                        &g[go..go + m * n],
                        &bdata[bo..bo + k * n],
                        m,
                        n,
                        k,
                        &mut ga[ao..ao + m * k],
                    );
                    mm_tn(
                        &adata[ao..ao + m * k],
                        &g[go..go + m * n],
                        m,
                        k,
                        n,
                        &mut gb[bo..bo + k * n],
                    );
                }
                self.accum(adj, *a, &ga);
                self.accum(adj, *b, &gb);
            }
            Op::TransposeLast2 { a } => {
                let gt = Tensor::new(out_shape.clone(), g.to_vec()).expect("adjoint shape");
                let ga = transpose_last2_values(&gt);
                self.accum(adj, *a, ga.data());
            }
            Op::Reshape { a } => {
                self.accum(adj, *a, g);
            }
            Op::Concat { inputs, axis } => {
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let row_out = out_shape[*axis] * inner;
                let mut offset = 0usize;
                for v in inputs {
                    let len = self.nodes[v.0].value.shape()[*axis];
                    let row_in = len * inner;
                    let mut gi = vec![T::zero(); self.nodes[v.0].value.numel()];
                    for o in 0..outer {
                        gi[o * row_in..(o + 1) * row_in].copy_from_slice(
                            &g[o * row_out + offset..o * row_out + offset + row_in],
                        );
                    }
                    self.accum(adj, *v, &gi);
                    offset += row_in;
                }
            }
            Op::Slice {
                a,
                axis,
                start,
                len,
            } => {
                let in_shape = self.nodes[a.0].value.shape();
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[*axis + 1..].iter().product();
                let row_in = in_shape[*axis] * inner;
                let row_out = len * inner;
                let mut ga = vec![T::zero(); self.nodes[a.0].value.numel()];
                for o in 0..outer {
                    let to = o * row_in + start * inner;
                    ga[to..to + row_out].copy_from_slice(&g[o * row_out..(o + 1) * row_out]);
                }
                self.accum(adj, *a, &ga);
            }
            Op::GatherRows { table, indices } => {
                let width = self.nodes[table.0].value.shape()[1];
                let mut gt = vec![T::zero(); self.nodes[table.0].value.numel()];
                for (row, &i) in indices.iter().enumerate() {
                    for c in 0..width {
                        gt[i * width + c] += g[row * width + c];
                    }
                }
                self.accum(adj, *table, &gt);
            }
            Op::Gelu { a } => {
                let ga: Vec<T> = self.nodes[a.0]
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, &gv)| gv * gelu_derivative(x))
                    .collect();
                self.accum(adj, *a, &ga);
            }
            Op::SoftmaxRows { a } => {
                let y = self.nodes[id].value.data();
                let width = *out_shape.last().expect("softmax rank >= 1");
                let mut ga = vec![T::zero(); y.len()];
                for r in 0..y.len() / width {
                    let ys = &y[r * width..(r + 1) * width];
                    let gs = &g[r * width..(r + 1) * width];
                    let dotp: T = ys.iter().zip(gs).map(|(&yv, &gv)| yv * gv).sum();
                    for c in 0..width {
                        ga[r * width + c] = ys[c] * (gs[c] - dotp);
                    }
                }
                self.accum(adj, *a, &ga);
            }
            Op::SumAll { a } => {
                let ga = vec![g[0]; self.nodes[a.0].value.numel()];
                self.accum(adj, *a, &ga);
            }
            Op::MeanAll { a } => {
                let n = self.nodes[a.0].value.numel();
                let ga = vec![g[0] / lit(n as f64); n];
                self.accum(adj, *a, &ga);
            }
            Op::SmoothL1 {
                pred,
                target,
                threshold,
            } => {
                let (p, t) = (&self.nodes[pred.0].value, &self.nodes[target.0].value);
                let n = lit::<T>(p.numel() as f64);
                let w = g[0] / n;
                let mut gp = vec![T::zero(); p.numel()];
                for (i, (&pv, &tv)) in p.data().iter().zip(t.data()).enumerate() {
                    let d = pv - tv;
                    gp[i] = w * if d.abs() < *threshold {
                        d / *threshold
                    } else {
                        d.signum()
                    };
                }
                self.accum(adj, *pred, &gp);
                for v in gp.iter_mut() {
                    *v = -*v;
                }
                self.accum(adj, *target, &gp);
            }
            Op::CosineRows { a, b } => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let width = av.shape()[av.ndim() - 1];
                let rows = av.numel() / width;
                let eps = lit::<T>(1e-12);
                let w = g[0] / lit(rows as f64);
                let mut ga = vec![T::zero(); av.numel()];
                let mut gb = vec![T::zero(); bv.numel()];
                for r in 0..rows {
                    let x = &av.data()[r * width..(r + 1) * width];
                    let y = &bv.data()[r * width..(r + 1) * width];
                    let (mut s, mut nx2, mut ny2) = (T::zero(), T::zero(), T::zero());
                    for (&xi, &yi) in x.iter().zip(y) {
                        s += xi * yi;
                        nx2 += xi * xi;
                        ny2 += yi * yi;
                    }
                    let (nx, ny) = (nx2.sqrt().max(eps), ny2.sqrt().max(eps));
                    let den = nx * ny + eps;
                    for c in 0..width {
                        // d(1 − s/den)/dx = −y/den + s·(ny·x/nx)/den²
                        ga[r * width + c] =
                            w * (-y[c] / den + s * ny * x[c] / (nx * den * den));
                        gb[r * width + c] =
                            w * (-x[c] / den + s * nx * y[c] / (ny * den * den));
                    }
                }
                self.accum(adj, *a, &ga);
                self.accum(adj, *b, &gb);
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                mean,
                invstd,
            } => {
                let xv = &self.nodes[x.0].value;
                let d = xv.shape()[xv.ndim() - 1];
                let rows = xv.numel() / d;
                let n = lit::<T>(rows as f64);
                let gvals = self.nodes[gamma.0].value.data();
                let mut sum_dy = vec![T::zero(); d];
                let mut sum_dy_xhat = vec![T::zero(); d];
                let data = xv.data();
                for r in 0..rows {
                    for c in 0..d {
                        let dy = g[r * d + c];
                        let xhat = (data[r * d + c] - mean[c]) * invstd[c];
                        sum_dy[c] += dy;
                        sum_dy_xhat[c] += dy * xhat;
                    }
                }
                self.accum(adj, *beta, &sum_dy);
                self.accum(adj, *gamma, &sum_dy_xhat);
                let mut gx = vec![T::zero(); xv.numel()];
                for r in 0..rows {
                    for c in 0..d {
                        let dy = g[r * d + c];
                        let xhat = (data[r * d + c] - mean[c]) * invstd[c];
                        gx[r * d + c] = gvals[c]
                            * invstd[c]
                            * (dy - sum_dy[c] / n - xhat * sum_dy_xhat[c] / n);
                    }
                }
                self.accum(adj, *x, &gx);
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                invstd,
                rmean,
            } => {
                let xv = &self.nodes[x.0].value;
                let d = xv.shape()[xv.ndim() - 1];
                let rows = xv.numel() / d;
                let gvals = self.nodes[gamma.0].value.data();
                let mut sum_dy = vec![T::zero(); d];
                let mut sum_dy_xhat = vec![T::zero(); d];
                let data = xv.data();
                let mut gx = vec![T::zero(); xv.numel()];
                for r in 0..rows {
                    for c in 0..d {
                        let dy = g[r * d + c];
                        let xhat = (data[r * d + c] - rmean[c]) * invstd[c];
                        sum_dy[c] += dy;
                        sum_dy_xhat[c] += dy * xhat;
                        gx[r * d + c] = dy * gvals[c] * invstd[c];
                    }
                }
                self.accum(adj, *beta, &sum_dy);
                self.accum(adj, *gamma, &sum_dy_xhat);
                self.accum(adj, *x, &gx);
            }
        }
    }
}

/// Split a rank-≥2 shape into (batch dims, rows, cols).
fn split_matrix_shape(shape: &[usize]) -> (&[usize], usize, usize) {
    let n = shape.len();
    (&shape[..n - 2], shape[n - 2], shape[n - 1])
}

fn transpose_last2_values<T: Element>(t: &Tensor<T>) -> Tensor<T> {
    let shape = t.shape();
    let n = shape.len();
    let (r, c) = (shape[n - 2], shape[n - 1]);
    let batch: usize = shape[..n - 2].iter().product();
    let mut out_shape = shape.to_vec();
    out_shape.swap(n - 2, n - 1);
    let mut data = vec![T::zero(); t.numel()];
    let src = t.data();
    for b in 0..batch {
        let o = b * r * c;
        for i in 0..r {
            for j in 0..c {
                data[o + j * r + i] = src[o + i * c + j];
            }
        }
    }
    Tensor::new(out_shape, data).expect("transpose preserves element count")
}

fn gelu_value<T: Element>(x: T) -> T {
    let c: T = lit(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a: T = lit(0.044715);
    let half: T = lit(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_derivative<T: Element>(x: T) -> T {
    let c: T = lit(0.797_884_560_802_865_4);
    let a: T = lit(0.044715);
    let half: T = lit(0.5);
    let three: T = lit(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + three * a * x * x)
}
