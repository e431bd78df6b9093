//! Reverse-mode automatic differentiation on a per-step tape.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! the forward value and the op that produced it. [`Tape::backward`] consumes
//! the tape and walks the nodes in strict reverse recording order,
//! accumulating adjoints additively (a value consumed twice receives the sum
//! of both contributions). Parameters live outside the tape as plain
//! [`Tensor`]s; each training step loads them as leaves, runs forward,
//! and reads their gradients back out of the returned [`Grads`].
//!
//! There are no higher-order gradients: one tape, one backward.

mod conv;
mod matmul;
mod ops;

pub mod gradcheck;

pub use conv::Conv2dSpec;
pub use matmul::{gemm_nn, gemm_nt, gemm_tn};
pub use ops::argmax_onehot;

use crate::tensor::{Scalar, Tensor};
use std::sync::atomic::{AtomicU32, Ordering};

static TAPE_TAG: AtomicU32 = AtomicU32::new(1);

/// Handle to a tensor recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    id: usize,
    tag: u32,
}

/// How a node was produced; inputs are node ids on the same tape.
pub(crate) enum Op<T> {
    Leaf,
    /// Forward identity, adjoint annihilator.
    Detach,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize, T),
    Square(usize),
    Sqrt(usize),
    Exp(usize),
    Log(usize),
    Recip(usize),
    Relu(usize),
    Silu(usize),
    Tanh(usize),
    /// x * ln(x) with 0 -> 0.
    XLogX(usize),
    Sum(usize),
    Mean(usize),
    /// Row-wise sum of a 2-D tensor: [N,D] -> [N].
    SumCols(usize),
    /// Column-wise mean of a 2-D tensor: [N,D] -> [D].
    MeanRows(usize),
    /// x[N,D] + b[D] broadcast over rows.
    AddBias { x: usize, b: usize },
    /// x[N,D] * r[D] broadcast over rows.
    MulRow { x: usize, r: usize },
    /// x[N,D] + c[N] broadcast over columns.
    AddCol { x: usize, c: usize },
    /// x[N,D] * c[N] broadcast over columns.
    MulCol { x: usize, c: usize },
    MatMul { a: usize, b: usize },
    Transpose(usize),
    Reshape(usize),
    SliceCols { x: usize, c0: usize, c1: usize },
    ConcatCols(usize, usize),
    SliceRows { x: usize, r0: usize, r1: usize },
    ConcatRows(usize, usize),
    /// rows of `table` selected by `idx`: [K,D],[N] -> [N,D].
    GatherRows { table: usize, idx: Vec<usize> },
    /// one element per row: [N,D],[N] -> [N].
    GatherCols { x: usize, idx: Vec<usize> },
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    /// Forward value is a hard one-hot constant; adjoint flows to `soft`
    /// unchanged (the straight-through index of Ind_hard - sg[Ind_soft] +
    /// Ind_soft).
    SteIndex { soft: usize },
    /// Forward value is a provided constant; adjoint flows to `x` as
    /// identity (z + sg[q - z]).
    StePassthrough { x: usize },
    Conv2d { x: usize, w: usize, b: usize, spec: Conv2dSpec },
    UpsampleNearest2x(usize),
    /// [B,D,h,w] -> [B*h*w, D] raster-order rows.
    NchwToRows(usize),
    /// [B*h*w, D] -> [B,D,h,w]; dims are (B,D,h,w).
    RowsToNchw { x: usize, dims: (usize, usize, usize, usize) },
    /// Per-pair rotation by pos*theta_i on [S, d_head] with given positions.
    Rope { x: usize, positions: Vec<usize> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// One forward pass worth of recorded operations.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    tag: u32,
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
    tag: u32,
}

impl<T: Scalar> Grads<T> {
    /// Gradient of the loss w.r.t. `var`. `None` when the node neither
    /// required nor received gradient.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        assert_eq!(var.tag, self.tag, "var from another tape");
        self.grads[var.id].as_ref()
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        assert_eq!(var.tag, self.tag, "var from another tape");
        self.grads[var.id].take()
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), tag: TAPE_TAG.fetch_add(1, Ordering::Relaxed) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a leaf. Parameters use `requires_grad = true`; data and masks
    /// use [`Tape::constant`].
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: T) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Forward value of a recorded node.
    pub fn value(&self, var: Var) -> &Tensor<T> {
        assert_eq!(var.tag, self.tag, "var from another tape");
        &self.nodes[var.id].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.id].requires_grad
    }

    pub(crate) fn requires_grad_id(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    fn check(&self, var: Var) -> usize {
        assert_eq!(var.tag, self.tag, "var from another tape");
        var.id
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node { value, op, requires_grad });
        Var { id, tag: self.tag }
    }

    fn push_derived(&mut self, value: Tensor<T>, op: Op<T>, parents: &[usize]) -> Var {
        let requires = parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.push(value, op, requires)
    }

    /// Backpropagate from a scalar loss, consuming the tape. Every
    /// `requires_grad` leaf gets a gradient (zeros when unreachable).
    pub fn backward(self, loss: Var) -> Grads<T> {
        let loss_id = self.check(loss);
        assert_eq!(
            self.nodes[loss_id].value.numel(),
            1,
            "backward requires a scalar loss, got shape {:?}",
            self.nodes[loss_id].value.shape()
        );
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        grads[loss_id] = Some(Tensor::scalar(T::one()));

        for i in (0..n).rev() {
            if grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let upstream = grads[i].take().expect("just checked");
            self.apply_adjoint(i, &upstream, &mut grads);
            // Keep gradients for leaves; interior grads are transient.
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(upstream);
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Grads { grads, tag: self.tag }
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Tensor<T>>],
        target: usize,
        contribution: Tensor<T>,
    ) {
        if !self.nodes[target].requires_grad {
            return;
        }
        debug_assert_eq!(
            contribution.shape(),
            self.nodes[target].value.shape(),
            "adjoint shape mismatch"
        );
        match &mut grads[target] {
            Some(existing) => {
                for (g, c) in existing.data_mut().iter_mut().zip(contribution.data()) {
                    *g = *g + *c;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    fn value_of(&self, id: usize) -> &Tensor<T> {
        &self.nodes[id].value
    }

    fn apply_adjoint(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let two = T::from_f64(2.0);
        match &self.nodes[i].op {
            Op::Leaf | Op::Detach => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value_of(*a), self.value_of(*b));
                self.accumulate(grads, *a, zip(g, bv, |g, b| g * b));
                self.accumulate(grads, *b, zip(g, av, |g, a| g * a));
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, g.map(|v| v * *c)),
            Op::AddScalar(x, _) => self.accumulate(grads, *x, g.clone()),
            Op::Square(x) => {
                let xv = self.value_of(*x);
                self.accumulate(grads, *x, zip(g, xv, |g, x| g * two * x));
            }
            Op::Sqrt(x) => {
                let yv = self.value_of(i);
                self.accumulate(grads, *x, zip(g, yv, |g, y| g / (two * y)));
            }
            Op::Exp(x) => {
                let yv = self.value_of(i);
                self.accumulate(grads, *x, zip(g, yv, |g, y| g * y));
            }
            Op::Log(x) => {
                let xv = self.value_of(*x);
                self.accumulate(grads, *x, zip(g, xv, |g, x| g / x));
            }
            Op::Recip(x) => {
                let yv = self.value_of(i);
                self.accumulate(grads, *x, zip(g, yv, |g, y| -g * y * y));
            }
            Op::Relu(x) => {
                let xv = self.value_of(*x);
                self.accumulate(
                    grads,
                    *x,
                    zip(g, xv, |g, x| if x > T::zero() { g } else { T::zero() }),
                );
            }
            Op::Silu(x) => {
                let xv = self.value_of(*x);
                self.accumulate(
                    grads,
                    *x,
                    zip(g, xv, |g, x| {
                        let sig = T::one() / (T::one() + (-x).exp());
                        g * sig * (T::one() + x * (T::one() - sig))
                    }),
                );
            }
            Op::Tanh(x) => {
                let yv = self.value_of(i);
                self.accumulate(grads, *x, zip(g, yv, |g, y| g * (T::one() - y * y)));
            }
            Op::XLogX(x) => {
                let xv = self.value_of(*x);
                self.accumulate(
                    grads,
                    *x,
                    zip(g, xv, |g, x| {
                        if x > T::zero() {
                            g * (x.ln() + T::one())
                        } else {
                            T::zero()
                        }
                    }),
                );
            }
            Op::Sum(x) => {
                let s = g.item();
                let xs = self.value_of(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::full(xs, s));
            }
            Op::Mean(x) => {
                let xv = self.value_of(*x);
                let s = g.item() / T::from_f64(xv.numel() as f64);
                self.accumulate(grads, *x, Tensor::full(xv.shape().to_vec(), s));
            }
            Op::SumCols(x) => {
                let (n, d) = self.value_of(*x).dims2();
                let mut out = Tensor::zeros(vec![n, d]);
                for i in 0..n {
                    let gi = g.data()[i];
                    out.data_mut()[i * d..(i + 1) * d].iter_mut().for_each(|v| *v = gi);
                }
                self.accumulate(grads, *x, out);
            }
            Op::MeanRows(x) => {
                let (n, d) = self.value_of(*x).dims2();
                let inv = T::one() / T::from_f64(n as f64);
                let mut out = Tensor::zeros(vec![n, d]);
                for i in 0..n {
                    for j in 0..d {
                        out.data_mut()[i * d + j] = g.data()[j] * inv;
                    }
                }
                self.accumulate(grads, *x, out);
            }
            Op::AddBias { x, b } => {
                let (n, d) = self.value_of(*x).dims2();
                self.accumulate(grads, *x, g.clone());
                let mut db = Tensor::zeros(self.value_of(*b).shape().to_vec());
                for i in 0..n {
                    for j in 0..d {
                        db.data_mut()[j] = db.data_mut()[j] + g.data()[i * d + j];
                    }
                }
                self.accumulate(grads, *b, db);
            }
            Op::MulRow { x, r } => {
                let xv = self.value_of(*x);
                let rv = self.value_of(*r);
                let (n, d) = xv.dims2();
                let mut dx = Tensor::zeros(vec![n, d]);
                let mut dr = Tensor::zeros(rv.shape().to_vec());
                for i in 0..n {
                    for j in 0..d {
                        let gij = g.data()[i * d + j];
                        dx.data_mut()[i * d + j] = gij * rv.data()[j];
                        dr.data_mut()[j] = dr.data_mut()[j] + gij * xv.data()[i * d + j];
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *r, dr);
            }
            Op::AddCol { x, c } => {
                let (n, d) = self.value_of(*x).dims2();
                self.accumulate(grads, *x, g.clone());
                let cv_shape = self.value_of(*c).shape().to_vec();
                let mut dc = Tensor::zeros(cv_shape);
                for i in 0..n {
                    let mut acc = T::zero();
                    for j in 0..d {
                        acc = acc + g.data()[i * d + j];
                    }
                    dc.data_mut()[i] = acc;
                }
                self.accumulate(grads, *c, dc);
            }
            Op::MulCol { x, c } => {
                let xv = self.value_of(*x);
                let cv = self.value_of(*c);
                let (n, d) = xv.dims2();
                let mut dx = Tensor::zeros(vec![n, d]);
                let mut dc = Tensor::zeros(cv.shape().to_vec());
                for i in 0..n {
                    let ci = cv.data()[i];
                    let mut acc = T::zero();
                    for j in 0..d {
                        let gij = g.data()[i * d + j];
                        dx.data_mut()[i * d + j] = gij * ci;
                        acc = acc + gij * xv.data()[i * d + j];
                    }
                    dc.data_mut()[i] = acc;
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *c, dc);
            }
            Op::MatMul { a, b } => {
                let av = self.value_of(*a);
                let bv = self.value_of(*b);
                let (m, k) = av.dims2();
                let (_, n) = bv.dims2();
                if self.nodes[*a].requires_grad {
                    let da = gemm_nt(g.data(), bv.data(), m, n, k);
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], da));
                }
                if self.nodes[*b].requires_grad {
                    let db = gemm_tn(av.data(), g.data(), m, k, n);
                    self.accumulate(grads, *b, Tensor::new(vec![k, n], db));
                }
            }
            Op::Transpose(x) => {
                let (n, d) = self.value_of(i).dims2();
                let mut out = Tensor::zeros(vec![d, n]);
                for r in 0..n {
                    for c in 0..d {
                        out.data_mut()[c * n + r] = g.data()[r * d + c];
                    }
                }
                self.accumulate(grads, *x, out);
            }
            Op::Reshape(x) => {
                let xs = self.value_of(*x).shape().to_vec();
                self.accumulate(grads, *x, g.clone().reshaped(xs));
            }
            Op::SliceCols { x, c0, c1 } => {
                let (n, d) = self.value_of(*x).dims2();
                let w = c1 - c0;
                let mut out = Tensor::zeros(vec![n, d]);
                for i in 0..n {
                    for j in 0..w {
                        out.data_mut()[i * d + c0 + j] = g.data()[i * w + j];
                    }
                }
                self.accumulate(grads, *x, out);
            }
            Op::ConcatCols(a, b) => {
                let (n, ca) = self.value_of(*a).dims2();
                let (_, cb) = self.value_of(*b).dims2();
                let d = ca + cb;
                let mut da = Tensor::zeros(vec![n, ca]);
                let mut db = Tensor::zeros(vec![n, cb]);
                for i in 0..n {
                    da.data_mut()[i * ca..(i + 1) * ca]
                        .copy_from_slice(&g.data()[i * d..i * d + ca]);
                    db.data_mut()[i * cb..(i + 1) * cb]
                        .copy_from_slice(&g.data()[i * d + ca..(i + 1) * d]);
                }
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::SliceRows { x, r0, r1 } => {
                let (n, d) = self.value_of(*x).dims2();
                let mut out = Tensor::zeros(vec![n, d]);
                out.data_mut()[r0 * d..r1 * d].copy_from_slice(g.data());
                self.accumulate(grads, *x, out);
            }
            Op::ConcatRows(a, b) => {
                let (na, d) = self.value_of(*a).dims2();
                let (nb, _) = self.value_of(*b).dims2();
                let da = Tensor::new(vec![na, d], g.data()[..na * d].to_vec());
                let db = Tensor::new(vec![nb, d], g.data()[na * d..].to_vec());
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::GatherRows { table, idx } => {
                let (k, d) = self.value_of(*table).dims2();
                let mut dt = Tensor::zeros(vec![k, d]);
                for (i, &row) in idx.iter().enumerate() {
                    for j in 0..d {
                        dt.data_mut()[row * d + j] =
                            dt.data_mut()[row * d + j] + g.data()[i * d + j];
                    }
                }
                self.accumulate(grads, *table, dt);
            }
            Op::GatherCols { x, idx } => {
                let (n, d) = self.value_of(*x).dims2();
                let mut dx = Tensor::zeros(vec![n, d]);
                for (i, &col) in idx.iter().enumerate() {
                    dx.data_mut()[i * d + col] = g.data()[i];
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SoftmaxRows(x) => {
                let p = self.value_of(i);
                let (n, d) = p.dims2();
                let mut dx = Tensor::zeros(vec![n, d]);
                for r in 0..n {
                    let pr = &p.data()[r * d..(r + 1) * d];
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let dot: T = pr
                        .iter()
                        .zip(gr.iter())
                        .fold(T::zero(), |acc, (&p, &g)| acc + p * g);
                    for c in 0..d {
                        dx.data_mut()[r * d + c] = pr[c] * (gr[c] - dot);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::LogSoftmaxRows(x) => {
                let y = self.value_of(i);
                let (n, d) = y.dims2();
                let mut dx = Tensor::zeros(vec![n, d]);
                for r in 0..n {
                    let yr = &y.data()[r * d..(r + 1) * d];
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let gsum: T = gr.iter().fold(T::zero(), |acc, &v| acc + v);
                    for c in 0..d {
                        dx.data_mut()[r * d + c] = gr[c] - yr[c].exp() * gsum;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SteIndex { soft } => self.accumulate(grads, *soft, g.clone()),
            Op::StePassthrough { x } => self.accumulate(grads, *x, g.clone()),
            Op::Conv2d { x, w, b, spec } => {
                conv::conv2d_backward(self, *x, *w, *b, spec, g, grads);
            }
            Op::UpsampleNearest2x(x) => {
                let dx = conv::upsample2x_backward(self.value_of(*x).shape(), g);
                self.accumulate(grads, *x, dx);
            }
            Op::NchwToRows(x) => {
                let dx = conv::nchw_to_rows_backward(self.value_of(*x).shape(), g);
                self.accumulate(grads, *x, dx);
            }
            Op::RowsToNchw { x, dims } => {
                let dx = conv::rows_to_nchw_backward(*dims, g);
                self.accumulate(grads, *x, dx);
            }
            Op::Rope { x, positions } => {
                let dx = ops::rope_backward(g, positions);
                self.accumulate(grads, *x, dx);
            }
        }
    }
}

fn zip<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    debug_assert_eq!(a.shape(), b.shape());
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data().iter()).map(|(&x, &y)| f(x, y)).collect(),
    )
}
