//! Forward implementations of the recorded operations.
//!
//! Shape preconditions panic with both shapes in the message; domain
//! violations (log of non-positive, sqrt of negative) panic rather than
//! produce NaN.

use super::{Op, Tape, Var};
use crate::tensor::{Scalar, Tensor};

impl<T: Scalar> Tape<T> {
    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let xv = self.value(x);
        let out = xv.map(f);
        self.push_derived(out, op, &[x.id])
    }

    fn binary_same_shape(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(
            av.shape(),
            bv.shape(),
            "elementwise op on mismatched shapes {:?} vs {:?}",
            av.shape(),
            bv.shape()
        );
        let out = Tensor::new(
            av.shape().to_vec(),
            av.data().iter().zip(bv.data().iter()).map(|(&x, &y)| f(x, y)).collect(),
        );
        self.push_derived(out, op, &[a.id, b.id])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, |x, y| x + y, Op::Add(a.id, b.id))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, |x, y| x - y, Op::Sub(a.id, b.id))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, |x, y| x * y, Op::Mul(a.id, b.id))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x.id, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x.id, c))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x.id))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        assert!(
            xv.data().iter().all(|v| *v >= T::zero()),
            "sqrt of negative input"
        );
        self.unary(x, |v| v.sqrt(), Op::Sqrt(x.id))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x.id))
    }

    pub fn log(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        assert!(
            xv.data().iter().all(|v| *v > T::zero()),
            "log of non-positive input"
        );
        self.unary(x, |v| v.ln(), Op::Log(x.id))
    }

    pub fn recip(&mut self, x: Var) -> Var {
        self.unary(x, |v| T::one() / v, Op::Recip(x.id))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x.id))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| v / (T::one() + (-v).exp()),
            Op::Silu(x.id),
        )
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x.id))
    }

    /// x * ln(x), with 0 mapped to 0 (entropy building block).
    pub fn xlogx(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        assert!(
            xv.data().iter().all(|v| *v >= T::zero()),
            "xlogx of negative input"
        );
        self.unary(
            x,
            |v| if v > T::zero() { v * v.ln() } else { T::zero() },
            Op::XLogX(x.id),
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().fold(T::zero(), |acc, &v| acc + v);
        self.push_derived(Tensor::scalar(s), Op::Sum(x.id), &[x.id])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = T::from_f64(xv.numel() as f64);
        let s = xv.data().iter().fold(T::zero(), |acc, &v| acc + v) / n;
        self.push_derived(Tensor::scalar(s), Op::Mean(x.id), &[x.id])
    }

    /// Row-wise sums: [N,D] -> [N].
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.dims2();
        let data: Vec<T> = (0..n)
            .map(|i| xv.data()[i * d..(i + 1) * d].iter().fold(T::zero(), |a, &v| a + v))
            .collect();
        self.push_derived(Tensor::new(vec![n], data), Op::SumCols(x.id), &[x.id])
    }

    /// Column-wise means: [N,D] -> [D].
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.dims2();
        let inv = T::one() / T::from_f64(n as f64);
        let mut data = vec![T::zero(); d];
        for i in 0..n {
            for j in 0..d {
                data[j] = data[j] + xv.data()[i * d + j];
            }
        }
        for v in &mut data {
            *v = *v * inv;
        }
        self.push_derived(Tensor::new(vec![d], data), Op::MeanRows(x.id), &[x.id])
    }

    /// x[N,D] + b (numel D), broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let xv = self.value(x);
        let bv = self.value(b);
        let (n, d) = xv.dims2();
        assert_eq!(
            bv.numel(),
            d,
            "bias of {} elements against {:?}",
            bv.numel(),
            xv.shape()
        );
        let mut data = xv.data().to_vec();
        for i in 0..n {
            for j in 0..d {
                data[i * d + j] = data[i * d + j] + bv.data()[j];
            }
        }
        self.push_derived(Tensor::new(vec![n, d], data), Op::AddBias { x: x.id, b: b.id }, &[x.id, b.id])
    }

    /// x[N,D] * r (numel D), broadcast over rows.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Var {
        let xv = self.value(x);
        let rv = self.value(r);
        let (n, d) = xv.dims2();
        assert_eq!(rv.numel(), d, "row of {} elements against {:?}", rv.numel(), xv.shape());
        let mut data = xv.data().to_vec();
        for i in 0..n {
            for j in 0..d {
                data[i * d + j] = data[i * d + j] * rv.data()[j];
            }
        }
        self.push_derived(Tensor::new(vec![n, d], data), Op::MulRow { x: x.id, r: r.id }, &[x.id, r.id])
    }

    /// x[N,D] + c (numel N), one scalar per row.
    pub fn add_col(&mut self, x: Var, c: Var) -> Var {
        let xv = self.value(x);
        let cv = self.value(c);
        let (n, d) = xv.dims2();
        assert_eq!(cv.numel(), n, "col of {} elements against {:?}", cv.numel(), xv.shape());
        let mut data = xv.data().to_vec();
        for i in 0..n {
            for j in 0..d {
                data[i * d + j] = data[i * d + j] + cv.data()[i];
            }
        }
        self.push_derived(Tensor::new(vec![n, d], data), Op::AddCol { x: x.id, c: c.id }, &[x.id, c.id])
    }

    /// x[N,D] * c (numel N), one scalar per row.
    pub fn mul_col(&mut self, x: Var, c: Var) -> Var {
        let xv = self.value(x);
        let cv = self.value(c);
        let (n, d) = xv.dims2();
        assert_eq!(cv.numel(), n, "col of {} elements against {:?}", cv.numel(), xv.shape());
        let mut data = xv.data().to_vec();
        for i in 0..n {
            for j in 0..d {
                data[i * d + j] = data[i * d + j] * cv.data()[i];
            }
        }
        self.push_derived(Tensor::new(vec![n, d], data), Op::MulCol { x: x.id, c: c.id }, &[x.id, c.id])
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.dims2();
        let mut data = vec![T::zero(); n * d];
        for i in 0..n {
            for j in 0..d {
                data[j * n + i] = xv.data()[i * d + j];
            }
        }
        self.push_derived(Tensor::new(vec![d, n], data), Op::Transpose(x.id), &[x.id])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let out = self.value(x).clone().reshaped(shape);
        self.push_derived(out, Op::Reshape(x.id), &[x.id])
    }

    pub fn slice_cols(&mut self, x: Var, c0: usize, c1: usize) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.dims2();
        assert!(c0 < c1 && c1 <= d, "slice_cols {c0}..{c1} of {:?}", xv.shape());
        let w = c1 - c0;
        let mut data = Vec::with_capacity(n * w);
        for i in 0..n {
            data.extend_from_slice(&xv.data()[i * d + c0..i * d + c1]);
        }
        self.push_derived(Tensor::new(vec![n, w], data), Op::SliceCols { x: x.id, c0, c1 }, &[x.id])
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let (n, ca) = av.dims2();
        let (nb, cb) = bv.dims2();
        assert_eq!(n, nb, "concat_cols row mismatch {:?} vs {:?}", av.shape(), bv.shape());
        let mut data = Vec::with_capacity(n * (ca + cb));
        for i in 0..n {
            data.extend_from_slice(&av.data()[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&bv.data()[i * cb..(i + 1) * cb]);
        }
        self.push_derived(Tensor::new(vec![n, ca + cb], data), Op::ConcatCols(a.id, b.id), &[a.id, b.id])
    }

    pub fn slice_rows(&mut self, x: Var, r0: usize, r1: usize) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.dims2();
        assert!(r0 < r1 && r1 <= n, "slice_rows {r0}..{r1} of {:?}", xv.shape());
        let data = xv.data()[r0 * d..r1 * d].to_vec();
        self.push_derived(Tensor::new(vec![r1 - r0, d], data), Op::SliceRows { x: x.id, r0, r1 }, &[x.id])
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let (na, d) = av.dims2();
        let (nb, db) = bv.dims2();
        assert_eq!(d, db, "concat_rows col mismatch {:?} vs {:?}", av.shape(), bv.shape());
        let mut data = Vec::with_capacity((na + nb) * d);
        data.extend_from_slice(av.data());
        data.extend_from_slice(bv.data());
        self.push_derived(Tensor::new(vec![na + nb, d], data), Op::ConcatRows(a.id, b.id), &[a.id, b.id])
    }

    /// Embedding lookup: rows of `table` [K,D] selected by `idx` -> [N,D].
    /// The adjoint scatter-adds row gradients back into the table.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let tv = self.value(table);
        let (k, d) = tv.dims2();
        assert!(idx.iter().all(|&i| i < k), "gather_rows index out of [0,{k})");
        let mut data = Vec::with_capacity(idx.len() * d);
        for &row in idx {
            data.extend_from_slice(&tv.data()[row * d..(row + 1) * d]);
        }
        self.push_derived(
            Tensor::new(vec![idx.len(), d], data),
            Op::GatherRows { table: table.id, idx: idx.to_vec() },
            &[table.id],
        )
    }

    /// One element per row: x[N,D], idx[N] -> [N].
    pub fn gather_cols(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.dims2();
        assert_eq!(idx.len(), n, "gather_cols needs one index per row");
        assert!(idx.iter().all(|&j| j < d), "gather_cols index out of [0,{d})");
        let data: Vec<T> = idx.iter().enumerate().map(|(i, &j)| xv.data()[i * d + j]).collect();
        self.push_derived(
            Tensor::new(vec![n], data),
            Op::GatherCols { x: x.id, idx: idx.to_vec() },
            &[x.id],
        )
    }

    /// Row-wise softmax with max-subtraction; adjoint is the fused JVP
    /// p * (g - <g, p>).
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.dims2();
        assert!(d > 0, "softmax over empty axis, shape {:?}", xv.shape());
        let mut data = vec![T::zero(); n * d];
        for i in 0..n {
            let row = &xv.data()[i * d..(i + 1) * d];
            let max = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
            let mut sum = T::zero();
            for j in 0..d {
                let e = (row[j] - max).exp();
                data[i * d + j] = e;
                sum = sum + e;
            }
            for j in 0..d {
                data[i * d + j] = data[i * d + j] / sum;
            }
        }
        self.push_derived(Tensor::new(vec![n, d], data), Op::SoftmaxRows(x.id), &[x.id])
    }

    /// Row-wise log-softmax: x - max - ln(sum(exp(x - max))).
    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.dims2();
        assert!(d > 0, "log_softmax over empty axis, shape {:?}", xv.shape());
        let mut data = vec![T::zero(); n * d];
        for i in 0..n {
            let row = &xv.data()[i * d..(i + 1) * d];
            let max = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
            let mut sum = T::zero();
            for j in 0..d {
                sum = sum + (row[j] - max).exp();
            }
            let lse = max + sum.ln();
            for j in 0..d {
                data[i * d + j] = row[j] - lse;
            }
        }
        self.push_derived(Tensor::new(vec![n, d], data), Op::LogSoftmaxRows(x.id), &[x.id])
    }

    /// Forward identity that blocks all adjoint flow (stop-gradient).
    pub fn detach(&mut self, x: Var) -> Var {
        let out = self.value(x).clone();
        self.push(out, Op::Detach, false)
    }

    /// Straight-through index: forward value is `hard` (rows must be exactly
    /// one-hot), adjoint passes to `soft` unchanged. This is
    /// hard - sg[soft] + soft with the forward evaluated exactly.
    pub fn straight_through_index(&mut self, hard: &Tensor<T>, soft: Var) -> Var {
        let sv = self.value(soft);
        assert_eq!(
            hard.shape(),
            sv.shape(),
            "straight_through_index shapes {:?} vs {:?}",
            hard.shape(),
            sv.shape()
        );
        let (n, d) = hard.dims2();
        for i in 0..n {
            let row = &hard.data()[i * d..(i + 1) * d];
            let ones = row.iter().filter(|&&v| v == T::one()).count();
            let zeros = row.iter().filter(|&&v| v == T::zero()).count();
            assert!(
                ones == 1 && zeros == d - 1,
                "straight_through_index row {i} is not one-hot"
            );
        }
        self.push_derived(hard.clone(), Op::SteIndex { soft: soft.id }, &[soft.id])
    }

    /// Straight-through passthrough: forward value is `q`, adjoint flows to
    /// `x` as identity. This is z + sg[q - z] with the forward evaluated
    /// exactly (bit-equal to q).
    pub fn ste_passthrough(&mut self, q: &Tensor<T>, x: Var) -> Var {
        let xv = self.value(x);
        assert_eq!(
            q.shape(),
            xv.shape(),
            "ste_passthrough shapes {:?} vs {:?}",
            q.shape(),
            xv.shape()
        );
        self.push_derived(q.clone(), Op::StePassthrough { x: x.id }, &[x.id])
    }

    /// Rotary position embedding on [S, d_head] (d_head even): pair i of row
    /// at position p rotates by angle p * 10000^(-2i/d_head).
    pub fn rope(&mut self, x: Var, positions: &[usize]) -> Var {
        let xv = self.value(x);
        let (s, dh) = xv.dims2();
        assert_eq!(dh % 2, 0, "rope needs an even head dim, got {dh}");
        assert_eq!(positions.len(), s, "rope needs one position per row");
        let out = rope_forward(xv, positions, false);
        self.push_derived(out, Op::Rope { x: x.id, positions: positions.to_vec() }, &[x.id])
    }
}

fn rope_forward<T: Scalar>(x: &Tensor<T>, positions: &[usize], invert: bool) -> Tensor<T> {
    let (s, dh) = x.dims2();
    let mut data = vec![T::zero(); s * dh];
    for r in 0..s {
        let pos = positions[r] as f64;
        for i in 0..dh / 2 {
            let theta = pos * (10000f64).powf(-2.0 * i as f64 / dh as f64);
            let theta = if invert { -theta } else { theta };
            let (sin, cos) = (T::from_f64(theta.sin()), T::from_f64(theta.cos()));
            let a = x.data()[r * dh + 2 * i];
            let b = x.data()[r * dh + 2 * i + 1];
            data[r * dh + 2 * i] = a * cos - b * sin;
            data[r * dh + 2 * i + 1] = a * sin + b * cos;
        }
    }
    Tensor::new(vec![s, dh], data)
}

/// Adjoint of a rotation is the inverse rotation.
pub(super) fn rope_backward<T: Scalar>(g: &Tensor<T>, positions: &[usize]) -> Tensor<T> {
    rope_forward(g, positions, true)
}

/// Per-row argmax with ties broken by lowest index, plus the one-hot matrix.
/// Non-differentiable: the result is a plain tensor, typically loaded as a
/// constant.
pub fn argmax_onehot<T: Scalar>(p: &Tensor<T>) -> (Vec<usize>, Tensor<T>) {
    let (n, d) = p.dims2();
    assert!(n >= 1 && d >= 1, "argmax_onehot on empty tensor {:?}", p.shape());
    let mut indices = Vec::with_capacity(n);
    let mut onehot = Tensor::zeros(vec![n, d]);
    for i in 0..n {
        let row = &p.data()[i * d..(i + 1) * d];
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        indices.push(best);
        onehot.data_mut()[i * d + best] = T::one();
    }
    (indices, onehot)
}
