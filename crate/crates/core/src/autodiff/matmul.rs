//! Matrix-multiply kernels and the matmul tape op.
//!
//! Three orientations over row-major buffers. Every output element is
//! accumulated in a fixed order (left-to-right over the inner dimension),
//! and parallelism only splits over independent output rows, so results are
//! bit-stable regardless of thread count.

use super::{Op, Tape, Var};
use crate::tensor::{Scalar, Tensor};
use rayon::prelude::*;

/// Below this many multiply-adds the rayon dispatch overhead dominates.
const PAR_THRESHOLD: usize = 1 << 16;

/// C[m,n] = A[m,k] · B[k,n].
pub fn gemm_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    assert_eq!(a.len(), m * k, "gemm_nn lhs size");
    assert_eq!(b.len(), k * n, "gemm_nn rhs size");
    let mut c = vec![T::zero(); m * n];
    let row = |ci: &mut [T], i: usize| {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in ci.iter_mut().zip(brow) {
                *cv = *cv + aip * bv;
            }
        }
    };
    if m * n * k >= PAR_THRESHOLD {
        c.par_chunks_mut(n).enumerate().for_each(|(i, ci)| row(ci, i));
    } else {
        for (i, ci) in c.chunks_mut(n).enumerate() {
            row(ci, i);
        }
    }
    c
}

/// C[m,n] = A[m,k] · B[n,k]ᵀ (dot products of contiguous rows).
pub fn gemm_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    assert_eq!(a.len(), m * k, "gemm_nt lhs size");
    assert_eq!(b.len(), n * k, "gemm_nt rhs size");
    let mut c = vec![T::zero(); m * n];
    let row = |ci: &mut [T], i: usize| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, cv) in ci.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc = acc + x * y;
            }
            *cv = acc;
        }
    };
    if m * n * k >= PAR_THRESHOLD {
        c.par_chunks_mut(n).enumerate().for_each(|(i, ci)| row(ci, i));
    } else {
        for (i, ci) in c.chunks_mut(n).enumerate() {
            row(ci, i);
        }
    }
    c
}

/// C[m,n] = A[k,m]ᵀ · B[k,n].
pub fn gemm_tn<T: Scalar>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
    assert_eq!(a.len(), k * m, "gemm_tn lhs size");
    assert_eq!(b.len(), k * n, "gemm_tn rhs size");
    let mut c = vec![T::zero(); m * n];
    let row = |ci: &mut [T], i: usize| {
        for p in 0..k {
            let api = a[p * m + i];
            if api == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in ci.iter_mut().zip(brow) {
                *cv = *cv + api * bv;
            }
        }
    };
    if m * n * k >= PAR_THRESHOLD {
        c.par_chunks_mut(n).enumerate().for_each(|(i, ci)| row(ci, i));
    } else {
        for (i, ci) in c.chunks_mut(n).enumerate() {
            row(ci, i);
        }
    }
    c
}

impl<T: Scalar> Tape<T> {
    /// C = A · B with adjoints dA = G·Bᵀ, dB = Aᵀ·G.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let (m, ka) = av.dims2();
        let (kb, n) = bv.dims2();
        assert_eq!(
            ka, kb,
            "matmul inner dims disagree: {:?} vs {:?}",
            av.shape(),
            bv.shape()
        );
        let c = gemm_nn(av.data(), bv.data(), m, ka, n);
        self.push_derived(Tensor::new(vec![m, n], c), Op::MatMul { a: a.id, b: b.id }, &[a.id, b.id])
    }
}
