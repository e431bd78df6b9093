//! Central finite-difference verification of adjoints.
//!
//! `grad_check` compares the tape gradient of a scalar-valued function
//! against (f(x+eps*e) - f(x-eps*e)) / (2*eps) per coordinate, in f64.
//! Functions containing stop-gradients must freeze the detached branch in
//! the closure (capture its base-point value as a constant); the checker
//! itself differences whatever forward the closure builds.

use super::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_coord: usize,
    pub tol: f64,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn render(&self, name: &str) -> String {
        format!(
            "{:<28} max_rel_err {:.3e} (coord {:>3}) tol {:.1e}  {}",
            name,
            self.max_rel_err,
            self.worst_coord,
            self.tol,
            if self.pass { "pass" } else { "FAIL" }
        )
    }
}

/// Relative error with an absolute floor of 1.0 in the denominator, so
/// near-zero gradients are compared absolutely.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs().max(b.abs())).max(1.0)
}

/// Check the gradient of `f` at `x`. `f` must produce a scalar from the
/// given var on the given tape, loading any other inputs itself.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64, tol: f64) -> GradCheckReport
where
    F: Fn(&mut Tape<f64>, Var) -> Var,
{
    // Autodiff gradient.
    let mut tape: Tape<f64> = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let loss = f(&mut tape, xv);
    assert_eq!(tape.value(loss).numel(), 1, "grad_check needs a scalar function");
    let grads = tape.backward(loss);
    let ad = grads.get(xv).expect("leaf gradient").clone();

    let eval = |point: &Tensor<f64>| -> f64 {
        let mut t: Tape<f64> = Tape::new();
        let v = t.leaf(point.clone(), false);
        let out = f(&mut t, v);
        t.value(out).item()
    };

    let mut max_rel = 0.0f64;
    let mut worst = 0usize;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
        let e = rel_err(fd, ad.data()[i]);
        if e > max_rel {
            max_rel = e;
            worst = i;
        }
    }
    GradCheckReport { max_rel_err: max_rel, worst_coord: worst, tol, pass: max_rel < tol }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_matches_analytic() {
        // f(x) = sum(x^2) at (1,2): gradient (2,4).
        let x = Tensor::new(vec![2], vec![1.0, 2.0]);
        let report = grad_check(
            |t, v| {
                let sq = t.square(v);
                t.sum(sq)
            },
            &x,
            1e-4,
            1e-8,
        );
        assert!(report.pass, "{}", report.render("sum(x^2)"));
    }

    #[test]
    fn softmax_matmul_chain() {
        let mut rng = crate::rng::Rng::new(21);
        let x: Tensor<f64> = rng.tensor_normal(vec![3, 4], 0.0, 1.0);
        let w: Tensor<f64> = rng.tensor_normal(vec![4, 5], 0.0, 1.0);
        let report = grad_check(
            move |t, v| {
                let wv = t.constant(w.clone());
                let y = t.matmul(v, wv);
                let p = t.softmax_rows(y);
                let sq = t.square(p);
                t.sum(sq)
            },
            &x,
            1e-4,
            1e-5,
        );
        assert!(report.pass, "{}", report.render("softmax∘matmul"));
    }

    #[test]
    fn detach_composite_with_frozen_branch() {
        // f(x) = sum(x + detach(y*x)). The detached branch is frozen at the
        // base point, so the finite difference of the remaining live path
        // matches the tape gradient (identically 1).
        let mut rng = crate::rng::Rng::new(33);
        let x: Tensor<f64> = rng.tensor_normal(vec![4], 0.0, 1.0);
        let y: Tensor<f64> = rng.tensor_normal(vec![4], 0.0, 1.0);
        let frozen: Tensor<f64> = {
            let mut t: Tape<f64> = Tape::new();
            let xv = t.constant(x.clone());
            let yv = t.constant(y.clone());
            let yx = t.mul(yv, xv);
            t.value(yx).clone()
        };
        let report = grad_check(
            move |t, v| {
                let frozen_c = t.constant(frozen.clone());
                let s = t.add(v, frozen_c);
                t.sum(s)
            },
            &x,
            1e-4,
            1e-10,
        );
        assert!(report.pass, "{}", report.render("x + sg[y*x]"));

        // And the live tape agrees: gradient through the detach is zero.
        let mut t: Tape<f64> = Tape::new();
        let xv = t.leaf(x.clone(), true);
        let yv = t.constant(y.clone());
        let yx = t.mul(yv, xv);
        let d = t.detach(yx);
        let s = t.add(xv, d);
        let loss = t.sum(s);
        let grads = t.backward(loss);
        for &g in grads.get(xv).unwrap().data() {
            assert_eq!(g, 1.0);
        }
    }

    #[test]
    fn matmul_adjoint_both_sides() {
        let mut rng = crate::rng::Rng::new(55);
        let a: Tensor<f64> = rng.tensor_normal(vec![3, 4], 0.0, 1.0);
        let b: Tensor<f64> = rng.tensor_normal(vec![4, 2], 0.0, 1.0);
        let w: Tensor<f64> = rng.tensor_normal(vec![3, 2], 0.0, 1.0);
        let (b2, w2) = (b.clone(), w.clone());
        let ra = grad_check(
            move |t, v| {
                let bv = t.constant(b2.clone());
                let wv = t.constant(w2.clone());
                let c = t.matmul(v, bv);
                let cw = t.mul(c, wv);
                t.sum(cw)
            },
            &a,
            1e-4,
            1e-6,
        );
        assert!(ra.pass, "{}", ra.render("matmul lhs"));
        let (a2, w2) = (a.clone(), w.clone());
        let rb = grad_check(
            move |t, v| {
                let av = t.constant(a2.clone());
                let wv = t.constant(w2.clone());
                let c = t.matmul(av, v);
                let cw = t.mul(c, wv);
                t.sum(cw)
            },
            &b,
            1e-4,
            1e-6,
        );
        assert!(rb.pass, "{}", rb.render("matmul rhs"));
    }
}
