//! Diagnostic suites behind the `quantcheck` command and the verification
//! tests: finite-difference checks for every differentiable op, and
//! gradient-flow measurements per quantizer.

use crate::autodiff::gradcheck::{grad_check, GradCheckReport};
use crate::autodiff::{argmax_onehot, Conv2dSpec, Tape, Var};
use crate::quantize::{ibq_quantize, naive_vq_quantize, vqgan_quantize};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const GRADCHECK_EPS: f64 = 1e-4;
pub const GRADCHECK_TOL: f64 = 1e-5;

/// One op's worst finite-difference report over all checked instances.
pub struct OpReport {
    pub name: &'static str,
    pub instances: usize,
    pub worst: GradCheckReport,
}

impl OpReport {
    pub fn render(&self) -> String {
        format!("{} ({} instances)", self.worst.render(self.name), self.instances)
    }
}

fn check_op<F>(name: &'static str, instances: usize, seed: u64, build: F) -> OpReport
where
    F: Fn(&mut Rng) -> (Tensor<f64>, Box<dyn Fn(&mut Tape<f64>, Var) -> Var>),
{
    let mut worst: Option<GradCheckReport> = None;
    for i in 0..instances {
        let mut rng = Rng::new(seed).derive(name, i as u64);
        let (x, f) = build(&mut rng);
        let report = grad_check(move |t, v| f(t, v), &x, GRADCHECK_EPS, GRADCHECK_TOL);
        let replace = worst
            .as_ref()
            .map_or(true, |w| report.max_rel_err > w.max_rel_err);
        if replace {
            worst = Some(report);
        }
    }
    OpReport { name, instances, worst: worst.expect("at least one instance") }
}

/// A scalar readout sum(w ⊙ y) with a fixed random w, so adjoints are
/// exercised with non-uniform upstream gradients.
fn readout(t: &mut Tape<f64>, y: Var, rng: &mut Rng) -> Var {
    let shape = t.value(y).shape().to_vec();
    let w = t.constant(rng.tensor_normal(shape, 0.0, 1.0));
    let p = t.mul(y, w);
    t.sum(p)
}

/// Finite-difference-check every differentiable operation on random
/// instances. Non-smooth ops are sampled away from their kinks.
pub fn gradient_oracle_suite(instances: usize, seed: u64) -> Vec<OpReport> {
    let mut reports = Vec::new();
    macro_rules! unary {
        ($name:literal, $make:expr, $apply:expr) => {
            reports.push(check_op($name, instances, seed, |rng| {
                let x: Tensor<f64> = $make(rng);
                let ro = rng.clone();
                (
                    x,
                    Box::new(move |t: &mut Tape<f64>, v: Var| {
                        let y = $apply(t, v);
                        readout(t, y, &mut ro.clone())
                    }),
                )
            }));
        };
    }

    let normal = |rng: &mut Rng| rng.tensor_normal(vec![3, 4], 0.0, 1.0);
    let positive = |rng: &mut Rng| rng.tensor_uniform(vec![3, 4], 0.2, 2.0);
    // Bounded away from the relu kink so central differences stay valid.
    let away_from_zero = |rng: &mut Rng| {
        let mut t: Tensor<f64> = rng.tensor_uniform(vec![3, 4], 0.1, 1.0);
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            if i % 2 == 0 {
                *v = -*v;
            }
        }
        t
    };

    unary!("add", normal, |t: &mut Tape<f64>, v| {
        let c = t.constant(Tensor::full(vec![3, 4], 0.7));
        t.add(v, c)
    });
    unary!("sub", normal, |t: &mut Tape<f64>, v| {
        let c = t.constant(Tensor::full(vec![3, 4], 0.3));
        t.sub(c, v)
    });
    unary!("mul", normal, |t: &mut Tape<f64>, v| {
        let c = t.constant(Rng::new(5).tensor_normal(vec![3, 4], 0.0, 1.0));
        t.mul(v, c)
    });
    unary!("scale", normal, |t: &mut Tape<f64>, v| t.scale(v, -1.7));
    unary!("add_scalar", normal, |t: &mut Tape<f64>, v| t.add_scalar(v, 2.5));
    unary!("square", normal, |t: &mut Tape<f64>, v| t.square(v));
    unary!("sqrt", positive, |t: &mut Tape<f64>, v| t.sqrt(v));
    unary!("exp", normal, |t: &mut Tape<f64>, v| t.exp(v));
    unary!("log", positive, |t: &mut Tape<f64>, v| t.log(v));
    unary!("recip", positive, |t: &mut Tape<f64>, v| t.recip(v));
    unary!("relu", away_from_zero, |t: &mut Tape<f64>, v| t.relu(v));
    unary!("silu", normal, |t: &mut Tape<f64>, v| t.silu(v));
    unary!("tanh", normal, |t: &mut Tape<f64>, v| t.tanh(v));
    unary!("xlogx", positive, |t: &mut Tape<f64>, v| t.xlogx(v));
    unary!("sum_cols", normal, |t: &mut Tape<f64>, v| t.sum_cols(v));
    unary!("mean_rows", normal, |t: &mut Tape<f64>, v| t.mean_rows(v));
    unary!("transpose", normal, |t: &mut Tape<f64>, v| t.transpose(v));
    unary!("reshape", normal, |t: &mut Tape<f64>, v| t.reshape(v, vec![2, 6]));
    unary!("slice_cols", normal, |t: &mut Tape<f64>, v| t.slice_cols(v, 1, 3));
    unary!("slice_rows", normal, |t: &mut Tape<f64>, v| t.slice_rows(v, 0, 2));
    unary!("softmax_rows", normal, |t: &mut Tape<f64>, v| t.softmax_rows(v));
    unary!("log_softmax_rows", normal, |t: &mut Tape<f64>, v| t.log_softmax_rows(v));
    unary!("upsample_nearest_2x", |rng: &mut Rng| rng.tensor_normal(vec![1, 2, 3, 3], 0.0, 1.0), |t: &mut Tape<f64>, v| t.upsample_nearest_2x(v));
    unary!("nchw_to_rows", |rng: &mut Rng| rng.tensor_normal(vec![2, 3, 2, 2], 0.0, 1.0), |t: &mut Tape<f64>, v| t.nchw_to_rows(v));
    unary!("rows_to_nchw", |rng: &mut Rng| rng.tensor_normal(vec![8, 3], 0.0, 1.0), |t: &mut Tape<f64>, v| t.rows_to_nchw(v, 2, 3, 2, 2));
    unary!("rope", |rng: &mut Rng| rng.tensor_normal(vec![4, 6], 0.0, 1.0), |t: &mut Tape<f64>, v| t.rope(v, &[0, 3, 7, 12]));
    unary!("gather_rows", |rng: &mut Rng| rng.tensor_normal(vec![5, 3], 0.0, 1.0), |t: &mut Tape<f64>, v| t.gather_rows(v, &[4, 0, 2, 0]));
    unary!("gather_cols", normal, |t: &mut Tape<f64>, v| t.gather_cols(v, &[3, 0, 2]));

    // sum / mean are scalar-valued already.
    reports.push(check_op("sum", instances, seed, |rng| {
        let x: Tensor<f64> = rng.tensor_normal(vec![3, 4], 0.0, 1.0);
        (x, Box::new(|t: &mut Tape<f64>, v: Var| t.sum(v)))
    }));
    reports.push(check_op("mean", instances, seed, |rng| {
        let x: Tensor<f64> = rng.tensor_normal(vec![3, 4], 0.0, 1.0);
        (x, Box::new(|t: &mut Tape<f64>, v: Var| t.mean(v)))
    }));

    // Binary broadcast ops, checked on each operand.
    reports.push(check_op("add_bias(x)", instances, seed, |rng| {
        let x: Tensor<f64> = rng.tensor_normal(vec![3, 4], 0.0, 1.0);
        let b: Tensor<f64> = rng.tensor_normal(vec![4], 0.0, 1.0);
        let ro = rng.clone();
        (x, Box::new(move |t: &mut Tape<f64>, v: Var| {
            let bv = t.constant(b.clone());
            let y = t.add_bias(v, bv);
            readout(t, y, &mut ro.clone())
        }))
    }));
    reports.push(check_op("add_bias(b)", instances, seed, |rng| {
        let x: Tensor<f64> = rng.tensor_normal(vec![3, 4], 0.0, 1.0);
        let b: Tensor<f64> = rng.tensor_normal(vec![4], 0.0, 1.0);
        let ro = rng.clone();
        (b, Box::new(move |t: &mut Tape<f64>, v: Var| {
            let xv = t.constant(x.clone());
            let y = t.add_bias(xv, v);
            readout(t, y, &mut ro.clone())
        }))
    }));
    reports.push(check_op("mul_row(r)", instances, seed, |rng| {
        let x: Tensor<f64> = rng.tensor_normal(vec![3, 4], 0.0, 1.0);
        let r: Tensor<f64> = rng.tensor_normal(vec![4], 0.0, 1.0);
        let ro = rng.clone();
        (r, Box::new(move |t: &mut Tape<f64>, v: Var| {
            let xv = t.constant(x.clone());
            let y = t.mul_row(xv, v);
            readout(t, y, &mut ro.clone())
        }))
    }));
    reports.push(check_op("mul_col(x)", instances, seed, |rng| {
        let x: Tensor<f64> = rng.tensor_normal(vec![3, 4], 0.0, 1.0);
        let c: Tensor<f64> = rng.tensor_normal(vec![3], 0.0, 1.0);
        let ro = rng.clone();
        (x, Box::new(move |t: &mut Tape<f64>, v: Var| {
            let cv = t.constant(c.clone());
            let y = t.mul_col(v, cv);
            readout(t, y, &mut ro.clone())
        }))
    }));
    reports.push(check_op("add_col(c)", instances, seed, |rng| {
        let x: Tensor<f64> = rng.tensor_normal(vec![3, 4], 0.0, 1.0);
        let c: Tensor<f64> = rng.tensor_normal(vec![3], 0.0, 1.0);
        let ro = rng.clone();
        (c, Box::new(move |t: &mut Tape<f64>, v: Var| {
            let xv = t.constant(x.clone());
            let y = t.add_col(xv, v);
            readout(t, y, &mut ro.clone())
        }))
    }));
    reports.push(check_op("concat_rows", instances, seed, |rng| {
        let a: Tensor<f64> = rng.tensor_normal(vec![2, 3], 0.0, 1.0);
        let b: Tensor<f64> = rng.tensor_normal(vec![3, 3], 0.0, 1.0);
        let ro = rng.clone();
        (a, Box::new(move |t: &mut Tape<f64>, v: Var| {
            let bv = t.constant(b.clone());
            let y = t.concat_rows(v, bv);
            readout(t, y, &mut ro.clone())
        }))
    }));
    reports.push(check_op("concat_cols", instances, seed, |rng| {
        let a: Tensor<f64> = rng.tensor_normal(vec![3, 2], 0.0, 1.0);
        let b: Tensor<f64> = rng.tensor_normal(vec![3, 3], 0.0, 1.0);
        let ro = rng.clone();
        (b, Box::new(move |t: &mut Tape<f64>, v: Var| {
            let av = t.constant(a.clone());
            let y = t.concat_cols(av, v);
            readout(t, y, &mut ro.clone())
        }))
    }));
    reports.push(check_op("matmul(a)", instances, seed, |rng| {
        let a: Tensor<f64> = rng.tensor_normal(vec![3, 4], 0.0, 1.0);
        let b: Tensor<f64> = rng.tensor_normal(vec![4, 2], 0.0, 1.0);
        let ro = rng.clone();
        (a, Box::new(move |t: &mut Tape<f64>, v: Var| {
            let bv = t.constant(b.clone());
            let y = t.matmul(v, bv);
            readout(t, y, &mut ro.clone())
        }))
    }));
    reports.push(check_op("matmul(b)", instances, seed, |rng| {
        let a: Tensor<f64> = rng.tensor_normal(vec![3, 4], 0.0, 1.0);
        let b: Tensor<f64> = rng.tensor_normal(vec![4, 2], 0.0, 1.0);
        let ro = rng.clone();
        (b, Box::new(move |t: &mut Tape<f64>, v: Var| {
            let av = t.constant(a.clone());
            let y = t.matmul(av, v);
            readout(t, y, &mut ro.clone())
        }))
    }));
    for (name, pick) in [("conv2d(x)", 0usize), ("conv2d(w)", 1), ("conv2d(b)", 2)] {
        reports.push(check_op(name, instances, seed, move |rng| {
            let x: Tensor<f64> = rng.tensor_normal(vec![2, 2, 4, 4], 0.0, 1.0);
            let w: Tensor<f64> = rng.tensor_normal(vec![3, 2, 3, 3], 0.0, 0.5);
            let b: Tensor<f64> = rng.tensor_normal(vec![3], 0.0, 0.5);
            let ro = rng.clone();
            let spec = Conv2dSpec { stride: 2, pad: 1 };
            let (x2, w2, b2) = (x.clone(), w.clone(), b.clone());
            let target = [x, w, b][pick].clone();
            (target, Box::new(move |t: &mut Tape<f64>, v: Var| {
                let xv = if pick == 0 { v } else { t.constant(x2.clone()) };
                let wv = if pick == 1 { v } else { t.constant(w2.clone()) };
                let bv = if pick == 2 { v } else { t.constant(b2.clone()) };
                let y = t.conv2d(xv, wv, bv, spec);
                readout(t, y, &mut ro.clone())
            }))
        }));
    }
    // Straight-through ops define their backward as the gradient of a
    // smooth surrogate, not of their (piecewise-constant) forward. The check
    // compares the real op's tape gradient against finite differences of the
    // surrogate: soft alone for the index op, the identity for passthrough.
    reports.push(check_ste(instances, seed, true));
    reports.push(check_ste(instances, seed, false));
    reports
}

fn check_ste(instances: usize, seed: u64, index_op: bool) -> OpReport {
    let name = if index_op { "ste_index(soft path)" } else { "ste_passthrough(z)" };
    let mut worst: Option<GradCheckReport> = None;
    for i in 0..instances {
        let mut rng = Rng::new(seed).derive(name, i as u64);
        let x: Tensor<f64> = rng.tensor_normal(vec![3, 5], 0.0, 2.0);
        let w: Tensor<f64> = rng.tensor_normal(vec![3, 5], 0.0, 1.0);

        // Tape gradient through the real straight-through op.
        let mut t: Tape<f64> = Tape::new();
        let xv = t.leaf(x.clone(), true);
        let y = if index_op {
            let soft = t.softmax_rows(xv);
            let (_, hard) = argmax_onehot(t.value(soft));
            t.straight_through_index(&hard, soft)
        } else {
            let q = x.map(|v| if v > 0.0 { 1.0 } else { -1.0 });
            t.ste_passthrough(&q, xv)
        };
        let wv = t.constant(w.clone());
        let p = t.mul(y, wv);
        let loss = t.sum(p);
        let grads = t.backward(loss);
        let ad = grads.get(xv).expect("leaf gradient").clone();

        // Finite differences of the smooth surrogate the op substitutes.
        let surrogate = |point: &Tensor<f64>| -> f64 {
            let mut t: Tape<f64> = Tape::new();
            let v = t.leaf(point.clone(), false);
            let y = if index_op { t.softmax_rows(v) } else { v };
            let wv = t.constant(w.clone());
            let p = t.mul(y, wv);
            let s = t.sum(p);
            t.value(s).item()
        };
        let mut max_rel = 0.0f64;
        let mut worst_coord = 0usize;
        for c in 0..x.numel() {
            let mut plus = x.clone();
            plus.data_mut()[c] += GRADCHECK_EPS;
            let mut minus = x.clone();
            minus.data_mut()[c] -= GRADCHECK_EPS;
            let fd = (surrogate(&plus) - surrogate(&minus)) / (2.0 * GRADCHECK_EPS);
            let e = (fd - ad.data()[c]).abs() / fd.abs().max(ad.data()[c].abs()).max(1.0);
            if e > max_rel {
                max_rel = e;
                worst_coord = c;
            }
        }
        let report = GradCheckReport {
            max_rel_err: max_rel,
            worst_coord,
            tol: GRADCHECK_TOL,
            pass: max_rel < GRADCHECK_TOL,
        };
        if worst.as_ref().map_or(true, |w| report.max_rel_err > w.max_rel_err) {
            worst = Some(report);
        }
    }
    OpReport { name, instances, worst: worst.expect("instances > 0") }
}

/// Which deliberate corruption to apply, as a negative control.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Corruption {
    None,
    /// Detach IBQ's soft path, reducing it to selected-rows updates; the
    /// all-codes check must then fail.
    DetachIbqSoft,
}

pub struct FlowCheck {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

/// Gradient-flow measurements per quantizer on random (z, codebook)
/// instances; the table the `quantcheck` command prints.
pub fn quantizer_flow_checks(
    k: usize,
    d: usize,
    batch: usize,
    seeds: &[u64],
    corruption: Corruption,
) -> Vec<FlowCheck> {
    let mut checks = Vec::new();
    let mut ibq_fracs = Vec::new();
    let mut vqgan_ok = true;
    let mut naive_ok = true;
    let mut ste_ok = true;
    let mut forward_ok = true;

    for &seed in seeds {
        let mut rng = Rng::new(seed);
        let z: Tensor<f64> = rng.tensor_normal(vec![batch, d], 0.0, 1.0);
        let cb: Tensor<f64> = rng.tensor_normal(vec![k, d], 0.0, 1.0);

        // IBQ all-codes gradient through z_q.
        {
            let mut t: Tape<f64> = Tape::new();
            let cbv = t.leaf(cb.clone(), true);
            let zv = t.constant(z.clone());
            let out = match corruption {
                Corruption::None => ibq_quantize(&mut t, zv, cbv, 1.0),
                Corruption::DetachIbqSoft => {
                    // Same computation with the categorical distribution
                    // detached: only the hard path remains.
                    let cb_t = t.transpose(cbv);
                    let logits = t.matmul(zv, cb_t);
                    let soft = t.softmax_rows(logits);
                    let soft_cut = t.detach(soft);
                    let (indices, hard) = argmax_onehot(t.value(soft));
                    let ind = t.straight_through_index(&hard, soft_cut);
                    let z_q = t.matmul(ind, cbv);
                    crate::quantize::QuantOut {
                        z_q,
                        indices,
                        soft: Some(soft),
                        q_selected: None,
                        soft_mode: false,
                        entropy_parts: None,
                        quant_loss: None,
                    }
                }
            };
            let z_q_value = t.value(out.z_q).clone();
            let loss = t.sum(out.z_q);
            let grads = t.backward(loss);
            let dcb = grads.get(cbv).expect("codebook gradient");
            let nonzero = (0..k).filter(|&r| dcb.row(r).iter().any(|&g| g != 0.0)).count();
            ibq_fracs.push(nonzero as f64 / k as f64);
            forward_ok &= out
                .indices
                .iter()
                .enumerate()
                .all(|(row, &idx)| z_q_value.row(row) == cb.row(idx));
        }

        // VQGAN: z_q carries no codebook gradient; the commit loss touches
        // exactly the selected rows; STE identity for the encoder.
        {
            let mut t: Tape<f64> = Tape::new();
            let cbv = t.leaf(cb.clone(), true);
            let zv = t.leaf(z.clone(), true);
            let out = vqgan_quantize(&mut t, zv, cbv);
            let w: Tensor<f64> = Rng::new(seed ^ 0xabc).tensor_normal(vec![batch, d], 0.0, 1.0);
            let wv = t.constant(w.clone());
            let weighted = t.mul(out.z_q, wv);
            let loss_zq = t.sum(weighted);
            let commit = crate::loss::vq_commit_loss(&mut t, zv, &out, 0.25);
            let total = t.add(loss_zq, commit);
            let selected: std::collections::HashSet<usize> = out.indices.iter().copied().collect();
            let grads = t.backward(total);
            let dz = grads.get(zv).expect("z gradient");
            // grad z = w exactly (STE identity) plus the commitment term.
            let commit_part: Vec<f64> = {
                let mut t2: Tape<f64> = Tape::new();
                let cbv2 = t2.leaf(cb.clone(), true);
                let zv2 = t2.leaf(z.clone(), true);
                let out2 = vqgan_quantize(&mut t2, zv2, cbv2);
                let c2 = crate::loss::vq_commit_loss(&mut t2, zv2, &out2, 0.25);
                let g2 = t2.backward(c2);
                g2.get(zv2).expect("commit z grad").data().to_vec()
            };
            ste_ok &= dz
                .data()
                .iter()
                .zip(w.data())
                .zip(&commit_part)
                .all(|((&got, &wj), &cj)| got == wj + cj);
            let dcb = grads.get(cbv).expect("codebook gradient");
            let touched: std::collections::HashSet<usize> =
                (0..k).filter(|&r| dcb.row(r).iter().any(|&g| g != 0.0)).collect();
            vqgan_ok &= touched == selected;
        }

        // Naive VQ: no gradient anywhere through z_q.
        {
            let mut t: Tape<f64> = Tape::new();
            let cbv = t.leaf(cb.clone(), true);
            let zv = t.leaf(z.clone(), true);
            let out = naive_vq_quantize(&mut t, zv, cbv);
            let loss = t.sum(out.z_q);
            let grads = t.backward(loss);
            naive_ok &= grads.get(zv).unwrap().data().iter().all(|&g| g == 0.0)
                && grads.get(cbv).unwrap().data().iter().all(|&g| g == 0.0);
        }
    }

    let min_frac = ibq_fracs.iter().cloned().fold(f64::INFINITY, f64::min);
    checks.push(FlowCheck {
        name: "ibq all-codes gradient".into(),
        pass: min_frac >= 0.99,
        detail: format!(
            "fraction of rows with nonzero gradient >= 0.99: measured {}",
            ibq_fracs.iter().map(|f| format!("{f:.3}")).collect::<Vec<_>>().join(", ")
        ),
    });
    checks.push(FlowCheck {
        name: "ibq forward equals hard selection".into(),
        pass: forward_ok,
        detail: "z_q rows bit-equal selected codebook rows".into(),
    });
    checks.push(FlowCheck {
        name: "vqgan selected-rows-only gradient".into(),
        pass: vqgan_ok,
        detail: "rows with nonzero gradient == batch-selected rows (exact set equality)".into(),
    });
    checks.push(FlowCheck {
        name: "vqgan/lfq ste identity".into(),
        pass: ste_ok,
        detail: "d<w,z_q>/dz == w exactly, plus the commitment term".into(),
    });
    checks.push(FlowCheck {
        name: "naive vq truncates gradient".into(),
        pass: naive_ok,
        detail: "z and codebook receive zero gradient through z_q".into(),
    });
    checks
}

pub fn render_flow_table(checks: &[FlowCheck]) -> String {
    let mut out = String::new();
    for c in checks {
        out.push_str(&format!(
            "{:<38} {}  {}\n",
            c.name,
            if c.pass { "pass" } else { "FAIL" },
            c.detail
        ));
    }
    out
}
