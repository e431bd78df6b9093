//! The five quantization schemes over a shared codebook.
//!
//! All quantizers map encoded feature rows z[B,D] to quantized rows
//! z_q[B,D] plus discrete indices, but differ in where gradients go:
//!
//! * `ibq_quantize` — straight-through on the one-hot categorical
//!   distribution between z and all codes: the forward picks the argmax
//!   code exactly, the backward routes gradient through the softmax to
//!   every codebook row and to z.
//! * `naive_vq_quantize` — nearest code by Euclidean distance; z_q carries
//!   no gradient at all (encoder truncated), codebook learns only through
//!   the quantization loss on selected rows.
//! * `vqgan_quantize` — nearest code with the classic straight-through
//!   estimator z + sg[q - z]: gradient w.r.t. z is the identity, the
//!   codebook learns only through the quantization loss.
//! * `lfq_quantize` — sign binarization per dimension with an implicit
//!   codebook {-1,+1}^d and the same passthrough estimator.
//! * `softvq_quantize` — temperature-weighted average over all codes in
//!   training mode (no STE), hard argmax selection in inference mode.

use crate::autodiff::{argmax_onehot, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Learnable K x D code matrix shared by IBQ, naive VQ, VQGAN and Soft VQ.
#[derive(Debug, Clone)]
pub struct Codebook {
    pub embeddings: Tensor<f32>,
}

/// How codebook entries are initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodebookInit {
    /// uniform(-1/K, 1/K), the classic VQ choice and the default.
    Uniform,
    /// normal(0, 0.02).
    Normal,
}

impl Codebook {
    pub fn init(k: usize, d: usize, init: CodebookInit, rng: &mut Rng) -> Self {
        assert!(k >= 2, "codebook needs K >= 2, got {k}");
        assert!(d >= 1, "codebook needs D >= 1, got {d}");
        let embeddings = match init {
            CodebookInit::Uniform => {
                let bound = 1.0 / k as f64;
                rng.tensor_uniform(vec![k, d], -bound, bound)
            }
            CodebookInit::Normal => rng.tensor_normal(vec![k, d], 0.0, 0.02),
        };
        Codebook { embeddings }
    }

    pub fn k(&self) -> usize {
        self.embeddings.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.embeddings.shape()[1]
    }
}

/// Implicit binary codebook for LFQ: codes are {-1,+1}^dim, K = 2^dim,
/// nothing learnable.
#[derive(Debug, Clone)]
pub struct LfqCodebook {
    dim: usize,
}

impl LfqCodebook {
    /// Dims above 20 are rejected: the entropy penalty enumerates all 2^dim
    /// codes.
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 || dim > 20 {
            return Err(Error::Config(format!(
                "lfq dimension must be in 1..=20, got {dim}"
            )));
        }
        Ok(LfqCodebook { dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn k(&self) -> usize {
        1 << self.dim
    }

    /// Code row for an index: bit i of the index selects +1/-1 for dim i.
    pub fn code_row<T: Scalar>(&self, index: usize) -> Vec<T> {
        (0..self.dim)
            .map(|i| {
                if (index >> i) & 1 == 1 {
                    T::one()
                } else {
                    -T::one()
                }
            })
            .collect()
    }

    /// All 2^dim code rows as a [K, dim] tensor.
    pub fn all_codes<T: Scalar>(&self) -> Tensor<T> {
        let k = self.k();
        let mut data = Vec::with_capacity(k * self.dim);
        for idx in 0..k {
            data.extend(self.code_row::<T>(idx));
        }
        Tensor::new(vec![k, self.dim], data)
    }
}

/// Which quantizer a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantizerKind {
    Ibq,
    Naive,
    Vqgan,
    Lfq,
    Softvq,
}

impl QuantizerKind {
    pub const ALL: [QuantizerKind; 5] = [
        QuantizerKind::Ibq,
        QuantizerKind::Naive,
        QuantizerKind::Vqgan,
        QuantizerKind::Lfq,
        QuantizerKind::Softvq,
    ];

    pub fn name(self) -> &'static str {
        match self {
            QuantizerKind::Ibq => "ibq",
            QuantizerKind::Naive => "naive",
            QuantizerKind::Vqgan => "vqgan",
            QuantizerKind::Lfq => "lfq",
            QuantizerKind::Softvq => "softvq",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ibq" => Ok(QuantizerKind::Ibq),
            "naive" => Ok(QuantizerKind::Naive),
            "vqgan" => Ok(QuantizerKind::Vqgan),
            "lfq" => Ok(QuantizerKind::Lfq),
            "softvq" => Ok(QuantizerKind::Softvq),
            other => Err(Error::Config(format!(
                "unknown quantizer '{other}' (expected ibq|naive|vqgan|lfq|softvq)"
            ))),
        }
    }
}

/// Result bundle of one quantization call.
pub struct QuantOut {
    /// Quantized feature rows fed to the decoder; carries whatever gradient
    /// path the scheme defines.
    pub z_q: Var,
    /// Hard code index per row, always in [0, K).
    pub indices: Vec<usize>,
    /// Categorical probabilities over codes (IBQ, LFQ, Soft VQ).
    pub soft: Option<Var>,
    /// Differentiable selection of the chosen code rows, used by the
    /// quantization losses. For IBQ this is Ind_hard · C (gradient to the
    /// selected rows only); for LFQ it is a constant (nothing learnable).
    pub q_selected: Option<Var>,
    /// Soft VQ training mode: z_q is a mixture, not a code row.
    pub soft_mode: bool,
    /// Forward-value entropies of `soft`: (mean per-sample, batch).
    pub entropy_parts: Option<(f64, f64)>,
    /// Scalar quantization loss, attached by the loss assembly.
    pub quant_loss: Option<Var>,
}

fn check_input<T: Scalar>(tape: &Tape<T>, z: Var, d_expected: usize, what: &str) -> (usize, usize) {
    let zv = tape.value(z);
    let (b, d) = zv.dims2();
    assert_eq!(
        d, d_expected,
        "{what}: feature dim {d} does not match codebook dim {d_expected}"
    );
    assert!(zv.all_finite(), "{what}: non-finite input features");
    (b, d)
}

fn entropy_parts_of<T: Scalar>(soft: &Tensor<T>) -> (f64, f64) {
    let (b, k) = soft.dims2();
    let mut per_sum = 0.0f64;
    let mut mean_p = vec![0.0f64; k];
    for i in 0..b {
        for j in 0..k {
            let p = soft.data()[i * k + j].as_f64();
            if p > 0.0 {
                per_sum -= p * p.ln();
            }
            mean_p[j] += p / b as f64;
        }
    }
    let batch: f64 = -mean_p.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>();
    (per_sum / b as f64, batch)
}

/// Nearest row of `cb` per row of `z` under Euclidean distance, ties broken
/// by lowest index. Distances are evaluated directly per pair so exact ties
/// stay exact.
pub fn nearest_codes<T: Scalar>(z: &Tensor<T>, cb: &Tensor<T>) -> Vec<usize> {
    let (b, d) = z.dims2();
    let (k, dc) = cb.dims2();
    assert_eq!(d, dc, "nearest_codes dim mismatch {d} vs {dc}");
    (0..b)
        .map(|i| {
            let zi = z.row(i);
            let mut best = 0usize;
            let mut best_dist = T::infinity();
            for c in 0..k {
                let row = &cb.data()[c * d..(c + 1) * d];
                let mut acc = T::zero();
                for (&a, &b_) in zi.iter().zip(row) {
                    let diff = a - b_;
                    acc = acc + diff * diff;
                }
                if acc < best_dist {
                    best_dist = acc;
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Index Backpropagation Quantization.
///
/// logits = z·Cᵀ (scaled by `logit_scale`), soft = softmax(logits),
/// hard = onehot(argmax(soft)), Ind = hard - sg[soft] + soft, z_q = Ind·C.
/// The forward value of z_q is exactly the argmax code row; the backward
/// reaches every row of C through the softmax and reaches z through the
/// logits.
pub fn ibq_quantize<T: Scalar>(
    tape: &mut Tape<T>,
    z: Var,
    cb: Var,
    logit_scale: T,
) -> QuantOut {
    let (k, d) = tape.value(cb).dims2();
    check_input(tape, z, d, "ibq_quantize");
    let cb_t = tape.transpose(cb);
    let mut logits = tape.matmul(z, cb_t);
    if logit_scale != T::one() {
        logits = tape.scale(logits, logit_scale);
    }
    assert!(
        tape.value(logits).all_finite(),
        "ibq_quantize: non-finite logits"
    );
    let soft = tape.softmax_rows(logits);
    let (indices, hard) = argmax_onehot(tape.value(soft));
    debug_assert!(indices.iter().all(|&i| i < k));
    let ind = tape.straight_through_index(&hard, soft);
    let z_q = tape.matmul(ind, cb);
    // z_q' of the double quantization loss: hard selection as a constant
    // coefficient matrix, so gradient lands on selected rows only.
    let hard_const = tape.constant(hard);
    let q_selected = tape.matmul(hard_const, cb);
    let parts = entropy_parts_of(tape.value(soft));
    QuantOut {
        z_q,
        indices,
        soft: Some(soft),
        q_selected: Some(q_selected),
        soft_mode: false,
        entropy_parts: Some(parts),
        quant_loss: None,
    }
}

/// Nearest-neighbor quantization with no straight-through estimator: the
/// argmin truncates all gradient flow through z_q.
pub fn naive_vq_quantize<T: Scalar>(tape: &mut Tape<T>, z: Var, cb: Var) -> QuantOut {
    let (_, d) = tape.value(cb).dims2();
    check_input(tape, z, d, "naive_vq_quantize");
    let indices = nearest_codes(tape.value(z), tape.value(cb));
    let q_selected = tape.gather_rows(cb, &indices);
    let z_q = tape.detach(q_selected);
    QuantOut {
        z_q,
        indices,
        soft: None,
        q_selected: Some(q_selected),
        soft_mode: false,
        entropy_parts: None,
        quant_loss: None,
    }
}

/// Nearest-neighbor quantization with the VQGAN straight-through estimator:
/// z_q = z + sg[q - z]. The forward equals q exactly; the adjoint w.r.t. z
/// is the identity; the codebook receives gradient only through the
/// quantization loss.
pub fn vqgan_quantize<T: Scalar>(tape: &mut Tape<T>, z: Var, cb: Var) -> QuantOut {
    let (_, d) = tape.value(cb).dims2();
    check_input(tape, z, d, "vqgan_quantize");
    let indices = nearest_codes(tape.value(z), tape.value(cb));
    let q_selected = tape.gather_rows(cb, &indices);
    let q_value = tape.value(q_selected).clone();
    let z_q = tape.ste_passthrough(&q_value, z);
    QuantOut {
        z_q,
        indices,
        soft: None,
        q_selected: Some(q_selected),
        soft_mode: false,
        entropy_parts: None,
        quant_loss: None,
    }
}

/// Lookup-free quantization: q_i = sign(z_i) with 0 mapped to -1, STE
/// passthrough, index from the sign bits (bit i = (q_i+1)/2, value 2^i).
/// The soft distribution for the entropy penalty is softmax over
/// -(||z - c||^2) logits, computed in the shift-equivalent form 2·z·cᵀ
/// (||c||^2 is constant over the implicit codebook).
pub fn lfq_quantize<T: Scalar>(tape: &mut Tape<T>, z: Var, cb: &LfqCodebook) -> QuantOut {
    let (b, d) = check_input(tape, z, cb.dim(), "lfq_quantize");
    let zv = tape.value(z);
    let mut q = Tensor::zeros(vec![b, d]);
    let mut indices = vec![0usize; b];
    for i in 0..b {
        for j in 0..d {
            let positive = zv.data()[i * d + j] > T::zero();
            q.data_mut()[i * d + j] = if positive { T::one() } else { -T::one() };
            if positive {
                indices[i] |= 1 << j;
            }
        }
    }
    let z_q = tape.ste_passthrough(&q, z);
    let codes = tape.constant(cb.all_codes::<T>());
    let codes_t = tape.transpose(codes);
    let prod = tape.matmul(z, codes_t);
    let logits = tape.scale(prod, T::from_f64(2.0));
    let soft = tape.softmax_rows(logits);
    let parts = entropy_parts_of(tape.value(soft));
    let q_const = tape.constant(q);
    QuantOut {
        z_q,
        indices,
        soft: Some(soft),
        q_selected: Some(q_const),
        soft_mode: false,
        entropy_parts: Some(parts),
        quant_loss: None,
    }
}

/// Soft vector quantization: in training mode z_q is the
/// softmax(logits/tau)-weighted average of all code rows (fully
/// differentiable, no STE); in inference mode it switches to hard argmax
/// selection the VQGAN way.
pub fn softvq_quantize<T: Scalar>(
    tape: &mut Tape<T>,
    z: Var,
    cb: Var,
    tau: T,
    train_mode: bool,
) -> QuantOut {
    assert!(tau > T::zero(), "softvq temperature must be positive");
    let (_, d) = tape.value(cb).dims2();
    check_input(tape, z, d, "softvq_quantize");
    let cb_t = tape.transpose(cb);
    let logits = tape.matmul(z, cb_t);
    let scaled = tape.scale(logits, T::one() / tau);
    let soft = tape.softmax_rows(scaled);
    let (indices, _) = argmax_onehot(tape.value(soft));
    let q_selected = tape.gather_rows(cb, &indices);
    let z_q = if train_mode {
        tape.matmul(soft, cb)
    } else {
        let q_value = tape.value(q_selected).clone();
        tape.ste_passthrough(&q_value, z)
    };
    let parts = entropy_parts_of(tape.value(soft));
    QuantOut {
        z_q,
        indices,
        soft: Some(soft),
        q_selected: Some(q_selected),
        soft_mode: train_mode,
        entropy_parts: Some(parts),
        quant_loss: None,
    }
}

/// Cosine decay of the Soft VQ temperature from 0.9 to 1e-6 over training.
pub fn softvq_temperature(step: u64, total_steps: u64) -> f64 {
    assert!(step <= total_steps, "step {step} beyond total {total_steps}");
    const TAU_START: f64 = 0.9;
    const TAU_END: f64 = 1e-6;
    let t = step as f64 / total_steps as f64;
    TAU_END + 0.5 * (TAU_START - TAU_END) * (1.0 + (std::f64::consts::PI * t).cos())
}
