//! Shared model plumbing: a named parameter registry and the conv/norm
//! building blocks used by the tokenizer (and linear layers used by the AR
//! model).

use crate::archive::TensorArchive;
use crate::autodiff::{Conv2dSpec, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Handle into a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Ordered, named collection of learnable tensors. The order is the
/// optimizer-state order and the checkpoint order.
#[derive(Debug, Default, Clone)]
pub struct ParamSet {
    entries: Vec<(String, Tensor<f32>)>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<f32>) -> ParamId {
        let name = name.into();
        assert!(
            !self.entries.iter().any(|(n, _)| *n == name),
            "duplicate parameter '{name}'"
        );
        self.entries.push((name, value));
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tensors(&self) -> Vec<Tensor<f32>> {
        self.entries.iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<f32>> {
        self.entries.iter_mut().map(|(_, t)| t).collect()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<f32> {
        &self.entries[id.0].1
    }

    pub fn set_all(&mut self, tensors: Vec<Tensor<f32>>) {
        assert_eq!(tensors.len(), self.entries.len());
        for ((_, slot), t) in self.entries.iter_mut().zip(tensors) {
            assert_eq!(slot.shape(), t.shape());
            *slot = t;
        }
    }

    pub fn total_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Load every parameter onto a tape as a requires-grad leaf, in order.
    pub fn load(&self, tape: &mut Tape<f32>) -> Vec<Var> {
        self.entries.iter().map(|(_, t)| tape.leaf(t.clone(), true)).collect()
    }

    /// Load as constants (no gradient bookkeeping), for eval passes.
    pub fn load_frozen(&self, tape: &mut Tape<f32>) -> Vec<Var> {
        self.entries.iter().map(|(_, t)| tape.constant(t.clone())).collect()
    }

    pub fn write_archive(&self, archive: &mut TensorArchive, prefix: &str) {
        for (name, tensor) in &self.entries {
            archive.push_f32(&format!("{prefix}{name}"), tensor.clone());
        }
    }

    pub fn read_archive(&mut self, archive: &TensorArchive, prefix: &str) -> Result<()> {
        for (name, slot) in self.entries.iter_mut() {
            let stored = archive.get_f32(&format!("{prefix}{name}"))?;
            if stored.shape() != slot.shape() {
                return Err(Error::Format(format!(
                    "checkpoint parameter '{name}' has shape {:?}, model expects {:?}",
                    stored.shape(),
                    slot.shape()
                )));
            }
            *slot = stored.clone();
        }
        Ok(())
    }
}

/// 3x3 (or 1x1) convolution layer handle.
#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub spec: Conv2dSpec,
}

impl Conv {
    /// He-initialized weights, zero bias.
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        spec: Conv2dSpec,
        rng: &mut Rng,
    ) -> Self {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let w = params.add(format!("{name}.w"), rng.tensor_normal(vec![cout, cin, k, k], 0.0, std));
        let b = params.add(format!("{name}.b"), Tensor::zeros(vec![cout]));
        Conv { w, b, spec }
    }

    pub fn forward(&self, tape: &mut Tape<f32>, vars: &[Var], x: Var) -> Var {
        tape.conv2d(x, vars[self.w.0], vars[self.b.0], self.spec)
    }
}

/// Group normalization with per-channel affine. The group count is the
/// largest power of two <= 8 dividing the channel count.
#[derive(Debug, Clone, Copy)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
    pub channels: usize,
}

pub fn group_count(channels: usize) -> usize {
    [8usize, 4, 2]
        .into_iter()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

impl GroupNorm {
    pub fn new(params: &mut ParamSet, name: &str, channels: usize) -> Self {
        let gamma = params.add(format!("{name}.gamma"), Tensor::full(vec![channels], 1.0));
        let beta = params.add(format!("{name}.beta"), Tensor::zeros(vec![channels]));
        GroupNorm { gamma, beta, groups: group_count(channels), channels }
    }

    pub fn forward(&self, tape: &mut Tape<f32>, vars: &[Var], x: Var) -> Var {
        let (b, c, h, w) = tape.value(x).dims4();
        assert_eq!(c, self.channels, "group norm channel mismatch");
        let g = self.groups;
        let per = (c / g) * h * w;
        let rows = tape.reshape(x, vec![b * g, per]);
        let inv_n = 1.0 / per as f32;
        let sums = tape.sum_cols(rows);
        let mu = tape.scale(sums, inv_n);
        let neg_mu = tape.scale(mu, -1.0);
        let centered = tape.add_col(rows, neg_mu);
        let sq = tape.square(centered);
        let var_sums = tape.sum_cols(sq);
        let var = tape.scale(var_sums, inv_n);
        let var_eps = tape.add_scalar(var, 1e-6);
        let std = tape.sqrt(var_eps);
        let inv_std = tape.recip(std);
        let normed = tape.mul_col(centered, inv_std);

        // Per-channel affine via [B*C, H*W] rows and a gathered column.
        let bc_rows = tape.reshape(normed, vec![b * c, h * w]);
        let idx: Vec<usize> = (0..b).flat_map(|_| 0..c).collect();
        let gamma_col = tape.reshape(vars[self.gamma.0], vec![c, 1]);
        let beta_col = tape.reshape(vars[self.beta.0], vec![c, 1]);
        let gamma_g = tape.gather_rows(gamma_col, &idx);
        let beta_g = tape.gather_rows(beta_col, &idx);
        let gamma_flat = tape.reshape(gamma_g, vec![b * c]);
        let beta_flat = tape.reshape(beta_g, vec![b * c]);
        let scaled = tape.mul_col(bc_rows, gamma_flat);
        let shifted = tape.add_col(scaled, beta_flat);
        tape.reshape(shifted, vec![b, c, h, w])
    }
}

/// Pre-activation residual block: GN -> SiLU -> conv -> GN -> SiLU -> conv,
/// plus the skip connection.
#[derive(Debug, Clone, Copy)]
pub struct ResBlock {
    pub n1: GroupNorm,
    pub c1: Conv,
    pub n2: GroupNorm,
    pub c2: Conv,
}

impl ResBlock {
    pub fn new(params: &mut ParamSet, name: &str, channels: usize, rng: &mut Rng) -> Self {
        let spec = Conv2dSpec { stride: 1, pad: 1 };
        ResBlock {
            n1: GroupNorm::new(params, &format!("{name}.n1"), channels),
            c1: Conv::new(params, &format!("{name}.c1"), channels, channels, 3, spec, rng),
            n2: GroupNorm::new(params, &format!("{name}.n2"), channels),
            c2: Conv::new(params, &format!("{name}.c2"), channels, channels, 3, spec, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape<f32>, vars: &[Var], x: Var) -> Var {
        let h = self.n1.forward(tape, vars, x);
        let h = tape.silu(h);
        let h = self.c1.forward(tape, vars, h);
        let h = self.n2.forward(tape, vars, h);
        let h = tape.silu(h);
        let h = self.c2.forward(tape, vars, h);
        tape.add(x, h)
    }
}

/// Dense layer y = x·Wᵀ + b over row-major [N, in] activations.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        dim_in: usize,
        dim_out: usize,
        bias: bool,
        std: f64,
        rng: &mut Rng,
    ) -> Self {
        let w = params.add(format!("{name}.w"), rng.tensor_normal(vec![dim_out, dim_in], 0.0, std));
        let b = bias.then(|| params.add(format!("{name}.b"), Tensor::zeros(vec![dim_out])));
        Linear { w, b }
    }

    /// Zero-initialized weights (AdaLN projections, output heads).
    pub fn new_zeros(
        params: &mut ParamSet,
        name: &str,
        dim_in: usize,
        dim_out: usize,
        bias: bool,
    ) -> Self {
        let w = params.add(format!("{name}.w"), Tensor::zeros(vec![dim_out, dim_in]));
        let b = bias.then(|| params.add(format!("{name}.b"), Tensor::zeros(vec![dim_out])));
        Linear { w, b }
    }

    pub fn forward(&self, tape: &mut Tape<f32>, vars: &[Var], x: Var) -> Var {
        let wt = tape.transpose(vars[self.w.0]);
        let y = tape.matmul(x, wt);
        match self.b {
            Some(b) => tape.add_bias(y, vars[b.0]),
            None => y,
        }
    }
}
