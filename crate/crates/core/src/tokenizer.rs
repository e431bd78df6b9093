//! Stage-1 visual tokenizer: conv encoder, pluggable quantizer, mirrored
//! conv decoder, and the training loop.
//!
//! Architecture (layer recipe, so ports can match parameter counts):
//!
//! * encoder: conv3x3(3 -> c) stem, then per downsampling stage i=1..S
//!   (p = 2^S): conv3x3 stride 2 (c*2^(i-1) -> c*2^i) followed by
//!   `num_resblocks` residual blocks; head GroupNorm + SiLU +
//!   conv3x3(c*2^S -> D).
//! * decoder mirrors it: conv3x3(D -> c*2^S), per stage `num_resblocks`
//!   residual blocks, nearest 2x upsample, conv3x3(c*2^i -> c*2^(i-1));
//!   head GroupNorm + SiLU + conv3x3(c -> 3) + tanh into [-1,1].
//! * residual block: GN -> SiLU -> conv3x3 -> GN -> SiLU -> conv3x3 + skip.
//!
//! Parameter counts: conv(cin,cout) = 9*cin*cout + cout (1x1: cin*cout +
//! cout), gn(ch) = 2*ch, res(ch) = 2*conv(ch,ch) + 2*gn(ch); the codebook
//! adds K*D (zero for LFQ). [`tokenizer_param_count`] is the closed form and
//! the constructed model matches it exactly.

use crate::autodiff::{Conv2dSpec, Tape, Var};
use crate::data::ImageDataset;
use crate::error::{Error, Result};
use crate::loss::{
    double_quant_loss, entropy_penalty, reconstruction_loss, reconstruction_loss_l1, vq_commit_loss,
    LossBundle, LossWeights, ReconKind,
};
use crate::metrics::{UsageAccumulator, UsageStats};
use crate::nn::{Conv, GroupNorm, ParamId, ParamSet, ResBlock};
use crate::optim::{lr_schedule, AdamConfig, OptimState};
use crate::quantize::{
    ibq_quantize, lfq_quantize, naive_vq_quantize, softvq_quantize, softvq_temperature,
    vqgan_quantize, Codebook, CodebookInit, LfqCodebook, QuantOut, QuantizerKind,
};
use crate::rng::Rng;
use crate::tensor::Tensor;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TokenizerConfig {
    /// Codebook size K. For LFQ this must equal 2^code_dim.
    pub k: usize,
    /// Code dimension D (the encoder's output channel count).
    pub code_dim: usize,
    /// Spatial downsample ratio p (power of two).
    pub downsample: usize,
    pub base_channels: usize,
    pub num_resblocks: usize,
    pub quantizer: QuantizerKind,
    /// Commitment coefficient beta of the quantization losses.
    pub beta: f32,
    /// Scale on the IBQ logits (1.0 = plain dot product).
    pub logit_scale: f32,
    pub weights: LossWeights,
    pub recon: ReconKind,
    pub codebook_init: CodebookInit,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            k: 256,
            code_dim: 32,
            downsample: 4,
            base_channels: 16,
            num_resblocks: 1,
            quantizer: QuantizerKind::Ibq,
            beta: 0.25,
            logit_scale: 1.0,
            weights: LossWeights::default(),
            recon: ReconKind::Mse,
            codebook_init: CodebookInit::Uniform,
        }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.downsample.is_power_of_two() || self.downsample < 2 {
            return Err(Error::Config(format!(
                "downsample ratio must be a power of two >= 2, got {}",
                self.downsample
            )));
        }
        if self.quantizer == QuantizerKind::Lfq {
            LfqCodebook::new(self.code_dim)?;
            if self.k != 1 << self.code_dim {
                return Err(Error::Config(format!(
                    "lfq has an implicit codebook: k must equal 2^code_dim = {}, config says k = {}",
                    1usize << self.code_dim,
                    self.k
                )));
            }
        } else if self.k < 2 {
            return Err(Error::Config(format!("codebook size k must be >= 2, got {}", self.k)));
        }
        if self.code_dim == 0 {
            return Err(Error::Config("code_dim must be >= 1".into()));
        }
        if self.beta < 0.0 {
            return Err(Error::Config("beta must be >= 0".into()));
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.downsample.trailing_zeros() as usize
    }
}

struct Encoder {
    stem: Conv,
    downs: Vec<(Conv, Vec<ResBlock>)>,
    head_norm: GroupNorm,
    head: Conv,
}

struct Decoder {
    stem: Conv,
    ups: Vec<(Vec<ResBlock>, Conv)>,
    head_norm: GroupNorm,
    head: Conv,
}

pub struct TokenizerModel {
    pub cfg: TokenizerConfig,
    pub params: ParamSet,
    encoder: Encoder,
    decoder: Decoder,
    codebook: Option<ParamId>,
    lfq: Option<LfqCodebook>,
}

impl TokenizerModel {
    pub fn new(cfg: TokenizerConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let s = cfg.stages();
        let c = cfg.base_channels;
        let s1 = Conv2dSpec { stride: 1, pad: 1 };
        let s2 = Conv2dSpec { stride: 2, pad: 1 };
        let mut init_rng = rng.derive("tokenizer-init", 0);

        let stem = Conv::new(&mut params, "enc.stem", 3, c, 3, s1, &mut init_rng);
        let mut downs = Vec::new();
        for i in 1..=s {
            let cin = c << (i - 1);
            let cout = c << i;
            let down = Conv::new(&mut params, &format!("enc.down{i}"), cin, cout, 3, s2, &mut init_rng);
            let blocks = (0..cfg.num_resblocks)
                .map(|r| ResBlock::new(&mut params, &format!("enc.s{i}.res{r}"), cout, &mut init_rng))
                .collect();
            downs.push((down, blocks));
        }
        let top = c << s;
        let enc_head_norm = GroupNorm::new(&mut params, "enc.head_norm", top);
        let enc_head = Conv::new(&mut params, "enc.head", top, cfg.code_dim, 3, s1, &mut init_rng);
        let encoder = Encoder { stem, downs, head_norm: enc_head_norm, head: enc_head };

        let dec_stem = Conv::new(&mut params, "dec.stem", cfg.code_dim, top, 3, s1, &mut init_rng);
        let mut ups = Vec::new();
        for i in (1..=s).rev() {
            let ch = c << i;
            let blocks: Vec<ResBlock> = (0..cfg.num_resblocks)
                .map(|r| ResBlock::new(&mut params, &format!("dec.s{i}.res{r}"), ch, &mut init_rng))
                .collect();
            let up = Conv::new(&mut params, &format!("dec.up{i}"), ch, ch >> 1, 3, s1, &mut init_rng);
            ups.push((blocks, up));
        }
        let dec_head_norm = GroupNorm::new(&mut params, "dec.head_norm", c);
        let dec_head = Conv::new(&mut params, "dec.head", c, 3, 3, s1, &mut init_rng);
        let decoder = Decoder { stem: dec_stem, ups, head_norm: dec_head_norm, head: dec_head };

        let (codebook, lfq) = if cfg.quantizer == QuantizerKind::Lfq {
            (None, Some(LfqCodebook::new(cfg.code_dim)?))
        } else {
            let cb = Codebook::init(cfg.k, cfg.code_dim, cfg.codebook_init, &mut rng.derive("codebook", 0));
            (Some(params.add("codebook.embeddings", cb.embeddings)), None)
        };

        Ok(TokenizerModel { cfg, params, encoder, decoder, codebook, lfq })
    }

    pub fn codebook_tensor(&self) -> Option<&Tensor<f32>> {
        self.codebook.map(|id| self.params.get(id))
    }

    /// Code row values for arbitrary indices (explicit codebook rows, or the
    /// implicit ±1 pattern for LFQ).
    pub fn code_rows(&self, indices: &[usize]) -> Tensor<f32> {
        let d = self.cfg.code_dim;
        let mut data = Vec::with_capacity(indices.len() * d);
        match (&self.lfq, self.codebook) {
            (Some(lfq), _) => {
                for &i in indices {
                    data.extend(lfq.code_row::<f32>(i));
                }
            }
            (None, Some(cb)) => {
                let table = self.params.get(cb);
                for &i in indices {
                    data.extend_from_slice(table.row(i));
                }
            }
            _ => unreachable!("model has either a codebook or an lfq"),
        }
        Tensor::new(vec![indices.len(), d], data)
    }

    /// Encode images to feature rows: [B,3,H,W] -> ([B*h*w, D], h, w).
    pub fn encode(&self, tape: &mut Tape<f32>, vars: &[Var], images: Var) -> (Var, usize, usize) {
        let (b, ch, h, w) = tape.value(images).dims4();
        assert_eq!(ch, 3, "encoder expects RGB input, got {ch} channels");
        let p = self.cfg.downsample;
        assert!(
            h % p == 0 && w % p == 0,
            "image {h}x{w} not divisible by downsample ratio {p}"
        );
        let mut x = self.encoder.stem.forward(tape, vars, images);
        for (down, blocks) in &self.encoder.downs {
            x = down.forward(tape, vars, x);
            for block in blocks {
                x = block.forward(tape, vars, x);
            }
        }
        x = self.encoder.head_norm.forward(tape, vars, x);
        x = tape.silu(x);
        x = self.encoder.head.forward(tape, vars, x);
        let (_, _, oh, ow) = tape.value(x).dims4();
        debug_assert_eq!((oh, ow), (h / p, w / p));
        let _ = b;
        (tape.nchw_to_rows(x), oh, ow)
    }

    /// Decode quantized feature rows back to images in [-1,1].
    pub fn decode(
        &self,
        tape: &mut Tape<f32>,
        vars: &[Var],
        rows: Var,
        batch: usize,
        h: usize,
        w: usize,
    ) -> Var {
        let (n, d) = tape.value(rows).dims2();
        assert_eq!(n, batch * h * w, "decoder row count {n} != {batch}*{h}*{w}");
        assert_eq!(d, self.cfg.code_dim, "decoder feature dim");
        let mut x = tape.rows_to_nchw(rows, batch, d, h, w);
        x = self.decoder.stem.forward(tape, vars, x);
        for (blocks, up) in &self.decoder.ups {
            for block in blocks {
                x = block.forward(tape, vars, x);
            }
            x = tape.upsample_nearest_2x(x);
            x = up.forward(tape, vars, x);
        }
        x = self.decoder.head_norm.forward(tape, vars, x);
        x = tape.silu(x);
        x = self.decoder.head.forward(tape, vars, x);
        tape.tanh(x)
    }

    /// Dispatch to the configured quantizer. `tau` only matters for Soft VQ;
    /// `train_mode` selects its soft path.
    pub fn quantize(
        &self,
        tape: &mut Tape<f32>,
        vars: &[Var],
        z: Var,
        tau: f32,
        train_mode: bool,
    ) -> QuantOut {
        match self.cfg.quantizer {
            QuantizerKind::Ibq => {
                ibq_quantize(tape, z, vars[self.codebook.expect("ibq codebook").0], self.cfg.logit_scale)
            }
            QuantizerKind::Naive => {
                naive_vq_quantize(tape, z, vars[self.codebook.expect("naive codebook").0])
            }
            QuantizerKind::Vqgan => {
                vqgan_quantize(tape, z, vars[self.codebook.expect("vqgan codebook").0])
            }
            QuantizerKind::Lfq => lfq_quantize(tape, z, self.lfq.as_ref().expect("lfq codebook")),
            QuantizerKind::Softvq => softvq_quantize(
                tape,
                z,
                vars[self.codebook.expect("softvq codebook").0],
                tau,
                train_mode,
            ),
        }
    }

    /// The quantization loss the scheme trains with.
    pub fn quant_loss(&self, tape: &mut Tape<f32>, z: Var, out: &QuantOut) -> Var {
        let beta = self.cfg.beta;
        match self.cfg.quantizer {
            QuantizerKind::Ibq => double_quant_loss(tape, z, out, beta),
            _ => vq_commit_loss(tape, z, out, beta),
        }
    }
}

/// Closed-form parameter count of [`TokenizerModel::new`] for a config.
pub fn tokenizer_param_count(cfg: &TokenizerConfig) -> usize {
    let conv = |cin: usize, cout: usize| 9 * cin * cout + cout;
    let gn = |ch: usize| 2 * ch;
    let res = |ch: usize| 2 * conv(ch, ch) + 2 * gn(ch);
    let s = cfg.stages();
    let c = cfg.base_channels;
    let r = cfg.num_resblocks;
    let top = c << s;
    let mut total = conv(3, c);
    for i in 1..=s {
        total += conv(c << (i - 1), c << i) + r * res(c << i);
    }
    total += gn(top) + conv(top, cfg.code_dim);
    total += conv(cfg.code_dim, top);
    for i in (1..=s).rev() {
        total += r * res(c << i) + conv(c << i, c << (i - 1));
    }
    total += gn(c) + conv(c, 3);
    if cfg.quantizer != QuantizerKind::Lfq {
        total += cfg.k * cfg.code_dim;
    }
    total
}

#[derive(Debug, Clone)]
pub struct TokenizerTrainConfig {
    pub model: TokenizerConfig,
    pub epochs: u64,
    pub batch: usize,
    pub base_lr: f32,
    /// Multi-step decay factor (0.01 per milestone passed).
    pub lr_decay: f32,
    /// Step milestones; `None` puts a single milestone at 80% of total steps.
    pub milestones: Option<Vec<u64>>,
    pub seed: u64,
    /// Held-out fraction for the per-epoch eval pass.
    pub holdout: f64,
    /// Stop (checkpoint and return) after this many epochs while keeping the
    /// schedule of the full `epochs` run; resume later to finish.
    pub stop_after: Option<u64>,
}

impl Default for TokenizerTrainConfig {
    fn default() -> Self {
        TokenizerTrainConfig {
            model: TokenizerConfig::default(),
            epochs: 20,
            batch: 64,
            base_lr: 1e-4,
            lr_decay: 0.01,
            milestones: None,
            seed: 42,
            holdout: 0.1,
            stop_after: None,
        }
    }
}

pub struct TrainState {
    pub model: TokenizerModel,
    pub optim: OptimState,
    pub step: u64,
    pub epoch: u64,
    pub total_steps: u64,
}

#[derive(Debug, Clone)]
pub struct StepStats {
    pub loss_total: f64,
    pub loss_recon: f64,
    pub loss_quant: f64,
    pub loss_entropy: f64,
    pub indices: Vec<usize>,
}

/// One optimization step: encode, quantize, decode, assemble losses,
/// backward, Adam.
pub fn tokenizer_step(state: &mut TrainState, images: &Tensor<f32>, lr: f32) -> Result<StepStats> {
    let model = &state.model;
    let mut tape: Tape<f32> = Tape::new();
    let vars = model.params.load(&mut tape);
    let x = tape.constant(images.clone());
    let (z, h, w) = model.encode(&mut tape, &vars, x);
    if !tape.value(z).all_finite() {
        return Err(Error::Numeric(format!(
            "non-finite encoder features at step {}",
            state.step
        )));
    }
    let tau = softvq_temperature(state.step, state.total_steps.max(1)) as f32;
    let out = model.quantize(&mut tape, &vars, z, tau, true);
    let batch = images.shape()[0];
    let x_hat = model.decode(&mut tape, &vars, out.z_q, batch, h, w);
    let recon = match model.cfg.recon {
        ReconKind::Mse => reconstruction_loss(&mut tape, x_hat, x),
        ReconKind::L1 => reconstruction_loss_l1(&mut tape, x_hat, x),
    };
    let quant = model.quant_loss(&mut tape, z, &out);
    let entropy = out.soft.map(|soft| entropy_penalty(&mut tape, soft).0);
    let bundle = LossBundle::assemble(&mut tape, recon, quant, entropy, model.cfg.weights);
    let (total, recon_v, quant_v, entropy_v) = bundle.values(&tape);
    if !total.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss at step {}", state.step)));
    }
    let loss = bundle.total;
    let indices = out.indices;
    let mut grads = tape.backward(loss);
    let grad_list: Vec<Option<Tensor<f32>>> = vars.iter().map(|&v| grads.take(v)).collect();
    state.optim.config.lr = lr;
    let mut tensors: Vec<Tensor<f32>> = state.model.params.tensors();
    state.optim.step(&mut tensors, &grad_list)?;
    state.model.params.set_all(tensors);
    state.step += 1;
    Ok(StepStats {
        loss_total: total,
        loss_recon: recon_v,
        loss_quant: quant_v,
        loss_entropy: entropy_v,
        indices,
    })
}

/// Soft VQ temperature at a checkpoint's position in its cosine schedule.
pub fn softvq_mid_tau(state: &TrainState) -> f32 {
    softvq_temperature(state.step, state.total_steps.max(1)) as f32
}

/// Quantization mode for evaluation passes.
#[derive(Debug, Clone, Copy)]
pub enum EvalMode {
    /// Hard selection (the inference path of every scheme).
    Hard,
    /// Soft VQ's training path at the given temperature.
    Soft(f32),
}

#[derive(Debug, Clone)]
pub struct EvalStats {
    pub usage: UsageStats,
    pub psnr_db: f64,
    /// Mean distance from codes to nearest encoded feature over mean feature
    /// norm (None for LFQ's implicit codebook).
    pub distribution_gap: Option<f64>,
}

/// Full eval pass: pooled-MSE PSNR, usage, perplexity, distribution gap.
pub fn evaluate(
    model: &TokenizerModel,
    data: &ImageDataset,
    eval_indices: &[usize],
    batch: usize,
    mode: EvalMode,
) -> EvalStats {
    assert!(!eval_indices.is_empty(), "evaluate on an empty split");
    let k = model.cfg.k;
    let mut acc = UsageAccumulator::new(k);
    let mut sq_err = 0.0f64;
    let mut count = 0usize;
    let mut feature_rows: Vec<f32> = Vec::new();
    let mut feature_count = 0usize;
    let effective_batch = batch.max(1).min(eval_indices.len());
    for chunk in eval_indices.chunks(effective_batch) {
        let (images, _) = data.batch(chunk);
        let mut tape: Tape<f32> = Tape::new();
        let vars = model.params.load_frozen(&mut tape);
        let x = tape.constant(images.clone());
        let (z, h, w) = model.encode(&mut tape, &vars, x);
        let (tau, train_mode) = match mode {
            EvalMode::Hard => (1e-6, false),
            EvalMode::Soft(t) => (t, true),
        };
        let out = model.quantize(&mut tape, &vars, z, tau, train_mode);
        let x_hat = model.decode(&mut tape, &vars, out.z_q, chunk.len(), h, w);
        acc.record(&out.indices);
        for (a, b) in tape.value(x_hat).data().iter().zip(images.data()) {
            let d = *a as f64 - *b as f64;
            sq_err += d * d;
        }
        count += images.numel();
        // Keep up to 512 feature rows for the distribution-gap proxy.
        let zv = tape.value(z);
        let (rows, d) = zv.dims2();
        for r in 0..rows {
            if feature_count >= 512 {
                break;
            }
            feature_rows.extend_from_slice(zv.row(r));
            feature_count += 1;
        }
        let _ = d;
    }
    let mse = sq_err / count as f64;
    let psnr_db = if mse == 0.0 { f64::INFINITY } else { 10.0 * (4.0 / mse).log10() };
    let gap = model.codebook_tensor().map(|cb| {
        let features = Tensor::new(
            vec![feature_count, model.cfg.code_dim],
            feature_rows.clone(),
        );
        crate::metrics::distribution_gap(cb, &features)
    });
    EvalStats { usage: acc.finalize(), psnr_db, distribution_gap: gap }
}

/// Encoded feature rows of a batch, for diagnostics and CSV export.
pub fn encode_features(model: &TokenizerModel, images: &Tensor<f32>) -> Tensor<f32> {
    let mut tape: Tape<f32> = Tape::new();
    let vars = model.params.load_frozen(&mut tape);
    let x = tape.constant(images.clone());
    let (z, _, _) = model.encode(&mut tape, &vars, x);
    tape.value(z).clone()
}

/// Reconstruct a batch through the hard quantization path.
pub fn reconstruct(model: &TokenizerModel, images: &Tensor<f32>) -> (Tensor<f32>, Vec<usize>) {
    let mut tape: Tape<f32> = Tape::new();
    let vars = model.params.load_frozen(&mut tape);
    let x = tape.constant(images.clone());
    let (z, h, w) = model.encode(&mut tape, &vars, x);
    let out = model.quantize(&mut tape, &vars, z, 1e-6, false);
    let batch = images.shape()[0];
    let x_hat = model.decode(&mut tape, &vars, out.z_q, batch, h, w);
    (tape.value(x_hat).clone(), out.indices)
}

/// Encode and hard-quantize every image into T indices in raster order,
/// with its class label. The result is invariant to `batch` because every
/// image is processed independently.
pub fn tokenize_dataset(
    model: &TokenizerModel,
    data: &ImageDataset,
    batch: usize,
) -> Result<crate::tokens::TokenDataset> {
    let size = data.image_size();
    let p = model.cfg.downsample;
    if size % p != 0 {
        return Err(Error::Config(format!(
            "image size {size} not divisible by tokenizer downsample {p}"
        )));
    }
    if data.num_classes > u16::MAX as usize {
        return Err(Error::Data(format!("{} classes exceed u16", data.num_classes)));
    }
    let grid = size / p;
    let t = (grid * grid) as u32;
    let mut out =
        crate::tokens::TokenDataset::new(model.cfg.k as u32, t, data.num_classes as u32);
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(batch.max(1)) {
        let (images, labels) = data.batch(chunk);
        let (_, indices) = reconstruct(model, &images);
        for (j, &label) in labels.iter().enumerate() {
            let per = t as usize;
            let record: Vec<u32> =
                indices[j * per..(j + 1) * per].iter().map(|&i| i as u32).collect();
            out.push(label as u16, record)?;
        }
    }
    Ok(out)
}

/// Decode raw code indices (a sampled token grid) to images.
pub fn decode_indices(
    model: &TokenizerModel,
    indices: &[usize],
    batch: usize,
    h: usize,
    w: usize,
) -> Tensor<f32> {
    assert_eq!(indices.len(), batch * h * w, "token count mismatch");
    assert!(indices.iter().all(|&i| i < model.cfg.k), "token index out of range");
    let rows = model.code_rows(indices);
    let mut tape: Tape<f32> = Tape::new();
    let vars = model.params.load_frozen(&mut tape);
    let rows_v = tape.constant(rows);
    let x_hat = model.decode(&mut tape, &vars, rows_v, batch, h, w);
    tape.value(x_hat).clone()
}

const CKPT_NAME: &str = "checkpoint.ibqa";
const METRICS_NAME: &str = "metrics.csv";
pub const METRICS_HEADER: &str =
    "step,epoch,lr,loss_total,loss_recon,loss_quant,loss_entropy,usage,perplexity,psnr_val";

pub fn checkpoint_path(out_dir: &Path) -> PathBuf {
    out_dir.join(CKPT_NAME)
}

pub fn metrics_path(out_dir: &Path) -> PathBuf {
    out_dir.join(METRICS_NAME)
}

fn quantizer_index(kind: QuantizerKind) -> u64 {
    QuantizerKind::ALL.iter().position(|&k| k == kind).expect("known kind") as u64
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let mut archive = crate::archive::TensorArchive::new();
    let cfg = &state.model.cfg;
    archive.push_u64("meta.step", state.step);
    archive.push_u64("meta.epoch", state.epoch);
    archive.push_u64("meta.total_steps", state.total_steps);
    archive.push_u64("meta.optim.step", state.optim.step);
    archive.push_u64("meta.model.k", cfg.k as u64);
    archive.push_u64("meta.model.code_dim", cfg.code_dim as u64);
    archive.push_u64("meta.model.downsample", cfg.downsample as u64);
    archive.push_u64("meta.model.base_channels", cfg.base_channels as u64);
    archive.push_u64("meta.model.num_resblocks", cfg.num_resblocks as u64);
    archive.push_u64("meta.model.quantizer", quantizer_index(cfg.quantizer));
    archive.push_f64("meta.model.beta", Tensor::scalar(cfg.beta as f64));
    archive.push_f64("meta.model.logit_scale", Tensor::scalar(cfg.logit_scale as f64));
    archive.push_f64(
        "meta.model.weights",
        Tensor::new(
            vec![3],
            vec![cfg.weights.recon as f64, cfg.weights.quant as f64, cfg.weights.entropy as f64],
        ),
    );
    archive.push_u64("meta.model.recon_l1", matches!(cfg.recon, ReconKind::L1) as u64);
    archive.push_u64(
        "meta.model.codebook_normal_init",
        matches!(cfg.codebook_init, CodebookInit::Normal) as u64,
    );
    state.model.params.write_archive(&mut archive, "param.");
    for (i, m) in state.optim.m.iter().enumerate() {
        archive.push_f32(&format!("optim.m.{i}"), m.clone());
    }
    for (i, v) in state.optim.v.iter().enumerate() {
        archive.push_f32(&format!("optim.v.{i}"), v.clone());
    }
    archive.save(path)
}

pub fn load_checkpoint(path: &Path, adam: AdamConfig) -> Result<TrainState> {
    let archive = crate::archive::TensorArchive::load(path)?;
    let weights = match archive.get("meta.model.weights")? {
        crate::archive::ArchiveTensor::F64(t) if t.numel() == 3 => LossWeights {
            recon: t.data()[0] as f32,
            quant: t.data()[1] as f32,
            entropy: t.data()[2] as f32,
        },
        _ => return Err(Error::Format("checkpoint weights entry malformed".into())),
    };
    let get_f64 = |name: &str| -> Result<f64> {
        match archive.get(name)? {
            crate::archive::ArchiveTensor::F64(t) if t.numel() == 1 => Ok(t.item()),
            _ => Err(Error::Format(format!("checkpoint entry '{name}' malformed"))),
        }
    };
    let quantizer = QuantizerKind::ALL
        .get(archive.get_u64("meta.model.quantizer")? as usize)
        .copied()
        .ok_or_else(|| Error::Format("checkpoint quantizer index out of range".into()))?;
    let cfg = TokenizerConfig {
        k: archive.get_u64("meta.model.k")? as usize,
        code_dim: archive.get_u64("meta.model.code_dim")? as usize,
        downsample: archive.get_u64("meta.model.downsample")? as usize,
        base_channels: archive.get_u64("meta.model.base_channels")? as usize,
        num_resblocks: archive.get_u64("meta.model.num_resblocks")? as usize,
        quantizer,
        beta: get_f64("meta.model.beta")? as f32,
        logit_scale: get_f64("meta.model.logit_scale")? as f32,
        weights,
        recon: if archive.get_u64("meta.model.recon_l1")? == 1 { ReconKind::L1 } else { ReconKind::Mse },
        codebook_init: if archive.get_u64("meta.model.codebook_normal_init")? == 1 {
            CodebookInit::Normal
        } else {
            CodebookInit::Uniform
        },
    };
    let mut model = TokenizerModel::new(cfg, &mut Rng::new(0))?;
    model.params.read_archive(&archive, "param.")?;
    let tensors = model.params.tensors();
    let mut optim = OptimState::new(adam, &tensors);
    optim.step = archive.get_u64("meta.optim.step")?;
    for i in 0..tensors.len() {
        let m = archive.get_f32(&format!("optim.m.{i}"))?;
        let v = archive.get_f32(&format!("optim.v.{i}"))?;
        if m.shape() != tensors[i].shape() || v.shape() != tensors[i].shape() {
            return Err(Error::Format(format!("optimizer state {i} shape mismatch")));
        }
        optim.m[i] = m.clone();
        optim.v[i] = v.clone();
    }
    Ok(TrainState {
        model,
        optim,
        step: archive.get_u64("meta.step")?,
        epoch: archive.get_u64("meta.epoch")?,
        total_steps: archive.get_u64("meta.total_steps")?,
    })
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub epochs_run: u64,
    pub final_usage: f64,
    pub final_perplexity: f64,
    pub final_psnr: f64,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

fn fmt(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.6}")
    }
}

/// Train (or resume) a tokenizer. Writes `metrics.csv` (one row per epoch)
/// and a rolling `checkpoint.ibqa` under `out_dir`. With `resume`, picks up
/// from the checkpoint in `out_dir` and appends to the existing CSV, so an
/// interrupted-and-resumed run produces byte-identical artifacts.
pub fn train_tokenizer(
    data: &ImageDataset,
    cfg: &TokenizerTrainConfig,
    out_dir: &Path,
    resume: bool,
) -> Result<TrainSummary> {
    cfg.model.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ckpt_path = checkpoint_path(out_dir);
    let csv_path = metrics_path(out_dir);

    let (train_idx, eval_idx) = data.split(cfg.holdout, cfg.seed);
    let effective_batch = cfg.batch.max(1).min(train_idx.len());
    let steps_per_epoch = (train_idx.len() / effective_batch).max(1) as u64;
    let total_steps = steps_per_epoch * cfg.epochs;
    let milestones = cfg
        .milestones
        .clone()
        .unwrap_or_else(|| vec![(total_steps as f64 * 0.8) as u64]);
    let adam = AdamConfig::tokenizer(cfg.base_lr);

    let mut state = if resume {
        if !ckpt_path.exists() {
            return Err(Error::Config(format!(
                "resume requested but no checkpoint at {}",
                ckpt_path.display()
            )));
        }
        load_checkpoint(&ckpt_path, adam)?
    } else {
        let model = TokenizerModel::new(cfg.model.clone(), &mut Rng::new(cfg.seed))?;
        let optim = OptimState::new(adam, &model.params.tensors());
        let _ = std::fs::remove_file(&csv_path);
        TrainState { model, optim, step: 0, epoch: 0, total_steps }
    };
    state.total_steps = total_steps;

    let mut csv = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&csv_path)
        .map_err(|e| Error::io(&csv_path, e))?;
    if state.epoch == 0 {
        writeln!(csv, "{METRICS_HEADER}").map_err(|e| Error::io(&csv_path, e))?;
    }

    let shuffle_base = Rng::new(cfg.seed);
    let mut summary = TrainSummary {
        epochs_run: state.epoch,
        final_usage: 0.0,
        final_perplexity: 0.0,
        final_psnr: 0.0,
        checkpoint: ckpt_path.clone(),
        metrics: csv_path.clone(),
    };

    let last_epoch = cfg.stop_after.map_or(cfg.epochs, |s| s.min(cfg.epochs));
    for epoch in state.epoch..last_epoch {
        let mut order = train_idx.clone();
        shuffle_base.derive("shuffle", epoch).shuffle(&mut order);
        let mut sums = [0.0f64; 4];
        let mut batches = 0u64;
        let mut lr = cfg.base_lr;
        for chunk in order.chunks_exact(effective_batch) {
            let (images, _) = data.batch(chunk);
            lr = lr_schedule(state.step, cfg.base_lr, cfg.lr_decay, &milestones);
            let stats = tokenizer_step(&mut state, &images, lr).map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!(
                    "{msg}; last good checkpoint: {}",
                    if ckpt_path.exists() { ckpt_path.display().to_string() } else { "none".into() }
                )),
                other => other,
            })?;
            sums[0] += stats.loss_total;
            sums[1] += stats.loss_recon;
            sums[2] += stats.loss_quant;
            sums[3] += stats.loss_entropy;
            batches += 1;
        }
        state.epoch = epoch + 1;
        let eval = evaluate(&state.model, data, &eval_idx, effective_batch, EvalMode::Hard);
        let n = batches.max(1) as f64;
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{}",
            state.step,
            state.epoch,
            fmt(lr as f64),
            fmt(sums[0] / n),
            fmt(sums[1] / n),
            fmt(sums[2] / n),
            fmt(sums[3] / n),
            fmt(eval.usage.usage),
            fmt(eval.usage.perplexity),
            fmt(eval.psnr_db)
        )
        .map_err(|e| Error::io(&csv_path, e))?;
        save_checkpoint(&state, &ckpt_path)?;
        summary.epochs_run = state.epoch;
        summary.final_usage = eval.usage.usage;
        summary.final_perplexity = eval.usage.perplexity;
        summary.final_psnr = eval.psnr_db;
    }
    csv.flush().map_err(|e| Error::io(&csv_path, e))?;
    Ok(summary)
}
