//! Class-conditional causal transformer over token indices.
//!
//! Llama-style blocks (RMSNorm, RoPE, SwiGLU, no biases in attention/FFN)
//! with DiT-style adaptive normalization: each block predicts
//! (scale, shift, gate) pairs for its attention and FFN branches from the
//! class conditioning vector, through a zero-initialized projection, so
//! every block is the identity map at initialization. The class embedding
//! feeds a two-layer SiLU MLP whose output is both the start token and the
//! AdaLN conditioning. The output head is zero-initialized, so an untrained
//! model predicts the uniform distribution exactly.
//!
//! Parameter count (see [`ar_param_count`]): with vocab K, classes C,
//! width w, depth d and SwiGLU hidden m = 256*ceil(floor(8w/3)/256):
//!
//! ```text
//! K*w (tok emb) + C*w (class emb) + 2*(w^2+w) (cond MLP)
//! + d * (4w^2 (attn) + 3*w*m (ffn) + 2w (norms) + 6w^2+6w (adaln))
//! + w (final norm) + 2w^2+2w (final adaln) + K*w (head)
//! ```

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Linear, ParamId, ParamSet};
use crate::optim::{AdamConfig, OptimState};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::tokens::TokenDataset;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ARConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    /// Vocabulary size (tokenizer codebook K).
    pub vocab: usize,
    /// Sequence length T = h' * w' in raster-scan order.
    pub seq_len: usize,
    pub num_classes: usize,
    pub dropout: f32,
}

impl ARConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if (self.width / self.heads) % 2 != 0 {
            return Err(Error::Config(format!(
                "head dim {} must be even for rotary embeddings",
                self.width / self.heads
            )));
        }
        if self.depth == 0 || self.vocab < 2 || self.seq_len == 0 || self.num_classes == 0 {
            return Err(Error::Config("degenerate transformer config".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0,1)", self.dropout)));
        }
        Ok(())
    }
}

/// The scaling rule: width = 64*depth, heads = depth.
pub fn ar_scale_config(depth: usize, vocab: usize, seq_len: usize, num_classes: usize) -> ARConfig {
    assert!(depth >= 1, "depth must be >= 1");
    ARConfig {
        depth,
        width: 64 * depth,
        heads: depth,
        vocab,
        seq_len,
        num_classes,
        dropout: 0.1,
    }
}

/// SwiGLU hidden size: floor(2*(4w)/3) rounded up to a multiple of 256.
pub fn swiglu_hidden(width: usize) -> usize {
    let raw = 2 * (4 * width) / 3;
    raw.div_ceil(256) * 256
}

/// Closed-form parameter count of [`ARModel::new`] for a config.
pub fn ar_param_count(cfg: &ARConfig) -> usize {
    let w = cfg.width;
    let m = swiglu_hidden(w);
    let per_block = 4 * w * w + 3 * w * m + 2 * w + (6 * w * w + 6 * w);
    cfg.vocab * w
        + cfg.num_classes * w
        + 2 * (w * w + w)
        + cfg.depth * per_block
        + w
        + (2 * w * w + 2 * w)
        + cfg.vocab * w
}

struct Block {
    attn_norm: ParamId,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ffn_norm: ParamId,
    w1: Linear,
    w3: Linear,
    w2: Linear,
    adaln: Linear,
}

pub struct ARModel {
    pub cfg: ARConfig,
    pub params: ParamSet,
    tok_emb: ParamId,
    class_emb: ParamId,
    cond_fc1: Linear,
    cond_fc2: Linear,
    blocks: Vec<Block>,
    final_norm: ParamId,
    final_adaln: Linear,
    head: Linear,
}

impl ARModel {
    pub fn new(cfg: ARConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let mut init = rng.derive("ar-init", 0);
        let w = cfg.width;
        let m = swiglu_hidden(w);
        let tok_emb = params.add("tok_emb", init.tensor_normal(vec![cfg.vocab, w], 0.0, 0.02));
        let class_emb =
            params.add("class_emb", init.tensor_normal(vec![cfg.num_classes, w], 0.0, 0.02));
        let cond_fc1 = Linear::new(&mut params, "cond.fc1", w, w, true, 0.02, &mut init);
        let cond_fc2 = Linear::new(&mut params, "cond.fc2", w, w, true, 0.02, &mut init);
        let mut blocks = Vec::new();
        for l in 0..cfg.depth {
            let p = format!("block{l}");
            blocks.push(Block {
                attn_norm: params.add(format!("{p}.attn_norm.gain"), Tensor::full(vec![w], 1.0)),
                wq: Linear::new(&mut params, &format!("{p}.wq"), w, w, false, 0.02, &mut init),
                wk: Linear::new(&mut params, &format!("{p}.wk"), w, w, false, 0.02, &mut init),
                wv: Linear::new(&mut params, &format!("{p}.wv"), w, w, false, 0.02, &mut init),
                wo: Linear::new(&mut params, &format!("{p}.wo"), w, w, false, 0.02, &mut init),
                ffn_norm: params.add(format!("{p}.ffn_norm.gain"), Tensor::full(vec![w], 1.0)),
                w1: Linear::new(&mut params, &format!("{p}.ffn.w1"), w, m, false, 0.02, &mut init),
                w3: Linear::new(&mut params, &format!("{p}.ffn.w3"), w, m, false, 0.02, &mut init),
                w2: Linear::new(&mut params, &format!("{p}.ffn.w2"), m, w, false, 0.02, &mut init),
                adaln: Linear::new_zeros(&mut params, &format!("{p}.adaln"), w, 6 * w, true),
            });
        }
        let final_norm = params.add("final_norm.gain", Tensor::full(vec![w], 1.0));
        let final_adaln = Linear::new_zeros(&mut params, "final.adaln", w, 2 * w, true);
        let head = Linear::new_zeros(&mut params, "head", w, cfg.vocab, false);
        Ok(ARModel {
            cfg,
            params,
            tok_emb,
            class_emb,
            cond_fc1,
            cond_fc2,
            blocks,
            final_norm,
            final_adaln,
            head,
        })
    }
}

/// x / sqrt(mean(x^2) + eps) * gain, row-wise over [N, w].
pub fn rmsnorm(tape: &mut Tape<f32>, x: Var, gain: Var) -> Var {
    let (_, w) = tape.value(x).dims2();
    let sq = tape.square(x);
    let sums = tape.sum_cols(sq);
    let means = tape.scale(sums, 1.0 / w as f32);
    let eps = tape.add_scalar(means, 1e-6);
    let rms = tape.sqrt(eps);
    let inv = tape.recip(rms);
    let normed = tape.mul_col(x, inv);
    tape.mul_row(normed, gain)
}

/// x * (1 + scale) + shift with per-feature rows from the conditioning.
pub fn adaln_modulate(tape: &mut Tape<f32>, x: Var, scale: Var, shift: Var) -> Var {
    let one_plus = tape.add_scalar(scale, 1.0);
    let scaled = tape.mul_row(x, one_plus);
    tape.add_bias(scaled, shift)
}

/// Dropout mask as a constant: inverted scaling, one Bernoulli per element.
fn dropout_mask(tape: &mut Tape<f32>, shape: Vec<usize>, rate: f32, rng: &mut Rng) -> Var {
    let numel: usize = shape.iter().product();
    let keep = 1.0 - rate;
    let data: Vec<f32> = (0..numel)
        .map(|_| if rng.uniform_f64() < keep as f64 { 1.0 / keep } else { 0.0 })
        .collect();
    tape.constant(Tensor::new(shape, data))
}

/// Strictly causal mask: position i attends to j <= i. Finite large-negative
/// fill so values stay finite for the softmax max-subtraction.
fn causal_mask(tape: &mut Tape<f32>, s: usize) -> Var {
    let mut data = vec![0.0f32; s * s];
    for i in 0..s {
        for j in (i + 1)..s {
            data[i * s + j] = -1e9;
        }
    }
    tape.constant(Tensor::new(vec![s, s], data))
}

pub struct ARForward {
    /// [T, K] next-token logits; row t predicts token t+1 of the sequence.
    pub logits: Var,
    /// Mean negative log-likelihood over the T targets.
    pub nll: Var,
}

impl ARModel {
    /// Conditioning vector [1, w] for a class: MLP over the class embedding.
    fn condition(&self, tape: &mut Tape<f32>, vars: &[Var], class: usize) -> Var {
        assert!(class < self.cfg.num_classes, "class {class} out of range");
        let emb = tape.gather_rows(vars[self.class_emb.0], &[class]);
        let h = self.cond_fc1.forward(tape, vars, emb);
        let h = tape.silu(h);
        self.cond_fc2.forward(tape, vars, h)
    }

    fn attention(
        &self,
        tape: &mut Tape<f32>,
        vars: &[Var],
        block: &Block,
        x: Var,
        mask: Var,
        positions: &[usize],
    ) -> Var {
        let (s, w) = tape.value(x).dims2();
        let heads = self.cfg.heads;
        let dh = w / heads;
        let q = block.wq.forward(tape, vars, x);
        let k = block.wk.forward(tape, vars, x);
        let v = block.wv.forward(tape, vars, x);
        let mut ctx: Option<Var> = None;
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * dh, (h + 1) * dh);
            let kh = tape.slice_cols(k, h * dh, (h + 1) * dh);
            let vh = tape.slice_cols(v, h * dh, (h + 1) * dh);
            let qr = tape.rope(qh, positions);
            let kr = tape.rope(kh, positions);
            let kt = tape.transpose(kr);
            let scores = tape.matmul(qr, kt);
            let scaled = tape.scale(scores, 1.0 / (dh as f32).sqrt());
            let masked = tape.add(scaled, mask);
            let probs = tape.softmax_rows(masked);
            let out = tape.matmul(probs, vh);
            ctx = Some(match ctx {
                Some(acc) => tape.concat_cols(acc, out),
                None => out,
            });
        }
        let _ = s;
        block.wo.forward(tape, vars, ctx.expect("at least one head"))
    }

    fn swiglu(&self, tape: &mut Tape<f32>, vars: &[Var], block: &Block, x: Var) -> Var {
        let a = block.w1.forward(tape, vars, x);
        let gate = tape.silu(a);
        let b = block.w3.forward(tape, vars, x);
        let prod = tape.mul(gate, b);
        block.w2.forward(tape, vars, prod)
    }

    /// Forward one sequence. The input row at position 0 is the conditioning
    /// vector; rows 1..T are embeddings of tokens[0..T-1]; logits row t
    /// predicts tokens[t].
    pub fn forward_sequence(
        &self,
        tape: &mut Tape<f32>,
        vars: &[Var],
        class: usize,
        tokens: &[usize],
        dropout_rng: Option<&mut Rng>,
    ) -> ARForward {
        let t_len = self.cfg.seq_len;
        assert_eq!(tokens.len(), t_len, "sequence length mismatch");
        assert!(
            tokens.iter().all(|&i| i < self.cfg.vocab),
            "token index out of vocab range"
        );
        let w = self.cfg.width;
        let mut cond = self.condition(tape, vars, class);

        let mut drop = dropout_rng;
        if let Some(rng) = drop.as_deref_mut() {
            if self.cfg.dropout > 0.0 {
                let mask = dropout_mask(tape, vec![1, w], self.cfg.dropout, rng);
                cond = tape.mul(cond, mask);
            }
        }

        let mut x = if t_len > 1 {
            let emb = tape.gather_rows(vars[self.tok_emb.0], &tokens[..t_len - 1]);
            tape.concat_rows(cond, emb)
        } else {
            cond
        };
        if let Some(rng) = drop.as_deref_mut() {
            if self.cfg.dropout > 0.0 {
                let mask = dropout_mask(tape, vec![t_len, w], self.cfg.dropout, rng);
                x = tape.mul(x, mask);
            }
        }

        let positions: Vec<usize> = (0..t_len).collect();
        let mask = causal_mask(tape, t_len);
        let cond_act = tape.silu(cond);
        for block in &self.blocks {
            let mods = block.adaln.forward(tape, vars, cond_act);
            let ga = tape.slice_cols(mods, 0, w);
            let ba = tape.slice_cols(mods, w, 2 * w);
            let aa = tape.slice_cols(mods, 2 * w, 3 * w);
            let gm = tape.slice_cols(mods, 3 * w, 4 * w);
            let bm = tape.slice_cols(mods, 4 * w, 5 * w);
            let am = tape.slice_cols(mods, 5 * w, 6 * w);

            let normed = rmsnorm(tape, x, vars[block.attn_norm.0]);
            let modded = adaln_modulate(tape, normed, ga, ba);
            let attn = self.attention(tape, vars, block, modded, mask, &positions);
            let gated = tape.mul_row(attn, aa);
            x = tape.add(x, gated);

            let normed = rmsnorm(tape, x, vars[block.ffn_norm.0]);
            let modded = adaln_modulate(tape, normed, gm, bm);
            let mut ffn = self.swiglu(tape, vars, block, modded);
            if let Some(rng) = drop.as_deref_mut() {
                if self.cfg.dropout > 0.0 {
                    let mask = dropout_mask(tape, vec![t_len, w], self.cfg.dropout, rng);
                    ffn = tape.mul(ffn, mask);
                }
            }
            let gated = tape.mul_row(ffn, am);
            x = tape.add(x, gated);
        }

        let normed = rmsnorm(tape, x, vars[self.final_norm.0]);
        let mods = self.final_adaln.forward(tape, vars, cond_act);
        let gf = tape.slice_cols(mods, 0, w);
        let bf = tape.slice_cols(mods, w, 2 * w);
        let modded = adaln_modulate(tape, normed, gf, bf);
        let logits = self.head.forward(tape, vars, modded);

        let logp = tape.log_softmax_rows(logits);
        let picked = tape.gather_cols(logp, tokens);
        let mean_logp = tape.mean(picked);
        let nll = tape.scale(mean_logp, -1.0);
        ARForward { logits, nll }
    }

    /// Mean NLL over a batch of sequences on one tape.
    pub fn batch_nll(
        &self,
        tape: &mut Tape<f32>,
        vars: &[Var],
        batch: &[(usize, Vec<usize>)],
        mut dropout_rng: Option<&mut Rng>,
    ) -> Var {
        assert!(!batch.is_empty());
        let mut acc: Option<Var> = None;
        for (class, tokens) in batch {
            let fwd =
                self.forward_sequence(tape, vars, *class, tokens, dropout_rng.as_deref_mut());
            acc = Some(match acc {
                Some(a) => tape.add(a, fwd.nll),
                None => fwd.nll,
            });
        }
        let total = acc.expect("nonempty batch");
        tape.scale(total, 1.0 / batch.len() as f32)
    }

    /// Autoregressive sampling: one token per position, deterministic for a
    /// given seed. `top_k = 1` is greedy argmax.
    pub fn sample(&self, class: usize, temperature: f32, top_k: usize, rng: &mut Rng) -> Vec<usize> {
        assert!(temperature > 0.0, "sampling temperature must be positive");
        assert!(
            (1..=self.cfg.vocab).contains(&top_k),
            "top_k must be in 1..=vocab"
        );
        let mut tokens: Vec<usize> = Vec::with_capacity(self.cfg.seq_len);
        for position in 0..self.cfg.seq_len {
            let mut tape: Tape<f32> = Tape::new();
            let vars = self.params.load_frozen(&mut tape);
            // Forward the prefix padded to full length; only the logits row
            // at `position` matter and causality keeps them pad-free.
            let mut padded = tokens.clone();
            padded.resize(self.cfg.seq_len, 0);
            let fwd = self.forward_sequence(&mut tape, &vars, class, &padded, None);
            let row = tape.value(fwd.logits).row(position).to_vec();
            tokens.push(sample_row(&row, temperature, top_k, rng));
        }
        tokens
    }
}

fn sample_row(logits: &[f32], temperature: f32, top_k: usize, rng: &mut Rng) -> usize {
    let k = logits.len();
    let mut order: Vec<usize> = (0..k).collect();
    // Stable sort keeps ties in lowest-index order.
    order.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).expect("finite logits"));
    let kept = &order[..top_k];
    if top_k == 1 {
        return kept[0];
    }
    let max = kept.iter().map(|&i| logits[i]).fold(f32::NEG_INFINITY, f32::max);
    let mut probs: Vec<(usize, f64)> = kept
        .iter()
        .map(|&i| (i, (((logits[i] - max) / temperature) as f64).exp()))
        .collect();
    // Fixed index order so the cumulative draw is platform-stable.
    probs.sort_by_key(|&(i, _)| i);
    let total: f64 = probs.iter().map(|&(_, p)| p).sum();
    let draw = rng.uniform_f64() * total;
    let mut cum = 0.0;
    for &(i, p) in &probs {
        cum += p;
        if draw < cum {
            return i;
        }
    }
    probs.last().expect("nonempty").0
}

const CKPT_NAME: &str = "ar_checkpoint.ibqa";
const METRICS_NAME: &str = "ar_metrics.csv";
pub const METRICS_HEADER: &str = "step,lr,nll_train,nll_eval";

pub fn checkpoint_path(out_dir: &Path) -> PathBuf {
    out_dir.join(CKPT_NAME)
}

pub fn metrics_path(out_dir: &Path) -> PathBuf {
    out_dir.join(METRICS_NAME)
}

pub struct ARTrainState {
    pub model: ARModel,
    pub optim: OptimState,
    pub step: u64,
    pub epoch: u64,
}

pub fn save_checkpoint(state: &ARTrainState, path: &Path) -> Result<()> {
    let mut archive = crate::archive::TensorArchive::new();
    let cfg = &state.model.cfg;
    archive.push_u64("meta.step", state.step);
    archive.push_u64("meta.epoch", state.epoch);
    archive.push_u64("meta.optim.step", state.optim.step);
    archive.push_u64("meta.model.depth", cfg.depth as u64);
    archive.push_u64("meta.model.width", cfg.width as u64);
    archive.push_u64("meta.model.heads", cfg.heads as u64);
    archive.push_u64("meta.model.vocab", cfg.vocab as u64);
    archive.push_u64("meta.model.seq_len", cfg.seq_len as u64);
    archive.push_u64("meta.model.num_classes", cfg.num_classes as u64);
    archive.push_f64("meta.model.dropout", Tensor::scalar(cfg.dropout as f64));
    state.model.params.write_archive(&mut archive, "param.");
    for (i, m) in state.optim.m.iter().enumerate() {
        archive.push_f32(&format!("optim.m.{i}"), m.clone());
    }
    for (i, v) in state.optim.v.iter().enumerate() {
        archive.push_f32(&format!("optim.v.{i}"), v.clone());
    }
    archive.save(path)
}

pub fn load_checkpoint(path: &Path, adam: AdamConfig) -> Result<ARTrainState> {
    let archive = crate::archive::TensorArchive::load(path)?;
    let dropout = match archive.get("meta.model.dropout")? {
        crate::archive::ArchiveTensor::F64(t) if t.numel() == 1 => t.item() as f32,
        _ => return Err(Error::Format("checkpoint dropout entry malformed".into())),
    };
    let cfg = ARConfig {
        depth: archive.get_u64("meta.model.depth")? as usize,
        width: archive.get_u64("meta.model.width")? as usize,
        heads: archive.get_u64("meta.model.heads")? as usize,
        vocab: archive.get_u64("meta.model.vocab")? as usize,
        seq_len: archive.get_u64("meta.model.seq_len")? as usize,
        num_classes: archive.get_u64("meta.model.num_classes")? as usize,
        dropout,
    };
    let mut model = ARModel::new(cfg, &mut Rng::new(0))?;
    model.params.read_archive(&archive, "param.")?;
    let tensors = model.params.tensors();
    let mut optim = OptimState::new(adam, &tensors);
    optim.step = archive.get_u64("meta.optim.step")?;
    for i in 0..tensors.len() {
        optim.m[i] = archive.get_f32(&format!("optim.m.{i}"))?.clone();
        optim.v[i] = archive.get_f32(&format!("optim.v.{i}"))?.clone();
    }
    Ok(ARTrainState {
        model,
        optim,
        step: archive.get_u64("meta.step")?,
        epoch: archive.get_u64("meta.epoch")?,
    })
}

#[derive(Debug, Clone)]
pub struct ARTrainConfig {
    pub depth: usize,
    /// Explicit width/heads override the scaling rule when set.
    pub width: Option<usize>,
    pub heads: Option<usize>,
    pub dropout: f32,
    pub epochs: u64,
    pub batch: usize,
    pub base_lr: f32,
    pub seed: u64,
    pub holdout: f64,
    pub stop_after: Option<u64>,
}

impl Default for ARTrainConfig {
    fn default() -> Self {
        ARTrainConfig {
            depth: 2,
            width: None,
            heads: None,
            dropout: 0.1,
            epochs: 4,
            batch: 16,
            base_lr: 1e-4,
            seed: 42,
            holdout: 0.1,
            stop_after: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ARTrainSummary {
    pub epochs_run: u64,
    pub final_nll_train: f64,
    pub final_nll_eval: f64,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

/// One AdamW step over a batch of (class, tokens) sequences.
pub fn ar_step(
    state: &mut ARTrainState,
    batch: &[(usize, Vec<usize>)],
    lr: f32,
    dropout_rng: &mut Rng,
) -> Result<f64> {
    let mut tape: Tape<f32> = Tape::new();
    let vars = state.model.params.load(&mut tape);
    let nll = state
        .model
        .batch_nll(&mut tape, &vars, batch, Some(dropout_rng));
    let nll_value = tape.value(nll).item() as f64;
    if !nll_value.is_finite() {
        return Err(Error::Numeric(format!("non-finite NLL at step {}", state.step)));
    }
    let mut grads = tape.backward(nll);
    let grad_list: Vec<Option<Tensor<f32>>> = vars.iter().map(|&v| grads.take(v)).collect();
    state.optim.config.lr = lr;
    let mut tensors = state.model.params.tensors();
    state.optim.step(&mut tensors, &grad_list)?;
    state.model.params.set_all(tensors);
    state.step += 1;
    Ok(nll_value)
}

/// Mean NLL over a sequence set, no dropout.
pub fn eval_nll(model: &ARModel, set: &[(usize, Vec<usize>)]) -> f64 {
    assert!(!set.is_empty());
    let mut total = 0.0f64;
    for (class, tokens) in set {
        let mut tape: Tape<f32> = Tape::new();
        let vars = model.params.load_frozen(&mut tape);
        let fwd = model.forward_sequence(&mut tape, &vars, *class, tokens, None);
        total += tape.value(fwd.nll).item() as f64;
    }
    total / set.len() as f64
}

fn records_of(tokens: &TokenDataset) -> Vec<(usize, Vec<usize>)> {
    tokens
        .records
        .iter()
        .map(|r| (r.class as usize, r.indices.iter().map(|&i| i as usize).collect()))
        .collect()
}

/// Train (or resume) the AR model on a token dataset. AdamW with
/// beta1 = 0.9, beta2 = 0.95, weight decay 5e-2, global-norm clip 1.0;
/// one CSV row per epoch; rolling checkpoint.
pub fn train_ar(
    tokens: &TokenDataset,
    cfg: &ARTrainConfig,
    out_dir: &Path,
    resume: bool,
) -> Result<ARTrainSummary> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ckpt_path = checkpoint_path(out_dir);
    let csv_path = metrics_path(out_dir);
    let adam = AdamConfig::ar(cfg.base_lr);

    let model_cfg = {
        let mut c = ar_scale_config(
            cfg.depth,
            tokens.k as usize,
            tokens.t as usize,
            (tokens.num_classes as usize).max(1),
        );
        if let Some(w) = cfg.width {
            c.width = w;
        }
        if let Some(h) = cfg.heads {
            c.heads = h;
        }
        c.dropout = cfg.dropout;
        c
    };

    let mut state = if resume {
        if !ckpt_path.exists() {
            return Err(Error::Config(format!(
                "resume requested but no checkpoint at {}",
                ckpt_path.display()
            )));
        }
        let state = load_checkpoint(&ckpt_path, adam)?;
        if state.model.cfg.vocab != tokens.k as usize {
            return Err(Error::Config(format!(
                "checkpoint vocab {} != token dataset K {}",
                state.model.cfg.vocab, tokens.k
            )));
        }
        state
    } else {
        let model = ARModel::new(model_cfg, &mut Rng::new(cfg.seed))?;
        let optim = OptimState::new(adam, &model.params.tensors());
        let _ = std::fs::remove_file(&csv_path);
        ARTrainState { model, optim, step: 0, epoch: 0 }
    };
    if state.model.cfg.seq_len != tokens.t as usize {
        return Err(Error::Config(format!(
            "model sequence length {} != token dataset T {}",
            state.model.cfg.seq_len, tokens.t
        )));
    }

    let records = records_of(tokens);
    if records.len() < 2 {
        return Err(Error::Data("token dataset needs at least 2 records".into()));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    Rng::new(cfg.seed).derive("ar-split", 0).shuffle(&mut order);
    let n_eval = ((records.len() as f64 * cfg.holdout) as usize).clamp(1, records.len() - 1);
    let eval_idx = order.split_off(records.len() - n_eval);
    let train_idx = order;
    let eval_set: Vec<(usize, Vec<usize>)> =
        eval_idx.iter().map(|&i| records[i].clone()).collect();
    let effective_batch = cfg.batch.max(1).min(train_idx.len());

    let mut csv = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&csv_path)
        .map_err(|e| Error::io(&csv_path, e))?;
    if state.epoch == 0 {
        writeln!(csv, "{METRICS_HEADER}").map_err(|e| Error::io(&csv_path, e))?;
    }

    let base_rng = Rng::new(cfg.seed);
    let mut summary = ARTrainSummary {
        epochs_run: state.epoch,
        final_nll_train: f64::NAN,
        final_nll_eval: f64::NAN,
        checkpoint: ckpt_path.clone(),
        metrics: csv_path.clone(),
    };
    let last_epoch = cfg.stop_after.map_or(cfg.epochs, |s| s.min(cfg.epochs));
    for epoch in state.epoch..last_epoch {
        let mut shuffled = train_idx.clone();
        base_rng.derive("ar-shuffle", epoch).shuffle(&mut shuffled);
        let mut nll_sum = 0.0f64;
        let mut batches = 0u64;
        for chunk in shuffled.chunks_exact(effective_batch) {
            let batch: Vec<(usize, Vec<usize>)> =
                chunk.iter().map(|&i| records[i].clone()).collect();
            let mut drop_rng = base_rng.derive("ar-dropout", state.step);
            nll_sum += ar_step(&mut state, &batch, cfg.base_lr, &mut drop_rng)?;
            batches += 1;
        }
        state.epoch = epoch + 1;
        let nll_train = nll_sum / batches.max(1) as f64;
        let nll_eval = eval_nll(&state.model, &eval_set);
        writeln!(
            csv,
            "{},{:.6},{:.6},{:.6}",
            state.step, cfg.base_lr, nll_train, nll_eval
        )
        .map_err(|e| Error::io(&csv_path, e))?;
        save_checkpoint(&state, &ckpt_path)?;
        summary.epochs_run = state.epoch;
        summary.final_nll_train = nll_train;
        summary.final_nll_eval = nll_eval;
    }
    csv.flush().map_err(|e| Error::io(&csv_path, e))?;
    Ok(summary)
}
