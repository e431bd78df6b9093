//! Desk-scale laboratory for vector-quantized visual tokenizers.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`], [`rng`], [`autodiff`], [`optim`] — a small dense-tensor
//!   framework with reverse-mode automatic differentiation, a deterministic
//!   counter-based PRNG, and Adam/AdamW optimizers.
//! * [`quantize`] — five quantization schemes (IBQ, naive VQ, VQGAN-STE,
//!   LFQ, Soft VQ) over a shared codebook, differing in how gradients reach
//!   the codebook and the encoder.
//! * [`loss`] — reconstruction, quantization and entropy objectives.
//! * [`tokenizer`] — a convolutional autoencoder around a pluggable
//!   quantizer, with its training loop.
//! * [`ar`] — a toy class-conditional causal transformer over token indices
//!   (RoPE, SwiGLU, RMSNorm, AdaLN), next-token training and sampling.
//! * [`metrics`], [`data`], [`archive`], [`tokens`], [`config`], [`diag`] —
//!   diagnostics, datasets, on-disk formats and experiment configuration.
//!
//! Everything is deterministic under a fixed seed: identical configs produce
//! byte-identical metrics files and checkpoints.

pub mod ar;
pub mod archive;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod diag;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod quantize;
pub mod rng;
pub mod tensor;
pub mod tokenizer;
pub mod tokens;

pub use error::{Error, Result};
pub use tensor::Tensor;
