//! Experiment configuration: one TOML file drives a run end to end.
//!
//! Unknown keys are rejected; the fully resolved config (defaults filled in)
//! is echoed to the output directory as `config.toml` so a run can be
//! reproduced from its artifacts alone. Relative output dirs resolve against
//! `IBQ_OUT_ROOT` when that variable is set.

use crate::ar::ARTrainConfig;
use crate::data::ImageDataset;
use crate::error::{Error, Result};
use crate::loss::{LossWeights, ReconKind};
use crate::quantize::{CodebookInit, QuantizerKind};
use crate::tokenizer::{TokenizerConfig, TokenizerTrainConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every stream derives from it.
    #[serde(default = "defaults::seed")]
    pub seed: u64,
    /// Runs are bit-reproducible unconditionally; the flag is recorded for
    /// provenance and must not be disabled by configs that claim otherwise.
    #[serde(default = "default_true")]
    pub deterministic: bool,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub tokenizer: TokenizerSection,
    #[serde(default)]
    pub optim: OptimSection,
    #[serde(default)]
    pub ar: ArSection,
    #[serde(default)]
    pub output: OutputSection,
}

mod defaults {
    pub fn seed() -> u64 {
        42
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Folder,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Folder of P6 PPMs (folder source only).
    #[serde(default)]
    pub path: String,
    /// Square image side; must be divisible by the downsample ratio.
    pub size: usize,
    /// Synthetic dataset size.
    pub n: usize,
    /// Synthetic class count.
    pub classes: usize,
    /// Data-generation seed, separate from the run seed.
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            path: String::new(),
            size: 32,
            n: 192,
            classes: 8,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerSection {
    pub k: usize,
    /// Code dimension D.
    pub d: usize,
    /// Downsample ratio p (power of two).
    pub p: usize,
    pub channels: usize,
    pub num_resblocks: usize,
    pub quantizer: QuantizerKind,
    pub beta: f32,
    pub logit_scale: f32,
    pub recon: ReconKind,
    pub codebook_init: CodebookInit,
    pub loss: LossSection,
}

impl Default for TokenizerSection {
    fn default() -> Self {
        let t = TokenizerConfig::default();
        TokenizerSection {
            k: t.k,
            d: t.code_dim,
            p: t.downsample,
            channels: t.base_channels,
            num_resblocks: t.num_resblocks,
            quantizer: t.quantizer,
            beta: t.beta,
            logit_scale: t.logit_scale,
            recon: t.recon,
            codebook_init: t.codebook_init,
            loss: LossSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub recon: f32,
    pub quant: f32,
    pub entropy: f32,
}

impl Default for LossSection {
    fn default() -> Self {
        let w = LossWeights::default();
        LossSection { recon: w.recon, quant: w.quant, entropy: w.entropy }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSection {
    pub lr: f32,
    pub lr_decay: f32,
    /// Step milestones for the multi-step decay; empty means one milestone
    /// at 80% of total steps.
    pub milestones: Vec<u64>,
    pub epochs: u64,
    pub batch: usize,
    pub holdout: f64,
}

impl Default for OptimSection {
    fn default() -> Self {
        OptimSection {
            lr: 1e-4,
            lr_decay: 0.01,
            milestones: Vec::new(),
            epochs: 8,
            batch: 32,
            holdout: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArSection {
    pub depth: usize,
    /// Explicit width/heads override the w = 64d, h = d rule when nonzero.
    pub width: usize,
    pub heads: usize,
    /// Sequence length; must equal (size/p)^2.
    pub t: usize,
    pub dropout: f32,
    pub epochs: u64,
    pub batch: usize,
    pub lr: f32,
    pub holdout: f64,
}

impl Default for ArSection {
    fn default() -> Self {
        ArSection {
            depth: 2,
            width: 0,
            heads: 0,
            t: 64,
            dropout: 0.1,
            epochs: 4,
            batch: 16,
            lr: 1e-4,
            holdout: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: "runs/out".into() }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.tokenizer_config().validate()?;
        if self.data.size % self.tokenizer.p != 0 {
            return Err(Error::Config(format!(
                "data.size {} not divisible by tokenizer.p {}",
                self.data.size, self.tokenizer.p
            )));
        }
        if matches!(self.data.source, DataSource::Folder) && self.data.path.is_empty() {
            return Err(Error::Config("data.source = folder requires data.path".into()));
        }
        if self.data.n < 2 {
            return Err(Error::Config("data.n must be >= 2".into()));
        }
        if self.data.classes == 0 || self.data.classes > u16::MAX as usize {
            return Err(Error::Config("data.classes must be in 1..=65535".into()));
        }
        let grid = self.data.size / self.tokenizer.p;
        let expected_t = grid * grid;
        if self.ar.t != expected_t {
            return Err(Error::Config(format!(
                "ar.t = {} but (size/p)^2 = {expected_t}",
                self.ar.t
            )));
        }
        if self.optim.epochs == 0 || self.optim.batch == 0 {
            return Err(Error::Config("optim.epochs and optim.batch must be positive".into()));
        }
        if !self.deterministic {
            return Err(Error::Config(
                "deterministic = false is not supported: every run is bit-reproducible".into(),
            ));
        }
        Ok(())
    }

    pub fn tokenizer_config(&self) -> TokenizerConfig {
        TokenizerConfig {
            k: self.tokenizer.k,
            code_dim: self.tokenizer.d,
            downsample: self.tokenizer.p,
            base_channels: self.tokenizer.channels,
            num_resblocks: self.tokenizer.num_resblocks,
            quantizer: self.tokenizer.quantizer,
            beta: self.tokenizer.beta,
            logit_scale: self.tokenizer.logit_scale,
            weights: LossWeights {
                recon: self.tokenizer.loss.recon,
                quant: self.tokenizer.loss.quant,
                entropy: self.tokenizer.loss.entropy,
            },
            recon: self.tokenizer.recon,
            codebook_init: self.tokenizer.codebook_init,
        }
    }

    pub fn tokenizer_train_config(&self) -> TokenizerTrainConfig {
        TokenizerTrainConfig {
            model: self.tokenizer_config(),
            epochs: self.optim.epochs,
            batch: self.optim.batch,
            base_lr: self.optim.lr,
            lr_decay: self.optim.lr_decay,
            milestones: if self.optim.milestones.is_empty() {
                None
            } else {
                Some(self.optim.milestones.clone())
            },
            seed: self.seed,
            holdout: self.optim.holdout,
            stop_after: None,
        }
    }

    pub fn ar_train_config(&self) -> ARTrainConfig {
        ARTrainConfig {
            depth: self.ar.depth,
            width: (self.ar.width > 0).then_some(self.ar.width),
            heads: (self.ar.heads > 0).then_some(self.ar.heads),
            dropout: self.ar.dropout,
            epochs: self.ar.epochs,
            batch: self.ar.batch,
            base_lr: self.ar.lr,
            seed: self.seed,
            holdout: self.ar.holdout,
            stop_after: None,
        }
    }

    /// Load or generate the dataset this config names.
    pub fn load_data(&self) -> Result<ImageDataset> {
        match self.data.source {
            DataSource::Synthetic => Ok(crate::data::synth_generate(
                self.data.n,
                self.data.size,
                self.data.classes,
                self.data.seed,
            )),
            DataSource::Folder => {
                let path = PathBuf::from(&self.data.path);
                if !path.exists() {
                    return Err(Error::Data(format!(
                        "data path {} does not exist",
                        path.display()
                    )));
                }
                crate::data::load_ppm_folder(&path, self.data.size)
            }
        }
    }

    /// Output directory, honoring `IBQ_OUT_ROOT` for relative paths.
    pub fn out_dir(&self) -> PathBuf {
        let dir = PathBuf::from(&self.output.dir);
        if dir.is_relative() {
            if let Ok(root) = std::env::var("IBQ_OUT_ROOT") {
                return PathBuf::from(root).join(dir);
            }
        }
        dir
    }

    /// Echo the resolved config (defaults included) into the output dir.
    pub fn echo_to(&self, out_dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let text =
            toml::to_string_pretty(self).map_err(|e| Error::Config(format!("config echo: {e}")))?;
        let path = out_dir.join("config.toml");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.tokenizer.k, 256);
        assert_eq!(cfg.ar.t, 64);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::parse("unknown_key = 1").unwrap_err();
        assert!(err.to_string().contains("config"));
        let err = RunConfig::parse("[tokenizer]\nbogus = 2").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn semantic_validation() {
        let err = RunConfig::parse("[data]\nsource = \"synthetic\"\nsize = 30\nn = 10\nclasses = 2\nseed = 1").unwrap_err();
        assert!(err.to_string().contains("divisible"));

        let err = RunConfig::parse("[ar]\nt = 63").unwrap_err();
        assert!(err.to_string().contains("(size/p)^2"));

        let err = RunConfig::parse("deterministic = false").unwrap_err();
        assert!(err.to_string().contains("bit-reproducible"));

        let err = RunConfig::parse("[tokenizer]\nquantizer = \"lfq\"\nk = 100\nd = 8").unwrap_err();
        assert!(err.to_string().contains("2^code_dim"));
    }

    #[test]
    fn echo_round_trips() {
        let cfg = RunConfig::parse("seed = 9\n[tokenizer]\nk = 64\nd = 8").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = cfg.echo_to(dir.path()).unwrap();
        let reloaded = RunConfig::load(&path).unwrap();
        assert_eq!(reloaded.seed, 9);
        assert_eq!(reloaded.tokenizer.k, 64);
        assert_eq!(reloaded.tokenizer.d, 8);
        // Echo of the echo is byte-identical (fully resolved both times).
        let dir2 = tempfile::tempdir().unwrap();
        let path2 = reloaded.echo_to(dir2.path()).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }
}
