//! Adam/AdamW with optional global-norm gradient clipping, and the
//! multi-step learning-rate schedule.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Decoupled weight decay (AdamW when nonzero).
    pub weight_decay: f32,
    /// Scale all gradients so their global L2 norm is at most this, before
    /// moments are updated.
    pub clip_global_norm: Option<f32>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_global_norm: None,
        }
    }
}

impl AdamConfig {
    /// Tokenizer training settings: Adam with beta1 = 0.5, beta2 = 0.9.
    pub fn tokenizer(lr: f32) -> Self {
        AdamConfig { lr, beta1: 0.5, beta2: 0.9, ..Default::default() }
    }

    /// AR training settings: AdamW with beta1 = 0.9, beta2 = 0.95,
    /// weight decay 5e-2, gradient clipping at 1.0.
    pub fn ar(lr: f32) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 5e-2,
            clip_global_norm: Some(1.0),
            ..Default::default()
        }
    }
}

/// Per-parameter first/second moments plus the shared step counter.
#[derive(Debug)]
pub struct OptimState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl OptimState {
    pub fn new(config: AdamConfig, params: &[Tensor<f32>]) -> Self {
        OptimState {
            config,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
        }
    }

    /// One Adam step over all parameters. `grads[i]` may be `None` for a
    /// parameter untouched by the loss; its moments still decay.
    pub fn step(
        &mut self,
        params: &mut [Tensor<f32>],
        grads: &[Option<Tensor<f32>>],
    ) -> Result<()> {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        assert_eq!(params.len(), grads.len(), "one gradient slot per parameter");
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                assert_eq!(
                    g.shape(),
                    params[i].shape(),
                    "gradient {} shape {:?} vs parameter {:?}",
                    i,
                    g.shape(),
                    params[i].shape()
                );
                if !g.all_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite gradient in parameter {i}; step {} aborted",
                        self.step + 1
                    )));
                }
            }
        }

        let clip_scale = match self.config.clip_global_norm {
            Some(max_norm) => {
                let mut sq = 0.0f64;
                for g in grads.iter().flatten() {
                    sq += g.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
                }
                let norm = sq.sqrt() as f32;
                if norm > max_norm {
                    max_norm / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };

        self.step += 1;
        let t = self.step as i32;
        let c = &self.config;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);

        for (i, p) in params.iter_mut().enumerate() {
            let zero;
            let g: &Tensor<f32> = match &grads[i] {
                Some(g) => g,
                None => {
                    zero = Tensor::zeros(p.shape().to_vec());
                    &zero
                }
            };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let pd = p.data_mut();
            for j in 0..pd.len() {
                let gj = g.data()[j] * clip_scale;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                pd[j] -= c.lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * pd[j]);
            }
        }
        Ok(())
    }
}

/// Multi-step decay: lr = base * factor^(milestones passed).
pub fn lr_schedule(step: u64, base: f32, factor: f32, milestones: &[u64]) -> f32 {
    debug_assert!(milestones.windows(2).all(|w| w[0] <= w[1]), "milestones sorted");
    let passed = milestones.iter().filter(|&&m| step >= m).count() as i32;
    base * factor.powi(passed)
}
