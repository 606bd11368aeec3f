use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::schedule::NoiseSchedule;
use crate::conditioning::{AttentionWeights, TextEmbedding};
use crate::error::{Error, Result};
use crate::sparse::{im2col_3x3, SparseMap};
use crate::tape::{Graph, Var};
use crate::tensor::Tensor;

/// Noise estimate plus the cross-attention maps produced on the way.
#[derive(Debug, Clone)]
pub struct DenoiserOutput {
    pub eps: Var,
    pub attention: Vec<Var>,
}

/// `ε_θ(z_t, t, C)`. Implementations must be deterministic and build their
/// forward pass on the tape so it is differentiable in `z_t`.
pub trait Denoiser: Send + Sync {
    fn latent_shape(&self) -> [usize; 3];

    fn attention_layers(&self) -> usize;

    /// `(tokens, dim)` of the text embeddings the denoiser accepts.
    fn text_shape(&self) -> (usize, usize);

    fn predict(
        &self,
        g: &mut Graph,
        z: Var,
        t: usize,
        schedule: &NoiseSchedule,
        context: &TextEmbedding,
    ) -> Result<DenoiserOutput>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub hidden: usize,
    pub key_dim: usize,
    pub text_tokens: usize,
    pub text_dim: usize,
    pub layers: usize,
    /// Weight of the network residual on top of the Gaussian-optimal estimate.
    pub residual_scale: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            channels: 4,
            height: 8,
            width: 8,
            hidden: 32,
            key_dim: 16,
            text_tokens: 8,
            text_dim: 16,
            layers: 2,
            residual_scale: 0.1,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.channels,
            self.height,
            self.width,
            self.hidden,
            self.key_dim,
            self.text_tokens,
            self.text_dim,
        ];
        if dims.contains(&0) {
            return Err(Error::config("denoiser dimensions must be >= 1"));
        }
        if self.layers < 2 {
            return Err(Error::config("denoiser needs at least 2 cross-attention layers"));
        }
        if !self.residual_scale.is_finite() {
            return Err(Error::config("residual_scale must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct CrossAttentionBlock {
    weights: AttentionWeights,
    w_out: Tensor,
}

/// Desk-scale conditional denoiser.
///
/// `ε = √(1-ᾱ_t)·z + r·net(z, t, C)`: the first term is the exact noise
/// estimate for unit-variance Gaussian data, which keeps the DDIM chain well
/// conditioned; `net` is a 3×3 conv stem, `layers` residual cross-attention
/// blocks over the `h·w` spatial queries, and a 3×3 conv head.
#[derive(Debug, Clone)]
pub struct ReferenceDenoiser {
    cfg: DenoiserConfig,
    w_in: Tensor,
    b_in: Tensor,
    blocks: Vec<CrossAttentionBlock>,
    w_out: Tensor,
    cols_latent: Arc<SparseMap>,
    cols_hidden: Arc<SparseMap>,
}

fn gaussian_matrix(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let n: f64 = StandardNormal.sample(rng);
            scale * n
        })
        .collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

impl ReferenceDenoiser {
    pub fn new(cfg: DenoiserConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6465_6e6f_6973_6572);
        let c = cfg.channels;
        let f = cfg.hidden;
        let w_in = gaussian_matrix(9 * c, f, 1.0 / ((9 * c) as f64).sqrt(), &mut rng);
        let b_in = gaussian_matrix(1, f, 0.1, &mut rng).reshaped(vec![f])?;
        let blocks = (0..cfg.layers)
            .map(|_| CrossAttentionBlock {
                weights: AttentionWeights::random(f, cfg.text_dim, cfg.key_dim, &mut rng),
                w_out: gaussian_matrix(cfg.key_dim, f, 1.0 / (cfg.key_dim as f64).sqrt(), &mut rng),
            })
            .collect();
        let w_out = gaussian_matrix(9 * f, c, 1.0 / ((9 * f) as f64).sqrt(), &mut rng);
        Ok(Self {
            w_in,
            b_in,
            blocks,
            w_out,
            cols_latent: Arc::new(im2col_3x3(cfg.height, cfg.width, c)),
            cols_hidden: Arc::new(im2col_3x3(cfg.height, cfg.width, f)),
            cfg,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    fn time_bias(&self, t: usize) -> Tensor {
        let f = self.cfg.hidden;
        let half = (f / 2).max(1);
        let data = (0..f)
            .map(|k| {
                let freq = 1.0 / 10_000f64.powf((k % half) as f64 / half as f64);
                let phase = t as f64 * freq;
                let emb = if k < half { phase.sin() } else { phase.cos() };
                self.b_in.data()[k] + 0.5 * emb
            })
            .collect();
        Tensor::new(vec![f], data).unwrap()
    }
}

impl Denoiser for ReferenceDenoiser {
    fn latent_shape(&self) -> [usize; 3] {
        [self.cfg.channels, self.cfg.height, self.cfg.width]
    }

    fn attention_layers(&self) -> usize {
        self.cfg.layers
    }

    fn text_shape(&self) -> (usize, usize) {
        (self.cfg.text_tokens, self.cfg.text_dim)
    }

    fn predict(
        &self,
        g: &mut Graph,
        z: Var,
        t: usize,
        schedule: &NoiseSchedule,
        context: &TextEmbedding,
    ) -> Result<DenoiserOutput> {
        if g.shape(z) != self.latent_shape() {
            return Err(Error::shape(format!(
                "denoiser expects latent {:?}, got {:?}",
                self.latent_shape(),
                g.shape(z)
            )));
        }
        if context.dim() != self.cfg.text_dim {
            return Err(Error::shape(format!(
                "denoiser expects text dim {}, got {}",
                self.cfg.text_dim,
                context.dim()
            )));
        }
        if t == 0 || t > schedule.train_steps() {
            return Err(Error::invalid(format!("timestep {t} outside 1..={}", schedule.train_steps())));
        }
        let (c, f) = (self.cfg.channels, self.cfg.hidden);
        let hw = self.cfg.height * self.cfg.width;

        let flat = g.reshape(z, vec![c, hw]);
        let tokens = g.transpose(flat);
        let cols = g.linear(tokens, &self.cols_latent, vec![hw, 9 * c]);
        let w_in = g.constant(self.w_in.clone());
        let h = g.matmul(cols, w_in);
        let bias = g.constant(self.time_bias(t));
        let h = g.add_row(h, bias);
        let mut h = g.tanh(h);

        let ctx = g.constant(context.values().clone());
        let mut attention = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (out, map) = block.weights.attend(g, h, ctx);
            let w_o = g.constant(block.w_out.clone());
            let proj = g.matmul(out, w_o);
            let sum = g.add(h, proj);
            h = g.tanh(sum);
            attention.push(map);
        }

        let cols = g.linear(h, &self.cols_hidden, vec![hw, 9 * f]);
        let w_out = g.constant(self.w_out.clone());
        let r = g.matmul(cols, w_out);
        let r = g.tanh(r);
        let r = g.transpose(r);
        let r = g.reshape(r, self.latent_shape().to_vec());

        let base = g.scale(z, (1.0 - schedule.alpha_bar(t)).sqrt());
        let resid = g.scale(r, self.cfg.residual_scale);
        let eps = g.add(base, resid);
        Ok(DenoiserOutput { eps, attention })
    }
}
