//! Latent diffusion sampling: noise schedule, DDIM/DDPM transitions with
//! classifier-free guidance, the reference denoiser and decoder, and capture
//! of the conditional cross-attention maps.

mod decoder;
mod denoiser;
mod sampler;
mod schedule;

pub use decoder::{decode, Decoder, DecoderConfig, ReferenceDecoder};
pub use denoiser::{Denoiser, DenoiserConfig, DenoiserOutput, ReferenceDenoiser};
pub use sampler::{
    cfg_combine, cfg_combine_graph, ddim_step, ddpm_step, sample, sample_graph, DdimSampler,
    DdpmSampler, DiffusionTrace, GraphTrace, Sampler, SamplerConfig, SamplingContext, SigmaMode,
    StepCoefficients,
};
pub use schedule::{build_schedule, NoiseSchedule};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A latent `z_t` together with its timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    values: Tensor,
    timestep: usize,
}

impl LatentState {
    pub fn new(values: Tensor, timestep: usize) -> Result<Self> {
        if !values.all_finite() {
            return Err(Error::Numerical(format!(
                "latent at timestep {timestep} has non-finite entries"
            )));
        }
        Ok(Self { values, timestep })
    }

    /// `z_T ~ N(0, I)` drawn from `seed`.
    pub fn gaussian(shape: &[usize], timestep: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        let data = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        Self {
            values: Tensor::new(shape.to_vec(), data).unwrap(),
            timestep,
        }
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn timestep(&self) -> usize {
        self.timestep
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }
}

/// Cross-attention maps indexed by (sampler step, layer).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    steps: usize,
    layers: usize,
    maps: Vec<Tensor>,
}

impl AttentionRecord {
    /// Validates completeness of the grid and that every row is a probability vector.
    pub fn new(steps: usize, layers: usize, maps: Vec<Tensor>) -> Result<Self> {
        if maps.len() != steps * layers {
            return Err(Error::Numerical(format!(
                "attention record incomplete: {} maps for {steps}x{layers}",
                maps.len()
            )));
        }
        for (k, m) in maps.iter().enumerate() {
            let [_, cols] = m.shape() else {
                return Err(Error::shape(format!("attention map {k} is not a matrix")));
            };
            for row in m.data().chunks(*cols) {
                let s: f64 = row.iter().sum();
                if row.iter().any(|&p| p < 0.0) || (s - 1.0).abs() > 1e-5 {
                    return Err(Error::Numerical(format!(
                        "attention map {k} has a row that is not normalized (sum {s})"
                    )));
                }
            }
        }
        Ok(Self { steps, layers, maps })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn get(&self, step: usize, layer: usize) -> &Tensor {
        &self.maps[step * self.layers + layer]
    }

    pub fn maps(&self) -> &[Tensor] {
        &self.maps
    }
}
