//! Assembles a runnable pipeline from a [`RunConfig`].

use crate::attack::{Detector, Scene};
use crate::conditioning::{embed_prompt, Prompt, TextEmbedding};
use crate::config::RunConfig;
use crate::diffusion::{build_schedule, Decoder, Denoiser, NoiseSchedule, Sampler, SamplerConfig};
use crate::error::Result;
use crate::optimizer::{initialize_run, optimize, AttackTask, Generator, OptimizerConfig, Outcome};
use crate::registry::Registry;
use crate::seed::derive_seed;

pub struct Pipeline {
    config: RunConfig,
    denoiser: Box<dyn Denoiser>,
    decoder: Box<dyn Decoder>,
    sampler: Box<dyn Sampler>,
    detector: Box<dyn Detector>,
    schedule: NoiseSchedule,
    sampling: SamplerConfig,
    prompt: Prompt,
    embedding: TextEmbedding,
}

impl Pipeline {
    pub fn build(config: &RunConfig, registry: &Registry) -> Result<Self> {
        config.validate()?;
        let m = &config.model;
        let denoiser = registry.denoiser(&m.denoiser, &m.denoiser_net, m.seed)?;
        let decoder = registry.decoder(&m.decoder, &m.decoder_net, denoiser.latent_shape(), m.seed)?;
        let sampler = registry.sampler(&config.sampler)?;
        let detector = registry.detector(&config.detector)?;
        let s = &config.schedule;
        let schedule = build_schedule(s.train_steps, s.beta_start, s.beta_end, config.sampling.num_steps)?;
        let prompt = Prompt::new(config.prompt.clone())?;
        let (tokens, dim) = denoiser.text_shape();
        let embedding = embed_prompt(&prompt, tokens, dim, m.text_seed)?;
        let sampling = SamplerConfig {
            seed: derive_seed(config.seed, &[0x5a]),
            ..config.sampling.clone()
        };
        Ok(Self {
            config: config.clone(),
            denoiser,
            decoder,
            sampler,
            detector,
            schedule,
            sampling,
            prompt,
            embedding,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn detector(&self) -> &dyn Detector {
        self.detector.as_ref()
    }

    pub fn generator(&self) -> Generator<'_> {
        Generator {
            denoiser: self.denoiser.as_ref(),
            sampler: self.sampler.as_ref(),
            decoder: self.decoder.as_ref(),
            schedule: &self.schedule,
            sampler_config: &self.sampling,
            prompt: &self.prompt,
            embedding: &self.embedding,
        }
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            seed: derive_seed(self.config.seed, &[0xe0]),
            ..self.config.optimizer.clone()
        }
    }

    /// Initializes from the run seed and optimizes against `scenes`.
    pub fn generate(&self, scenes: &[Scene]) -> Result<Outcome> {
        let generator = self.generator();
        let state = initialize_run(self.config.seed, &generator)?;
        let task = AttackTask {
            scenes,
            detector: self.detector(),
            eot: &self.config.eot,
            scale: self.config.scale,
        };
        optimize(state, &generator, &task, &self.optimizer_config())
    }
}
