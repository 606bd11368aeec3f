//! Adam over the seed latent `z_T`, with anchors captured from the first run.

use serde::{Deserialize, Serialize};

use crate::alignment::{
    latent_alignment_loss_graph, prompt_alignment_loss_graph, total_loss_graph, LossWeights, RunAnchors,
};
use crate::attack::{attack_batch, AdversarialPatch, AttackSetup, Detector, EotConfig, PatchMetadata, Scene};
use crate::conditioning::{Prompt, TextEmbedding};
use crate::diffusion::{
    sample, sample_graph, Decoder, Denoiser, LatentState, NoiseSchedule, Sampler, SamplerConfig, SamplingContext,
};
use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::tape::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Root of the per-epoch transform streams; filled from the run seed.
    #[serde(skip)]
    pub seed: u64,
    pub weights: LossWeights,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-3,
            epochs: 100,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            weights: LossWeights::default(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be >= 1"));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} must lie in [0, 1)")));
            }
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return Err(Error::config("adam_eps must be positive"));
        }
        self.weights.validate()
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments {
    pub m: Tensor,
    pub v: Tensor,
    pub step: u32,
}

impl AdamMoments {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            m: Tensor::zeros(shape.to_vec()),
            v: Tensor::zeros(shape.to_vec()),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(var: &mut Tensor, grad: &Tensor, moments: &mut AdamMoments, opt: &OptimizerConfig) -> Result<()> {
    var.ensure_same_shape(grad, "adam gradient")?;
    var.ensure_same_shape(&moments.m, "adam moments")?;
    if !grad.all_finite() {
        return Err(Error::Numerical("non-finite gradient".into()));
    }
    moments.step += 1;
    let (b1, b2) = (opt.adam_beta1, opt.adam_beta2);
    let c1 = 1.0 - b1.powi(moments.step as i32);
    let c2 = 1.0 - b2.powi(moments.step as i32);
    let m = moments.m.data_mut();
    let v = moments.v.data_mut();
    for (i, (x, &g)) in var.data_mut().iter_mut().zip(grad.data()).enumerate() {
        m[i] = b1 * m[i] + (1.0 - b1) * g;
        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        *x -= opt.learning_rate * m_hat / (v_hat.sqrt() + opt.adam_eps);
    }
    Ok(())
}

/// The frozen generative side: denoiser, sampler, decoder and prompt.
#[derive(Clone, Copy)]
pub struct Generator<'a> {
    pub denoiser: &'a dyn Denoiser,
    pub sampler: &'a dyn Sampler,
    pub decoder: &'a dyn Decoder,
    pub schedule: &'a NoiseSchedule,
    pub sampler_config: &'a SamplerConfig,
    pub prompt: &'a Prompt,
    pub embedding: &'a TextEmbedding,
}

impl Generator<'_> {
    fn context(&self) -> SamplingContext<'_> {
        SamplingContext {
            denoiser: self.denoiser,
            sampler: self.sampler,
            schedule: self.schedule,
            config: self.sampler_config,
        }
    }

    fn start_timestep(&self) -> usize {
        self.schedule.timesteps()[0]
    }

    /// Samples and decodes a patch from `z_T` without recording gradients.
    pub fn render(&self, z_t: &LatentState) -> Result<Tensor> {
        let trace = sample(z_t, self.embedding, self.context())?;
        crate::diffusion::decode(self.decoder, &trace.z0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub l_attack: f64,
    pub l_prompt: f64,
    pub l_latent: f64,
    pub total: f64,
}

impl HistoryRow {
    fn all_finite(&self) -> bool {
        [self.l_attack, self.l_prompt, self.l_latent, self.total].iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone)]
pub struct RunState {
    pub z_t: LatentState,
    anchors: RunAnchors,
    pub moments: AdamMoments,
    pub epoch: usize,
    pub history: Vec<HistoryRow>,
    pub seed: u64,
}

impl RunState {
    pub fn anchors(&self) -> &RunAnchors {
        &self.anchors
    }
}

/// Draws `z_T ~ N(0, I)` from `seed` and captures the anchors from one
/// sampling run.
pub fn initialize_run(seed: u64, generator: &Generator<'_>) -> Result<RunState> {
    let shape = generator.denoiser.latent_shape();
    let z_t = LatentState::gaussian(&shape, generator.start_timestep(), seed);
    let trace = sample(&z_t, generator.embedding, generator.context())?;
    let anchors = RunAnchors::new(trace.attention, trace.z0)?;
    Ok(RunState {
        moments: AdamMoments::zeros(&shape),
        z_t,
        anchors,
        epoch: 0,
        history: Vec::new(),
        seed,
    })
}

/// Handles to every term of the objective on one graph.
#[derive(Debug, Clone, Copy)]
pub struct Objective {
    pub z_t: Var,
    pub patch: Var,
    pub l_attack: Var,
    pub l_prompt: Var,
    pub l_latent: Var,
    pub total: Var,
}

impl Objective {
    pub fn row(&self, g: &Graph, epoch: usize) -> HistoryRow {
        HistoryRow {
            epoch,
            l_attack: g.value(self.l_attack).item(),
            l_prompt: g.value(self.l_prompt).item(),
            l_latent: g.value(self.l_latent).item(),
            total: g.value(self.total).item(),
        }
    }
}

/// Builds sample → decode → EOT placement → detector → weighted loss for a
/// differentiable `z_T`.
pub fn build_objective(
    g: &mut Graph,
    z_t: &Tensor,
    anchors: &RunAnchors,
    generator: &Generator<'_>,
    scenes: &[Scene],
    setup: &AttackSetup<'_>,
    weights: &LossWeights,
) -> Result<Objective> {
    let z = g.param(z_t.clone());
    let trace = sample_graph(g, z, generator.embedding, generator.context())?;
    let patch = generator.decoder.decode_graph(g, trace.z0)?;
    let batch = attack_batch(g, patch, scenes, setup)?;
    let l_prompt = prompt_alignment_loss_graph(g, &trace.attention, anchors.attention())?;
    let l_latent = latent_alignment_loss_graph(g, trace.z0, anchors.z0())?;
    let total = total_loss_graph(g, batch.loss, l_prompt, l_latent, weights);
    Ok(Objective {
        z_t: z,
        patch,
        l_attack: batch.loss,
        l_prompt,
        l_latent,
        total,
    })
}

/// Total loss and its gradient with respect to `z_T`.
pub fn objective_and_gradient(
    z_t: &Tensor,
    anchors: &RunAnchors,
    generator: &Generator<'_>,
    scenes: &[Scene],
    setup: &AttackSetup<'_>,
    weights: &LossWeights,
) -> Result<(f64, Tensor)> {
    let mut g = Graph::new();
    let obj = build_objective(&mut g, z_t, anchors, generator, scenes, setup, weights)?;
    let grad = g.backward(obj.total).wrt(obj.z_t);
    Ok((g.value(obj.total).item(), grad))
}

/// Where and how the patch is attacked.
pub struct AttackTask<'a> {
    pub scenes: &'a [Scene],
    pub detector: &'a dyn Detector,
    pub eot: &'a EotConfig,
    pub scale: f64,
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub patch: AdversarialPatch,
    pub best: HistoryRow,
    pub state: RunState,
}

/// Runs `opt.epochs` Adam steps on `z_T`. Transform draws are re-seeded
/// every epoch from `opt.seed`; the returned patch comes from the epoch with
/// the lowest total loss.
pub fn optimize(
    mut state: RunState,
    generator: &Generator<'_>,
    task: &AttackTask<'_>,
    opt: &OptimizerConfig,
) -> Result<Outcome> {
    opt.validate()?;
    task.eot.validate()?;
    if task.scenes.is_empty() {
        return Err(Error::invalid("dataset is empty"));
    }
    if !task.detector.differentiable() {
        return Err(Error::config(format!(
            "detector `{}` provides no gradients and cannot drive optimization",
            task.detector.name()
        )));
    }
    let mut best: Option<(HistoryRow, Tensor)> = None;
    for _ in 0..opt.epochs {
        let epoch = state.epoch;
        let setup = AttackSetup {
            detector: task.detector,
            eot: task.eot,
            scale: task.scale,
            seed: derive_seed(opt.seed, &[epoch as u64]),
        };
        let mut g = Graph::new();
        let obj = build_objective(&mut g, state.z_t.values(), &state.anchors, generator, task.scenes, &setup, &opt.weights)?;
        let row = obj.row(&g, epoch);
        if !row.all_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss at epoch {epoch}: attack {}, prompt {}, latent {}, total {}",
                row.l_attack, row.l_prompt, row.l_latent, row.total
            )));
        }
        log::info!(
            "epoch {epoch}: attack {:.6} prompt {:.6} latent {:.6} total {:.6}",
            row.l_attack,
            row.l_prompt,
            row.l_latent,
            row.total
        );
        if best.as_ref().is_none_or(|(b, _)| row.total < b.total) {
            best = Some((row, g.value(obj.patch).clone()));
        }
        let grad = g.backward(obj.total).wrt(obj.z_t);
        let mut z = state.z_t.values().clone();
        adam_step(&mut z, &grad, &mut state.moments, opt)
            .map_err(|e| Error::Numerical(format!("epoch {epoch}: {e}")))?;
        state.z_t = LatentState::new(z, state.z_t.timestep())?;
        state.history.push(row);
        state.epoch += 1;
    }
    let (best, pixels) = best.expect("at least one epoch");
    let patch = AdversarialPatch::new(
        pixels,
        PatchMetadata {
            prompt: generator.prompt.text().to_owned(),
            seed: state.seed,
            weights: opt.weights,
            epoch: best.epoch,
        },
    )?;
    Ok(Outcome { patch, best, state })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> OptimizerConfig {
        OptimizerConfig::default()
    }

    #[test]
    fn zero_gradient_keeps_variable_and_decays_moments() {
        let mut x = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = x.clone();
        let mut m = AdamMoments::zeros(&[3]);
        m.m = Tensor::filled(vec![3], 0.0);
        adam_step(&mut x, &Tensor::zeros(vec![3]), &mut m, &cfg()).unwrap();
        assert_eq!(x, before);
        let mut m = AdamMoments {
            m: Tensor::filled(vec![3], 1.0),
            v: Tensor::filled(vec![3], 1.0),
            step: 5,
        };
        adam_step(&mut x, &Tensor::zeros(vec![3]), &mut m, &cfg()).unwrap();
        assert!((m.m.data()[0] - 0.9).abs() < 1e-15);
        assert!((m.v.data()[0] - 0.999).abs() < 1e-15);
    }

    #[test]
    fn first_step_is_sign_like() {
        let mut x = Tensor::zeros(vec![2]);
        let mut m = AdamMoments::zeros(&[2]);
        let g = Tensor::new(vec![2], vec![3.0, -0.2]).unwrap();
        adam_step(&mut x, &g, &mut m, &cfg()).unwrap();
        let lr = cfg().learning_rate;
        assert!((x.data()[0] + lr * 3.0 / (3.0 + 1e-8)).abs() < 1e-12);
        assert!((x.data()[1] - lr * 0.2 / (0.2 + 1e-8)).abs() < 1e-12);
    }

    #[test]
    fn constant_gradient_step_tends_to_learning_rate() {
        let mut x = Tensor::zeros(vec![1]);
        let mut m = AdamMoments::zeros(&[1]);
        let g = Tensor::filled(vec![1], 0.7);
        let mut prev = 0.0;
        for _ in 0..500 {
            prev = x.data()[0];
            adam_step(&mut x, &g, &mut m, &cfg()).unwrap();
        }
        let step = prev - x.data()[0];
        assert!((step - cfg().learning_rate).abs() < 1e-9);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut x = Tensor::zeros(vec![1]);
        let mut m = AdamMoments::zeros(&[1]);
        let g = Tensor::filled(vec![1], f64::NAN);
        assert!(matches!(adam_step(&mut x, &g, &mut m, &cfg()), Err(Error::Numerical(_))));
    }

    #[test]
    fn config_validation() {
        assert!(OptimizerConfig { epochs: 0, ..cfg() }.validate().is_err());
        assert!(OptimizerConfig { learning_rate: 0.0, ..cfg() }.validate().is_err());
        assert!(cfg().validate().is_ok());
    }
}
