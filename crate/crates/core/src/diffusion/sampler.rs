//! DDIM / DDPM transitions, classifier-free guidance and the sampling loop.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::denoiser::Denoiser;
use super::schedule::NoiseSchedule;
use super::{AttentionRecord, LatentState};
use crate::conditioning::TextEmbedding;
use crate::error::{Error, Result};
use crate::tape::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum SigmaMode {
    /// `σ_t = 0`.
    #[default]
    Deterministic,
    /// `σ_t = η·sqrt((1-ᾱ_prev)/(1-ᾱ_t))·sqrt(1-ᾱ_t/ᾱ_prev)`.
    Stochastic { eta: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub num_steps: usize,
    pub guidance_scale: f64,
    pub sigma_mode: SigmaMode,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            num_steps: 7,
            guidance_scale: 7.5,
            sigma_mode: SigmaMode::Deterministic,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_steps == 0 {
            return Err(Error::config("sampler num_steps must be >= 1"));
        }
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return Err(Error::config("guidance_scale must be finite and >= 0"));
        }
        if let SigmaMode::Stochastic { eta } = self.sigma_mode {
            if !(0.0..=1.0).contains(&eta) {
                return Err(Error::config("stochastic eta must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

/// One transition `z_prev = state·z_t + eps·ε + noise·ξ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCoefficients {
    pub state: f64,
    pub eps: f64,
    pub noise: f64,
}

impl StepCoefficients {
    /// Deterministic-family DDIM transition from `ᾱ_t` to `ᾱ_prev` with noise level `σ_t`.
    pub fn ddim(abar_t: f64, abar_prev: f64, sigma: f64) -> Result<Self> {
        if !(abar_t > 0.0 && abar_t <= 1.0 && abar_prev > 0.0 && abar_prev <= 1.0) {
            return Err(Error::invalid(format!(
                "alpha bars must lie in (0, 1], got {abar_t}, {abar_prev}"
            )));
        }
        if sigma.is_nan() || sigma < 0.0 {
            return Err(Error::invalid("sigma_t must be >= 0"));
        }
        let radicand = 1.0 - abar_prev - sigma * sigma;
        if radicand < 0.0 {
            return Err(Error::invalid(format!(
                "sigma_t^2 = {} exceeds 1 - abar_prev = {}",
                sigma * sigma,
                1.0 - abar_prev
            )));
        }
        let sp = abar_prev.sqrt();
        let st = abar_t.sqrt();
        Ok(Self {
            state: sp / st,
            eps: radicand.sqrt() - sp * (1.0 - abar_t).sqrt() / st,
            noise: sigma,
        })
    }

    /// Posterior-mean DDPM transition `μ = (z - β/√(1-ᾱ)·ε)/√α` plus `σ·ξ`.
    pub fn ddpm(alpha: f64, beta: f64, abar: f64, sigma: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0 && abar > 0.0 && abar < 1.0) {
            return Err(Error::invalid(format!(
                "need alpha in (0, 1] and abar in (0, 1), got {alpha}, {abar}"
            )));
        }
        let inv = 1.0 / alpha.sqrt();
        Ok(Self {
            state: inv,
            eps: -inv * beta / (1.0 - abar).sqrt(),
            noise: sigma,
        })
    }

    pub fn apply(&self, z: &Tensor, eps: &Tensor, noise: Option<&Tensor>) -> Result<Tensor> {
        z.ensure_same_shape(eps, "noise estimate")?;
        let mut out = z.clone();
        for (o, &e) in out.data_mut().iter_mut().zip(eps.data()) {
            *o = self.state * *o + self.eps * e;
        }
        if self.noise != 0.0 {
            let n = noise.ok_or_else(|| Error::invalid("stochastic step needs a noise sample"))?;
            z.ensure_same_shape(n, "noise sample")?;
            for (o, &x) in out.data_mut().iter_mut().zip(n.data()) {
                *o += self.noise * x;
            }
        }
        Ok(out)
    }

    pub fn apply_graph(&self, g: &mut Graph, z: Var, eps: Var, noise: Option<&Tensor>) -> Var {
        let a = g.scale(z, self.state);
        let b = g.scale(eps, self.eps);
        let out = g.add(a, b);
        match noise {
            Some(n) if self.noise != 0.0 => {
                let scaled = n.map(|x| self.noise * x);
                g.offset(out, &scaled)
            }
            _ => out,
        }
    }
}

/// One reverse-diffusion step with the posterior mean of the schedule at `z.timestep`.
pub fn ddpm_step(
    z: &LatentState,
    eps: &Tensor,
    schedule: &NoiseSchedule,
    noise: &Tensor,
    sigma_t: f64,
) -> Result<LatentState> {
    let t = z.timestep();
    if t == 0 {
        return Err(Error::invalid("cannot step a latent at timestep 0"));
    }
    if t > schedule.train_steps() {
        return Err(Error::invalid(format!("timestep {t} beyond schedule")));
    }
    let prev = schedule.prev_timestep(t).unwrap_or(t - 1);
    let c = StepCoefficients::ddpm(schedule.alpha(t), schedule.beta(t), schedule.alpha_bar(t), sigma_t)?;
    LatentState::new(c.apply(z.values(), eps, Some(noise))?, prev)
}

/// One DDIM step from `ᾱ_t` to `ᾱ_prev`, landing at `prev_timestep`.
pub fn ddim_step(
    z: &LatentState,
    eps: &Tensor,
    abar_t: f64,
    abar_prev: f64,
    sigma_t: f64,
    xi: Option<&Tensor>,
    prev_timestep: usize,
) -> Result<LatentState> {
    let c = StepCoefficients::ddim(abar_t, abar_prev, sigma_t)?;
    LatentState::new(c.apply(z.values(), eps, xi)?, prev_timestep)
}

/// `ε_uncond + s·(ε_cond − ε_uncond)`.
pub fn cfg_combine(eps_uncond: &Tensor, eps_cond: &Tensor, scale: f64) -> Result<Tensor> {
    eps_uncond.ensure_same_shape(eps_cond, "guidance branches")?;
    if scale.is_nan() || scale < 0.0 {
        return Err(Error::invalid("guidance scale must be >= 0"));
    }
    let data = eps_uncond
        .data()
        .iter()
        .zip(eps_cond.data())
        .map(|(&u, &c)| u + scale * (c - u))
        .collect();
    Tensor::new(eps_uncond.shape().to_vec(), data)
}

pub fn cfg_combine_graph(g: &mut Graph, eps_uncond: Var, eps_cond: Var, scale: f64) -> Var {
    let diff = g.sub(eps_cond, eps_uncond);
    let scaled = g.scale(diff, scale);
    g.add(eps_uncond, scaled)
}

/// A reverse-diffusion transition rule.
pub trait Sampler: Send + Sync {
    fn name(&self) -> &'static str;

    /// Coefficients for the move from timestep `t` to `prev` (`prev < t`).
    fn coefficients(
        &self,
        schedule: &NoiseSchedule,
        t: usize,
        prev: usize,
        mode: SigmaMode,
    ) -> Result<StepCoefficients>;
}

fn ddim_sigma(abar_t: f64, abar_prev: f64, mode: SigmaMode) -> f64 {
    match mode {
        SigmaMode::Deterministic => 0.0,
        SigmaMode::Stochastic { eta } => {
            eta * ((1.0 - abar_prev) / (1.0 - abar_t)).sqrt() * (1.0 - abar_t / abar_prev).sqrt()
        }
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct DdimSampler;

impl Sampler for DdimSampler {
    fn name(&self) -> &'static str {
        "ddim"
    }

    fn coefficients(
        &self,
        schedule: &NoiseSchedule,
        t: usize,
        prev: usize,
        mode: SigmaMode,
    ) -> Result<StepCoefficients> {
        let (at, ap) = (schedule.alpha_bar(t), schedule.alpha_bar(prev));
        StepCoefficients::ddim(at, ap, ddim_sigma(at, ap, mode))
    }
}

/// Reference DDPM ancestral sampler. When the subsequence skips timesteps the
/// effective `α = ᾱ_t / ᾱ_prev` of the skipped span is used.
#[derive(Debug, Default, Clone, Copy)]
pub struct DdpmSampler;

impl Sampler for DdpmSampler {
    fn name(&self) -> &'static str {
        "ddpm"
    }

    fn coefficients(
        &self,
        schedule: &NoiseSchedule,
        t: usize,
        prev: usize,
        mode: SigmaMode,
    ) -> Result<StepCoefficients> {
        let (at, ap) = (schedule.alpha_bar(t), schedule.alpha_bar(prev));
        let alpha = if prev + 1 == t { schedule.alpha(t) } else { at / ap };
        let beta = if prev + 1 == t { schedule.beta(t) } else { 1.0 - alpha };
        let sigma = match mode {
            SigmaMode::Deterministic => 0.0,
            SigmaMode::Stochastic { eta } => eta * ((1.0 - ap) / (1.0 - at) * beta).sqrt(),
        };
        StepCoefficients::ddpm(alpha, beta, at, sigma)
    }
}

/// Graph-level result of one sampling run.
#[derive(Debug, Clone)]
pub struct GraphTrace {
    pub z0: Var,
    /// Conditional-branch attention maps, step-major.
    pub attention: Vec<Var>,
    pub steps: usize,
    pub layers: usize,
    pub intermediates: Vec<Var>,
}

impl GraphTrace {
    pub fn attention_record(&self, g: &Graph) -> Result<AttentionRecord> {
        AttentionRecord::new(
            self.steps,
            self.layers,
            self.attention.iter().map(|&v| g.value(v).clone()).collect(),
        )
    }
}

#[derive(Debug, Clone)]
pub struct DiffusionTrace {
    pub z0: LatentState,
    pub attention: AttentionRecord,
    pub intermediates: Vec<LatentState>,
}

/// Everything the sampling loop needs besides the latent and the prompt.
#[derive(Clone, Copy)]
pub struct SamplingContext<'a> {
    pub denoiser: &'a dyn Denoiser,
    pub sampler: &'a dyn Sampler,
    pub schedule: &'a NoiseSchedule,
    pub config: &'a SamplerConfig,
}

impl SamplingContext<'_> {
    fn check(&self) -> Result<()> {
        self.config.validate()?;
        if self.config.num_steps != self.schedule.num_steps() {
            return Err(Error::config(format!(
                "sampler config has {} steps, schedule has {}",
                self.config.num_steps,
                self.schedule.num_steps()
            )));
        }
        Ok(())
    }
}

/// Runs the full reverse chain on the tape, so the result is differentiable
/// with respect to `z_t`.
pub fn sample_graph(
    g: &mut Graph,
    z_t: Var,
    cond: &TextEmbedding,
    ctx: SamplingContext<'_>,
) -> Result<GraphTrace> {
    ctx.check()?;
    let expected = ctx.denoiser.latent_shape();
    if g.shape(z_t) != expected {
        return Err(Error::shape(format!(
            "latent {:?} vs denoiser {:?}",
            g.shape(z_t),
            expected
        )));
    }
    let uncond = TextEmbedding::unconditional(cond.tokens(), cond.dim());
    let layers = ctx.denoiser.attention_layers();
    let timesteps = ctx.schedule.timesteps();
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.config.seed);

    let mut z = z_t;
    let mut attention = Vec::with_capacity(timesteps.len() * layers);
    let mut intermediates = Vec::with_capacity(timesteps.len());
    for (i, &t) in timesteps.iter().enumerate() {
        let prev = timesteps.get(i + 1).copied().unwrap_or(0);
        let out_u = ctx.denoiser.predict(g, z, t, ctx.schedule, &uncond)?;
        let out_c = ctx.denoiser.predict(g, z, t, ctx.schedule, cond)?;
        for out in [&out_u, &out_c] {
            if g.shape(out.eps) != expected {
                return Err(Error::shape("denoiser output shape differs from latent"));
            }
        }
        if out_c.attention.len() != layers {
            return Err(Error::Numerical(format!(
                "denoiser exposed {} attention maps, expected {layers}",
                out_c.attention.len()
            )));
        }
        let eps = cfg_combine_graph(g, out_u.eps, out_c.eps, ctx.config.guidance_scale);
        let coeff = ctx.sampler.coefficients(ctx.schedule, t, prev, ctx.config.sigma_mode)?;
        let noise = (coeff.noise != 0.0).then(|| {
            let n: usize = expected.iter().product();
            let data = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            Tensor::new(expected.to_vec(), data).unwrap()
        });
        z = coeff.apply_graph(g, z, eps, noise.as_ref());
        attention.extend(out_c.attention);
        intermediates.push(z);
    }

    Ok(GraphTrace {
        z0: z,
        attention,
        steps: timesteps.len(),
        layers,
        intermediates,
    })
}

/// Samples `z_0` from `z_T` and captures every conditional attention map.
pub fn sample(z_t: &LatentState, cond: &TextEmbedding, ctx: SamplingContext<'_>) -> Result<DiffusionTrace> {
    let first = ctx.schedule.timesteps()[0];
    if z_t.timestep() != first {
        return Err(Error::invalid(format!(
            "z_T is at timestep {}, sampler starts at {first}",
            z_t.timestep()
        )));
    }
    let mut g = Graph::new();
    let z = g.constant(z_t.values().clone());
    let trace = sample_graph(&mut g, z, cond, ctx)?;
    let timesteps = ctx.schedule.timesteps();
    let intermediates = trace
        .intermediates
        .iter()
        .enumerate()
        .map(|(i, &v)| LatentState::new(g.value(v).clone(), timesteps.get(i + 1).copied().unwrap_or(0)))
        .collect::<Result<Vec<_>>>()?;
    Ok(DiffusionTrace {
        z0: LatentState::new(g.value(trace.z0).clone(), 0)?,
        attention: trace.attention_record(&g)?,
        intermediates,
    })
}
