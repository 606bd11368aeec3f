use crate::error::{Error, Result};

/// β/α/ᾱ sequences for timesteps `1..=T` plus the sampler's timestep subsequence.
///
/// Timesteps are 1-based; `ᾱ_0 = 1` by convention.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    timesteps: Vec<usize>,
}

/// Linear β schedule over `train_steps` timesteps with `num_steps` sampler
/// timesteps spaced evenly from `T` down to `1`.
pub fn build_schedule(
    train_steps: usize,
    beta_start: f64,
    beta_end: f64,
    num_steps: usize,
) -> Result<NoiseSchedule> {
    if train_steps == 0 {
        return Err(Error::config("schedule needs T >= 1"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::config(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    if num_steps == 0 || num_steps > train_steps {
        return Err(Error::config(format!(
            "sampler steps must be in 1..={train_steps}, got {num_steps}"
        )));
    }

    let betas: Vec<f64> = if train_steps == 1 {
        vec![beta_start]
    } else {
        let span = (train_steps - 1) as f64;
        (0..train_steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / span)
            .collect()
    };
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let alpha_bars = alphas
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();

    NoiseSchedule::from_parts(betas, alphas, alpha_bars, sampler_timesteps(train_steps, num_steps))
}

fn sampler_timesteps(train_steps: usize, num_steps: usize) -> Vec<usize> {
    if num_steps == 1 {
        return vec![train_steps];
    }
    let span = (train_steps - 1) as f64;
    let last = (num_steps - 1) as f64;
    (0..num_steps)
        .map(|k| train_steps - (span * k as f64 / last).round() as usize)
        .collect()
}

impl NoiseSchedule {
    fn from_parts(
        betas: Vec<f64>,
        alphas: Vec<f64>,
        alpha_bars: Vec<f64>,
        timesteps: Vec<usize>,
    ) -> Result<Self> {
        if betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::config("every beta must lie in (0, 1)"));
        }
        if timesteps.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::config("sampler timesteps must strictly decrease"));
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            timesteps,
        })
    }

    /// Number of training timesteps `T`.
    pub fn train_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Sampler timesteps, strictly decreasing.
    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    pub fn num_steps(&self) -> usize {
        self.timesteps.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// The timestep following `t` in the sampler subsequence, `0` after the last.
    pub fn prev_timestep(&self, t: usize) -> Option<usize> {
        let pos = self.timesteps.iter().position(|&s| s == t)?;
        Some(self.timesteps.get(pos + 1).copied().unwrap_or(0))
    }
}
