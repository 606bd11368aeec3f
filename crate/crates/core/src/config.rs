//! Run configuration, stored as TOML next to every output.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::EotConfig;
use crate::diffusion::{DecoderConfig, DenoiserConfig, SamplerConfig};
use crate::error::{Error, Result};
use crate::optimizer::OptimizerConfig;
use crate::registry::DetectorConfig;

/// Environment variable that overrides [`RunConfig::seed`].
pub const SEED_ENV: &str = "ENVPATCH_SEED";

pub const DEFAULT_PROMPT: &str = "a picture full of leaf-like green colors";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            train_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

/// The frozen generative model. Its weights come from `seed` and do not
/// change with the run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub denoiser: String,
    pub decoder: String,
    pub seed: u64,
    pub text_seed: u64,
    pub denoiser_net: DenoiserConfig,
    pub decoder_net: DecoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            denoiser: "reference".into(),
            decoder: "reference".into(),
            seed: 7,
            text_seed: 0,
            denoiser_net: DenoiserConfig::default(),
            decoder_net: DecoderConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub prompt: String,
    pub seed: u64,
    /// Annotation file (JSON lines).
    pub dataset: Option<PathBuf>,
    pub output: PathBuf,
    /// Patch side as a fraction of the person box height.
    pub scale: f64,
    /// Sampler strategy name.
    pub sampler: String,
    pub sampling: SamplerConfig,
    pub schedule: ScheduleConfig,
    pub optimizer: OptimizerConfig,
    pub eot: EotConfig,
    pub detector: DetectorConfig,
    pub model: ModelConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            prompt: DEFAULT_PROMPT.into(),
            seed: 0,
            dataset: None,
            output: PathBuf::from("out"),
            scale: 0.4,
            sampler: "ddim".into(),
            sampling: SamplerConfig::default(),
            schedule: ScheduleConfig::default(),
            optimizer: OptimizerConfig::default(),
            eot: EotConfig::default(),
            detector: DetectorConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    /// Applies a seed override such as the value of [`SEED_ENV`].
    pub fn with_seed_override(mut self, value: Option<&str>) -> Result<Self> {
        if let Some(v) = value {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("{SEED_ENV}=`{v}` is not an unsigned integer")))?;
        }
        Ok(self)
    }

    /// Checks every range before any work starts.
    pub fn validate(&self) -> Result<()> {
        if self.prompt.trim().is_empty() {
            return Err(Error::config("prompt must not be empty"));
        }
        if !(self.scale > 0.0 && self.scale <= 1.0) {
            return Err(Error::config(format!("scale {} must lie in (0, 1]", self.scale)));
        }
        self.sampling.validate()?;
        let s = &self.schedule;
        if s.train_steps == 0 || !(s.beta_start > 0.0 && s.beta_start <= s.beta_end && s.beta_end < 1.0) {
            return Err(Error::config("schedule needs T >= 1 and 0 < beta_start <= beta_end < 1"));
        }
        if self.sampling.num_steps > s.train_steps {
            return Err(Error::config("more sampler steps than training timesteps"));
        }
        self.optimizer.validate()?;
        self.eot.validate()?;
        self.model.denoiser_net.validate()?;
        if self.model.decoder_net.stages == 0 || self.model.decoder_net.gain.is_nan() || self.model.decoder_net.gain <= 0.0 {
            return Err(Error::config("decoder needs >= 1 stage and a positive gain"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig {
            dataset: Some("data/annotations.jsonl".into()),
            ..RunConfig::default()
        };
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn defaults_match_reference_hyperparameters() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.sampling.num_steps, 7);
        assert_eq!(cfg.sampling.guidance_scale, 7.5);
        assert_eq!(cfg.optimizer.learning_rate, 5e-3);
        assert_eq!(cfg.optimizer.epochs, 100);
        let w = cfg.optimizer.weights;
        assert_eq!((w.alpha, w.beta, w.gamma), (1.0, 5.0, 0.1));
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg = RunConfig::from_toml("seed = 9\n[optimizer]\nepochs = 3\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.optimizer.epochs, 3);
        assert_eq!(cfg.optimizer.learning_rate, 5e-3);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::from_toml("scale = 1.5").is_err());
        assert!(RunConfig::from_toml("[eot]\ncontrast = { lo = 2.0, hi = 1.0 }").is_err());
        assert!(RunConfig::from_toml("bogus = 1").is_err());
        assert!(RunConfig::from_toml("[sampling]\nnum_steps = 0").is_err());
    }

    #[test]
    fn seed_override() {
        let cfg = RunConfig::default().with_seed_override(Some(" 42 ")).unwrap();
        assert_eq!(cfg.seed, 42);
        assert!(RunConfig::default().with_seed_override(Some("x")).is_err());
        assert_eq!(RunConfig::default().with_seed_override(None).unwrap().seed, 0);
    }
}
