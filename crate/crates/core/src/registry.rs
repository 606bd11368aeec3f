//! Named strategy registry.
//!
//! Detectors, samplers, denoisers and decoders are trait objects built by
//! factories registered under a name, so configuration files select them at
//! runtime and callers can add their own.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attack::{AnalyticDetector, ConvDetector, Detector, ExternalDetector};
use crate::diffusion::{
    DdimSampler, DdpmSampler, Decoder, DecoderConfig, Denoiser, DenoiserConfig, ReferenceDecoder, ReferenceDenoiser,
    Sampler,
};
use crate::error::{Error, Result};

/// Options passed to detector factories; each detector reads what it needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub name: String,
    /// Analytic detector target colour.
    pub target: [f64; 3],
    /// Analytic detector window, as a fraction of box height.
    pub window: f64,
    /// Convolutional detector weight seed.
    pub seed: u64,
    /// External detector command line; the image path is appended.
    pub command: Option<String>,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        let a = AnalyticDetector::default();
        Self {
            name: "analytic".into(),
            target: a.target,
            window: a.window,
            seed: ConvDetector::DEFAULT_SEED,
            command: None,
        }
    }
}

pub type DetectorFactory = Box<dyn Fn(&DetectorConfig) -> Result<Box<dyn Detector>> + Send + Sync>;
pub type SamplerFactory = Box<dyn Fn() -> Box<dyn Sampler> + Send + Sync>;
pub type DenoiserFactory = Box<dyn Fn(&DenoiserConfig, u64) -> Result<Box<dyn Denoiser>> + Send + Sync>;
pub type DecoderFactory = Box<dyn Fn(&DecoderConfig, [usize; 3], u64) -> Result<Box<dyn Decoder>> + Send + Sync>;

#[derive(Default)]
pub struct Registry {
    detectors: BTreeMap<String, DetectorFactory>,
    samplers: BTreeMap<String, SamplerFactory>,
    denoisers: BTreeMap<String, DenoiserFactory>,
    decoders: BTreeMap<String, DecoderFactory>,
}

fn unknown<T>(kind: &'static str, name: &str, map: &BTreeMap<String, T>) -> Error {
    Error::UnknownStrategy {
        kind,
        name: name.to_owned(),
        available: map.keys().cloned().collect::<Vec<_>>().join(", "),
    }
}

impl Registry {
    /// An empty registry.
    pub fn new() -> Self {
        Self::default()
    }

    /// The bundled strategies.
    pub fn with_defaults() -> Self {
        let mut r = Self::new();
        r.register_detector("analytic", |c| Ok(Box::new(AnalyticDetector::new(c.target, c.window)?)));
        r.register_detector("conv", |c| Ok(Box::new(ConvDetector::new(c.seed))));
        r.register_detector("external", |c| {
            let cmd = c
                .command
                .as_deref()
                .ok_or_else(|| Error::config("external detector needs `command`"))?;
            Ok(Box::new(ExternalDetector::new(cmd)?))
        });
        r.register_sampler("ddim", || Box::new(DdimSampler));
        r.register_sampler("ddpm", || Box::new(DdpmSampler));
        r.register_denoiser("reference", |c, seed| Ok(Box::new(ReferenceDenoiser::new(c.clone(), seed)?)));
        r.register_decoder("reference", |c, latent, seed| {
            Ok(Box::new(ReferenceDecoder::new(c.clone(), latent, seed)?))
        });
        r
    }

    pub fn register_detector(
        &mut self,
        name: &str,
        f: impl Fn(&DetectorConfig) -> Result<Box<dyn Detector>> + Send + Sync + 'static,
    ) {
        self.detectors.insert(name.to_owned(), Box::new(f));
    }

    pub fn register_sampler(&mut self, name: &str, f: impl Fn() -> Box<dyn Sampler> + Send + Sync + 'static) {
        self.samplers.insert(name.to_owned(), Box::new(f));
    }

    pub fn register_denoiser(
        &mut self,
        name: &str,
        f: impl Fn(&DenoiserConfig, u64) -> Result<Box<dyn Denoiser>> + Send + Sync + 'static,
    ) {
        self.denoisers.insert(name.to_owned(), Box::new(f));
    }

    pub fn register_decoder(
        &mut self,
        name: &str,
        f: impl Fn(&DecoderConfig, [usize; 3], u64) -> Result<Box<dyn Decoder>> + Send + Sync + 'static,
    ) {
        self.decoders.insert(name.to_owned(), Box::new(f));
    }

    pub fn detector(&self, cfg: &DetectorConfig) -> Result<Box<dyn Detector>> {
        let f = self
            .detectors
            .get(&cfg.name)
            .ok_or_else(|| unknown("detector", &cfg.name, &self.detectors))?;
        f(cfg)
    }

    pub fn sampler(&self, name: &str) -> Result<Box<dyn Sampler>> {
        let f = self.samplers.get(name).ok_or_else(|| unknown("sampler", name, &self.samplers))?;
        Ok(f())
    }

    pub fn denoiser(&self, name: &str, cfg: &DenoiserConfig, seed: u64) -> Result<Box<dyn Denoiser>> {
        let f = self.denoisers.get(name).ok_or_else(|| unknown("denoiser", name, &self.denoisers))?;
        f(cfg, seed)
    }

    pub fn decoder(&self, name: &str, cfg: &DecoderConfig, latent: [usize; 3], seed: u64) -> Result<Box<dyn Decoder>> {
        let f = self.decoders.get(name).ok_or_else(|| unknown("decoder", name, &self.decoders))?;
        f(cfg, latent, seed)
    }

    pub fn detector_names(&self) -> impl Iterator<Item = &str> {
        self.detectors.keys().map(String::as_str)
    }

    pub fn sampler_names(&self) -> impl Iterator<Item = &str> {
        self.samplers.keys().map(String::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve_by_name() {
        let r = Registry::with_defaults();
        assert_eq!(r.sampler("ddim").unwrap().name(), "ddim");
        assert_eq!(r.sampler("ddpm").unwrap().name(), "ddpm");
        for name in ["analytic", "conv"] {
            let cfg = DetectorConfig {
                name: name.into(),
                ..DetectorConfig::default()
            };
            assert_eq!(r.detector(&cfg).unwrap().name(), name);
        }
        assert_eq!(r.detector_names().collect::<Vec<_>>(), ["analytic", "conv", "external"]);
    }

    #[test]
    fn unknown_names_list_alternatives() {
        let r = Registry::with_defaults();
        match r.sampler("euler") {
            Err(Error::UnknownStrategy { kind, available, .. }) => {
                assert_eq!(kind, "sampler");
                assert_eq!(available, "ddim, ddpm");
            }
            other => panic!("unexpected {:?}", other.map(|s| s.name())),
        }
        let ext = DetectorConfig {
            name: "external".into(),
            ..DetectorConfig::default()
        };
        assert!(matches!(r.detector(&ext), Err(Error::Config(_))));
    }

    #[test]
    fn custom_strategies_can_be_added() {
        let mut r = Registry::new();
        r.register_sampler("mine", || Box::new(DdimSampler));
        assert!(r.sampler("mine").is_ok());
        assert!(r.sampler("ddim").is_err());
    }
}
