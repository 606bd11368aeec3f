use std::path::{Path, PathBuf};

use anyhow::Result;
use clap::Args;
use envpatch::attack::{Detector, EotConfig, Scene};
use envpatch::config::RunConfig;
use envpatch::dataset::load_image;
use envpatch::evaluation::evaluate_digital;
use envpatch::registry::Registry;
use envpatch::Tensor;
use serde::{Deserialize, Serialize};

use crate::run::{eval_seed, load_scenes, write_csv};
use crate::ConfigArgs;

pub const METRICS_FILE: &str = "metrics.csv";
pub const PER_IMAGE_FILE: &str = "per_image.csv";

#[derive(Debug, Args)]
pub struct EvalDigitalArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Patch image to evaluate.
    #[arg(long)]
    pub patch: PathBuf,
    /// Comma-separated patch scales; defaults to the config scale.
    #[arg(long, value_delimiter = ',')]
    pub scales: Vec<f64>,
    /// Place patches without random transforms.
    #[arg(long)]
    pub no_eot: bool,
}

/// One row per patch scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub scale: f64,
    pub map50_clean: f64,
    pub map50_gray: f64,
    pub map50_patch: f64,
    pub conf_clean: f64,
    pub conf_gray: f64,
    pub conf_patch: f64,
    /// Evaluated images: dataset size × transform samples.
    pub images: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerImageRow {
    pub scale: f64,
    pub condition: String,
    pub image: usize,
    pub sample: usize,
    pub max_confidence: f64,
}

pub struct DigitalReport {
    pub rows: Vec<MetricsRow>,
    pub per_image: Vec<PerImageRow>,
}

/// Evaluates `patch` against a same-sized gray patch and clean images.
pub fn evaluate(
    cfg: &RunConfig,
    detector: &dyn Detector,
    scenes: &[Scene],
    patch: &Tensor,
    scales: &[f64],
    eot: &EotConfig,
) -> Result<DigitalReport> {
    let seed = eval_seed(cfg);
    let gray = Tensor::filled(patch.shape().to_vec(), 0.5);
    let clean = evaluate_digital(None, scenes, detector, eot, cfg.scale, seed)?;
    let mut rows = Vec::with_capacity(scales.len());
    let mut per_image = Vec::new();
    let samples = clean.per_image.len() / scenes.len();
    for &scale in scales {
        let g = evaluate_digital(Some(&gray), scenes, detector, eot, scale, seed)?;
        let p = evaluate_digital(Some(patch), scenes, detector, eot, scale, seed)?;
        for (condition, m) in [("clean", &clean), ("gray", &g), ("patch", &p)] {
            per_image.extend(m.per_image.iter().enumerate().map(|(k, &c)| PerImageRow {
                scale,
                condition: condition.into(),
                image: k / samples,
                sample: k % samples,
                max_confidence: c,
            }));
        }
        rows.push(MetricsRow {
            scale,
            map50_clean: clean.map50,
            map50_gray: g.map50,
            map50_patch: p.map50,
            conf_clean: clean.mean_max_confidence,
            conf_gray: g.mean_max_confidence,
            conf_patch: p.mean_max_confidence,
            images: p.per_image.len(),
        });
    }
    Ok(DigitalReport { rows, per_image })
}

pub fn write_report(dir: &Path, report: &DigitalReport) -> Result<()> {
    write_csv(&dir.join(METRICS_FILE), &report.rows)?;
    write_csv(&dir.join(PER_IMAGE_FILE), &report.per_image)
}

pub fn execute(args: &EvalDigitalArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    let scenes = load_scenes(&cfg)?;
    let patch = load_image(&args.patch)?;
    let detector = Registry::with_defaults().detector(&cfg.detector)?;
    let scales = if args.scales.is_empty() { vec![cfg.scale] } else { args.scales.clone() };
    if let Some(bad) = scales.iter().find(|s| !(**s > 0.0 && **s <= 1.0)) {
        return Err(envpatch::Error::Config(format!("scale {bad} must lie in (0, 1]")).into());
    }
    let eot = if args.no_eot { EotConfig::identity() } else { cfg.eot.clone() };
    let report = evaluate(&cfg, detector.as_ref(), &scenes, &patch, &scales, &eot)?;
    write_report(&cfg.output, &report)?;
    println!("{:>6} {:>8} {:>8} {:>8}", "scale", "clean", "gray", "patch");
    for r in &report.rows {
        println!(
            "{:>6.3} {:>8.2} {:>8.2} {:>8.2}",
            r.scale,
            100.0 * r.map50_clean,
            100.0 * r.map50_gray,
            100.0 * r.map50_patch
        );
    }
    Ok(())
}
