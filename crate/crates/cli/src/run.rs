//! Shared run plumbing: dataset loading, the generate cycle and its files.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use envpatch::alignment::LossWeights;
use envpatch::attack::Scene;
use envpatch::config::RunConfig;
use envpatch::dataset::{load_dataset, save_image};
use envpatch::optimizer::HistoryRow;
use envpatch::pipeline::Pipeline;
use envpatch::registry::Registry;
use envpatch::seed::derive_seed;
use serde::{Deserialize, Serialize};

pub const PATCH_FILE: &str = "patch.png";
pub const HISTORY_FILE: &str = "history.csv";
pub const METADATA_FILE: &str = "metadata.json";
pub const CONFIG_FILE: &str = "config.toml";

/// Seed stream for evaluation-time transform draws.
const EVAL_STREAM: u64 = 0xe7;

pub fn eval_seed(cfg: &RunConfig) -> u64 {
    derive_seed(cfg.seed, &[EVAL_STREAM])
}

pub fn load_scenes(cfg: &RunConfig) -> Result<Vec<Scene>> {
    let Some(path) = &cfg.dataset else {
        return Err(envpatch::Error::Data("no dataset given; pass --dataset or set `dataset` in the config".into()).into());
    };
    if !path.is_file() {
        return Err(envpatch::Error::Data(format!("dataset {} does not exist", path.display())).into());
    }
    let samples = load_dataset(path)?;
    Ok(samples.into_iter().map(|s| s.scene).collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatchInfo {
    pub file: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Metadata {
    pub prompt: String,
    pub seed: u64,
    pub weights: LossWeights,
    pub sampler: String,
    pub steps: usize,
    pub guidance_scale: f64,
    pub detector: String,
    pub scale: f64,
    pub epochs: usize,
    pub best: HistoryRow,
    #[serde(rename = "final")]
    pub last: HistoryRow,
    /// Cross-attention maps captured per sampling run (steps × layers).
    pub attention_maps: usize,
    pub patch: PatchInfo,
}

pub struct RunSummary {
    pub best: HistoryRow,
    pub history: Vec<HistoryRow>,
    pub steps: usize,
    pub layers: usize,
    pub attention_maps: usize,
    pub patch_path: PathBuf,
}

/// Runs one optimization and writes its four artifacts into `dir`.
pub fn generate(cfg: &RunConfig, scenes: &[Scene], dir: &Path) -> Result<RunSummary> {
    let pipeline = Pipeline::build(cfg, &Registry::with_defaults())?;
    let outcome = pipeline.generate(scenes)?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;

    let patch_path = dir.join(PATCH_FILE);
    save_image(outcome.patch.pixels(), &patch_path)?;

    let history = outcome.state.history.clone();
    let mut w = csv::Writer::from_path(dir.join(HISTORY_FILE))?;
    for row in &history {
        w.serialize(row)?;
    }
    w.flush()?;

    let mut saved = cfg.clone();
    saved.output = dir.to_path_buf();
    if let Some(d) = &cfg.dataset {
        saved.dataset = Some(fs::canonicalize(d)?);
    }
    saved.save(&dir.join(CONFIG_FILE))?;

    let attention = outcome.state.anchors().attention();
    let last = *history.last().context("optimizer produced no history")?;
    let meta = Metadata {
        prompt: cfg.prompt.clone(),
        seed: cfg.seed,
        weights: cfg.optimizer.weights,
        sampler: cfg.sampler.clone(),
        steps: cfg.sampling.num_steps,
        guidance_scale: cfg.sampling.guidance_scale,
        detector: pipeline.detector().name().to_string(),
        scale: cfg.scale,
        epochs: cfg.optimizer.epochs,
        best: outcome.best,
        last,
        attention_maps: attention.len(),
        patch: PatchInfo {
            file: PATCH_FILE.into(),
            width: outcome.patch.width(),
            height: outcome.patch.height(),
        },
    };
    fs::write(dir.join(METADATA_FILE), serde_json::to_string_pretty(&meta)? + "\n")?;

    Ok(RunSummary {
        best: outcome.best,
        history,
        steps: attention.steps(),
        layers: attention.layers(),
        attention_maps: attention.len(),
        patch_path,
    })
}

/// Writes serializable rows as CSV with a header.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
