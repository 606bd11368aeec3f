use std::path::Path;

use anyhow::Result;
use clap::{Args, ValueEnum};
use envpatch::attack::Scene;
use envpatch::config::RunConfig;
use envpatch::dataset::load_image;
use envpatch::registry::Registry;
use serde::{Deserialize, Serialize};

use crate::digital::{evaluate, write_report};
use crate::plot;
use crate::run::{generate, load_scenes, write_csv};
use crate::ConfigArgs;

pub const SWEEP_FILE: &str = "sweep.csv";
pub const SWEEP_PLOT: &str = "sweep.svg";
pub const CURVES_PLOT: &str = "loss_curves.svg";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    /// `beta:gamma` pairs.
    Weights,
    /// Denoising step counts.
    Steps,
    /// Patch scales.
    Scale,
    /// Epoch budgets.
    Epochs,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, value_enum)]
    pub kind: Kind,
    /// Comma-separated grid, e.g. `4,5,6` or `10:0.25,5:0.1` for weights.
    #[arg(long)]
    pub grid: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Value {
    Weights { beta: f64, gamma: f64 },
    Steps(usize),
    Scale(f64),
    Epochs(usize),
}

impl Value {
    fn label(&self) -> String {
        match self {
            Value::Weights { beta, gamma } => format!("{beta}:{gamma}"),
            Value::Steps(n) | Value::Epochs(n) => n.to_string(),
            Value::Scale(x) => x.to_string(),
        }
    }

    fn apply(&self, cfg: &mut RunConfig) {
        match *self {
            Value::Weights { beta, gamma } => {
                cfg.optimizer.weights.beta = beta;
                cfg.optimizer.weights.gamma = gamma;
            }
            Value::Steps(n) => cfg.sampling.num_steps = n,
            Value::Scale(x) => cfg.scale = x,
            Value::Epochs(n) => cfg.optimizer.epochs = n,
        }
    }
}

fn usage(msg: String) -> anyhow::Error {
    envpatch::Error::Config(msg).into()
}

fn parse_grid(kind: Kind, grid: &str) -> Result<Vec<Value>> {
    let items: Vec<&str> = grid.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if items.is_empty() {
        return Err(usage("ablation grid is empty".into()));
    }
    items
        .iter()
        .map(|item| {
            let bad = || usage(format!("grid value `{item}` is not valid for {kind:?}"));
            Ok(match kind {
                Kind::Weights => {
                    let (b, g) = item.split_once(':').ok_or_else(bad)?;
                    Value::Weights {
                        beta: b.trim().parse().map_err(|_| bad())?,
                        gamma: g.trim().parse().map_err(|_| bad())?,
                    }
                }
                Kind::Steps => Value::Steps(item.parse().map_err(|_| bad())?),
                Kind::Epochs => Value::Epochs(item.parse().map_err(|_| bad())?),
                Kind::Scale => Value::Scale(item.parse().map_err(|_| bad())?),
            })
        })
        .collect()
}

/// One sweep cell. Metric fields are empty when the cell failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub cell: usize,
    pub kind: Kind,
    pub value: String,
    pub seed: u64,
    pub status: String,
    pub best_epoch: Option<usize>,
    pub l_attack: Option<f64>,
    pub l_prompt: Option<f64>,
    pub l_latent: Option<f64>,
    pub total: Option<f64>,
    pub map50_clean: Option<f64>,
    pub map50_gray: Option<f64>,
    pub map50_patch: Option<f64>,
    pub steps: Option<usize>,
    pub layers: Option<usize>,
    /// Cross-attention maps per sampling run; steps × layers.
    pub attention_maps: Option<usize>,
    pub error: String,
}

struct CellOutcome {
    row: SweepRow,
    curve: Vec<(usize, f64)>,
}

fn run_cell(cfg: &RunConfig, scenes: &[Scene], dir: &Path, mut row: SweepRow) -> Result<CellOutcome> {
    cfg.validate()?;
    let summary = generate(cfg, scenes, dir)?;
    let patch = load_image(&summary.patch_path)?;
    let detector = Registry::with_defaults().detector(&cfg.detector)?;
    let report = evaluate(cfg, detector.as_ref(), scenes, &patch, &[cfg.scale], &cfg.eot)?;
    write_report(dir, &report)?;
    let m = &report.rows[0];
    let b = summary.best;
    row.status = "ok".into();
    row.best_epoch = Some(b.epoch);
    row.l_attack = Some(b.l_attack);
    row.l_prompt = Some(b.l_prompt);
    row.l_latent = Some(b.l_latent);
    row.total = Some(b.total);
    row.map50_clean = Some(m.map50_clean);
    row.map50_gray = Some(m.map50_gray);
    row.map50_patch = Some(m.map50_patch);
    row.steps = Some(summary.steps);
    row.layers = Some(summary.layers);
    row.attention_maps = Some(summary.attention_maps);
    let curve = summary.history.iter().map(|h| (h.epoch, h.total)).collect();
    Ok(CellOutcome { row, curve })
}

pub fn execute(args: &AblateArgs) -> Result<()> {
    let base = args.config.resolve()?;
    let values = parse_grid(args.kind, &args.grid)?;
    let scenes = load_scenes(&base)?;
    let out = base.output.clone();
    std::fs::create_dir_all(&out)?;

    let mut rows = Vec::with_capacity(values.len());
    let mut curves = Vec::new();
    let mut failures = Vec::new();
    for (cell, value) in values.iter().enumerate() {
        let mut cfg = base.clone();
        value.apply(&mut cfg);
        cfg.seed = base.seed.wrapping_add(cell as u64);
        let dir = out.join(format!("cell_{cell:02}"));
        cfg.output = dir.clone();
        let row = SweepRow {
            cell,
            kind: args.kind,
            value: value.label(),
            seed: cfg.seed,
            status: "failed".into(),
            best_epoch: None,
            l_attack: None,
            l_prompt: None,
            l_latent: None,
            total: None,
            map50_clean: None,
            map50_gray: None,
            map50_patch: None,
            steps: None,
            layers: None,
            attention_maps: None,
            error: String::new(),
        };
        log::info!("cell {cell}: {:?} = {}", args.kind, value.label());
        match run_cell(&cfg, &scenes, &dir, row.clone()) {
            Ok(o) => {
                curves.push((o.row.value.clone(), o.curve));
                rows.push(o.row);
            }
            Err(e) => {
                log::warn!("cell {cell} failed: {e:#}");
                rows.push(SweepRow {
                    error: format!("{e:#}"),
                    ..row
                });
                failures.push(e);
            }
        }
    }

    write_csv(&out.join(SWEEP_FILE), &rows)?;
    plot::sweep(&out.join(SWEEP_PLOT), &rows)?;
    plot::loss_curves(&out.join(CURVES_PLOT), &curves)?;
    for r in &rows {
        match r.status.as_str() {
            "ok" => println!(
                "cell {:>2} {:>10} attack {:.4} mAP {:.2}",
                r.cell,
                r.value,
                r.l_attack.unwrap_or(f64::NAN),
                100.0 * r.map50_patch.unwrap_or(f64::NAN)
            ),
            _ => println!("cell {:>2} {:>10} failed: {}", r.cell, r.value, r.error),
        }
    }
    if failures.len() == rows.len() {
        let first = failures.into_iter().next().expect("grid is non-empty");
        return Err(first.context("every sweep cell failed"));
    }
    if !failures.is_empty() {
        eprintln!("warning: {} of {} cells failed; see {SWEEP_FILE}", failures.len(), rows.len());
    }
    Ok(())
}
