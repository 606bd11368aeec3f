//! Acceptance suite. Runs every criterion, prints PASS/FAIL per criterion and
//! exits non-zero when any fails.

#[path = "../../core/tests/support/map_brute.rs"]
mod map_brute;

use std::fmt::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use anyhow::{ensure, Context, Result};
use envpatch::alignment::LossWeights;
use envpatch::attack::{sample_transform, transform_patch, AttackSetup, DetectionSet, EotConfig, ScoredBox, TransformParams};
use envpatch::config::RunConfig;
use envpatch::dataset::{toy_scenes, write_toy_dataset};
use envpatch::diffusion::{build_schedule, ddim_step, ddpm_step, LatentState};
use envpatch::evaluation::map50;
use envpatch::geometry::BBox;
use envpatch::gradcheck::{check_gradient, pick_coordinates, Tolerance};
use envpatch::optimizer::{initialize_run, objective_and_gradient, optimize, AttackTask, Outcome};
use envpatch::pipeline::Pipeline;
use envpatch::registry::Registry;
use envpatch::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

const BIN: &str = env!("CARGO_BIN_EXE_envpatch");

fn envpatch(args: &[&str]) -> Result<String> {
    let out = Command::new(BIN).args(args).env_remove("ENVPATCH_SEED").output()?;
    ensure!(
        out.status.success(),
        "envpatch {} exited with {:?}: {}",
        args.join(" "),
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn toy_dataset(dir: &Path) -> Result<PathBuf> {
    Ok(write_toy_dataset(&dir.join("data"), 8, 96, 0)?)
}

fn scalar(v: f64, t: usize) -> LatentState {
    LatentState::new(Tensor::scalar(v), t).unwrap()
}

fn sampler_oracle() -> Result<String> {
    let start = Instant::now();
    let s = build_schedule(1, 0.1, 0.1, 1)?;
    let eps = Tensor::scalar(0.1f64.sqrt());
    let ddpm = ddpm_step(&scalar(1.0, 1), &eps, &s, &Tensor::scalar(0.0), 0.0)?.values().item();
    ensure!((ddpm - 0.9486833).abs() < 1e-6, "ddpm step gave {ddpm}");
    let ddim = ddim_step(&scalar(1.0, 2), &Tensor::scalar(0.5), 0.25, 0.64, 0.0, None, 1)?.values().item();
    ensure!((ddim - 1.2071797).abs() < 1e-6, "ddim step gave {ddim}");

    let two = build_schedule(2, 0.1, 0.2, 1)?;
    ensure!((two.alpha_bars()[0] - 0.9).abs() < 1e-12 && (two.alpha_bars()[1] - 0.72).abs() < 1e-12);
    let mut worst = 0.0f64;
    for t in [1usize, 2, 3, 10, 250, 999, 1000] {
        let sched = build_schedule(t, 1e-4, 0.02, 1)?;
        let mut prod = 1.0;
        for i in 0..t {
            let beta = if t == 1 { 1e-4 } else { 1e-4 + (0.02 - 1e-4) * i as f64 / (t - 1) as f64 };
            prod *= 1.0 - beta;
            worst = worst.max((sched.alpha_bars()[i] - prod).abs());
        }
    }
    ensure!(worst <= 1e-12, "alpha bar deviates by {worst:e}");
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(1), "took {elapsed:?}");
    Ok(format!("ddpm {ddpm:.7}, ddim {ddim:.7}, max alpha-bar error {worst:.1e}, {elapsed:.2?}"))
}

fn determinism() -> Result<String> {
    let tmp = tempfile::tempdir()?;
    let data = toy_dataset(tmp.path())?;
    let data = data.to_str().context("utf-8 path")?;
    let mut took = Vec::new();
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let dir = tmp.path().join(name);
        let start = Instant::now();
        envpatch(&["generate", "--dataset", data, "--output", dir.to_str().unwrap()])?;
        took.push(start.elapsed());
        runs.push(dir);
    }
    let replay = tmp.path().join("replay");
    let saved = runs[0].join("config.toml");
    envpatch(&["generate", "--config", saved.to_str().unwrap(), "--output", replay.to_str().unwrap()])?;
    for file in ["patch.png", "history.csv"] {
        let a = std::fs::read(runs[0].join(file))?;
        ensure!(a == std::fs::read(runs[1].join(file))?, "{file} differs between runs");
        ensure!(a == std::fs::read(replay.join(file))?, "{file} differs when replayed from config.toml");
    }
    let rows = std::fs::read_to_string(runs[0].join("history.csv"))?.lines().count() - 1;
    ensure!(rows == 100, "history has {rows} rows");
    let slowest = took.iter().max().copied().unwrap_or_default();
    ensure!(slowest < Duration::from_secs(300), "generate took {slowest:?}");
    Ok(format!("patch and history byte-identical over 3 runs, 100 epochs in {slowest:.1?}"))
}

fn default_pipeline(weights: LossWeights, epochs: usize) -> Result<Pipeline> {
    let mut cfg = RunConfig::default();
    cfg.optimizer.weights = weights;
    cfg.optimizer.epochs = epochs;
    Ok(Pipeline::build(&cfg, &Registry::with_defaults())?)
}

fn gradient_suite() -> Result<String> {
    let p = default_pipeline(LossWeights::default(), 1)?;
    let gen = p.generator();
    let state = initialize_run(0, &gen)?;
    let shift = LatentState::gaussian(&[4, 8, 8], 0, 99);
    let mut z = state.z_t.values().clone();
    for (v, d) in z.data_mut().iter_mut().zip(shift.values().data()) {
        *v += 0.05 * d;
    }
    let scenes = toy_scenes(2, 64, 3);
    let setup = AttackSetup {
        detector: p.detector(),
        eot: &p.config().eot,
        scale: p.config().scale,
        seed: 5,
    };
    let weights = LossWeights::default();
    let (total, grad) = objective_and_gradient(&z, state.anchors(), &gen, &scenes, &setup, &weights)?;
    let f = |x: &Tensor| Ok(objective_and_gradient(x, state.anchors(), &gen, &scenes, &setup, &weights)?.0);
    let idx = pick_coordinates(z.len(), 24, 1);
    let report = check_gradient(f, &z, &grad, &idx, 1e-5, Tolerance::default())?;
    let bad: Vec<String> = report
        .iter()
        .filter(|c| !c.ok)
        .map(|c| format!("#{}: {:.6e} vs {:.6e}", c.index, c.analytic, c.numeric))
        .collect();
    ensure!(bad.is_empty(), "mismatches: {}", bad.join(", "));
    let worst = report
        .iter()
        .map(|c| (c.analytic - c.numeric).abs() / c.analytic.abs().max(c.numeric.abs()).max(1e-300))
        .fold(0.0, f64::max);
    Ok(format!("{} coordinates, total {total:.4}, worst relative error {worst:.1e}", report.len()))
}

fn run(weights: LossWeights, epochs: usize, dataset: usize) -> Result<Outcome> {
    let p = default_pipeline(weights, epochs)?;
    let gen = p.generator();
    let scenes = toy_scenes(dataset, 96, 0);
    let task = AttackTask {
        scenes: &scenes,
        detector: p.detector(),
        eot: &p.config().eot,
        scale: p.config().scale,
    };
    Ok(optimize(initialize_run(0, &gen)?, &gen, &task, &p.optimizer_config())?)
}

fn anchor_property() -> Result<String> {
    let out = run(LossWeights::default(), 2, 4)?;
    let h = &out.state.history;
    ensure!(h[0].l_prompt == 0.0 && h[0].l_latent == 0.0, "epoch 0: {:?}", h[0]);
    ensure!(h[1].l_prompt > 0.0 && h[1].l_latent > 0.0, "epoch 1: {:?}", h[1]);
    Ok(format!("epoch 0 exactly 0; epoch 1 prompt {:.2e}, latent {:.2e}", h[1].l_prompt, h[1].l_latent))
}

fn attack_efficacy() -> Result<String> {
    let aligned = run(LossWeights::default(), 100, 8)?;
    let first = aligned.state.history[0].l_attack;
    let best = aligned.best.l_attack;
    ensure!(best <= 0.5 * first, "best attack loss {best:.4} vs epoch 0 {first:.4}");
    let free = run(LossWeights::new(1.0, 0.0, 0.0)?, 100, 8)?;
    let with = aligned.state.history.last().unwrap().l_latent;
    let without = free.state.history.last().unwrap().l_latent;
    ensure!(without > with, "latent loss without alignment {without:.4} vs with {with:.4}");
    Ok(format!(
        "attack {first:.4} -> {best:.4} ({:.0}%), final latent loss {with:.4} aligned vs {without:.4} free",
        100.0 * best / first
    ))
}

fn map_oracle() -> Result<String> {
    let mut worst = 0.0f64;
    for seed in 0..100 {
        let inst = map_brute::instance(seed);
        let fast = map50(&inst.predictions, &inst.gt, 0)?;
        worst = worst.max((fast - map_brute::brute_force_ap(&inst)).abs());
    }
    ensure!(worst <= 1e-9, "max deviation {worst:e}");
    let gt = vec![vec![BBox::new(0.0, 0.0, 10.0, 10.0)?]];
    let preds = vec![DetectionSet::new(vec![
        ScoredBox { bbox: BBox::new(40.0, 40.0, 50.0, 50.0)?, label: 0, score: 0.9 },
        ScoredBox { bbox: gt[0][0], label: 0, score: 0.8 },
    ])?];
    let ap = map50(&preds, &gt, 0)?;
    ensure!(ap == 0.5, "FP/TP example gave {ap}");
    Ok(format!("100 instances, max deviation {worst:.1e}; FP then TP gives {ap}"))
}

#[derive(Debug, Deserialize)]
struct ReportRow {
    scene: String,
    posture: String,
    frames: usize,
    asr: f64,
}

fn frames_report(dir: &Path, name: &str, counts: &[(&str, usize, usize)]) -> Result<Vec<ReportRow>> {
    let mut text = String::from("scene,posture,frame,evaded\n");
    let longest = counts.iter().map(|c| c.1).max().unwrap_or(0);
    // interleave postures and write frames back to front
    for f in (0..longest).rev() {
        for &(posture, total, evaded) in counts {
            if f < total {
                writeln!(text, "lobby,{posture},{f},{}", u8::from(f < evaded))?;
            }
        }
    }
    let input = dir.join(format!("{name}.csv"));
    let output = dir.join(format!("{name}_report.csv"));
    std::fs::write(&input, text)?;
    envpatch(&["eval-frames", input.to_str().unwrap(), "--output", output.to_str().unwrap()])?;
    let rows = csv::Reader::from_path(&output)?.deserialize().collect::<Result<Vec<ReportRow>, _>>()?;
    Ok(rows)
}

fn asr_arithmetic() -> Result<String> {
    let tmp = tempfile::tempdir()?;
    let postures = [
        ("front", 10_000, 9_559),
        ("side", 10_000, 9_341),
        ("back", 10_000, 9_275),
        ("crouch", 10_000, 9_479),
    ];
    let rows = frames_report(tmp.path(), "table", &postures)?;
    ensure!(rows.len() == 5, "expected 4 posture rows and a mean row, got {}", rows.len());
    for (row, want) in rows.iter().zip([95.59, 93.41, 92.75, 94.79]) {
        ensure!((row.asr - want).abs() < 1e-9, "{}: {} vs {want}", row.posture, row.asr);
    }
    let mean = &rows[4];
    ensure!(mean.posture == "MEAN" && mean.scene == "lobby" && mean.frames == 40_000);
    ensure!((mean.asr - 94.135).abs() < 1e-9, "mean {}", mean.asr);
    ensure!((mean.asr - 94.14).abs() <= 0.01);

    let single = frames_report(tmp.path(), "single", &[("front", 300, 282)])?;
    ensure!(single[0].asr == 94.0, "282/300 gave {}", single[0].asr);
    Ok(format!("mean {:.3} (rounds to {:.2}); 282/300 -> {}", mean.asr, mean.asr, single[0].asr))
}

fn eot_ranges() -> Result<String> {
    let cfg = EotConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for k in 0..10_000 {
        let p = sample_transform(&mut rng, &cfg, 4, 4);
        let noise_ok = p.noise.data().iter().all(|n| (-0.1..=0.1).contains(n));
        ensure!(
            (0.8..=1.2).contains(&p.contrast)
                && (-0.1..=0.1).contains(&p.brightness)
                && noise_ok
                && (-20.0..=20.0).contains(&p.rotation_deg)
                && (-0.1..=0.1).contains(&p.dx)
                && (-0.1..=0.1).contains(&p.dy),
            "draw {k} out of range: contrast {}, brightness {}, rotation {}, offset ({}, {})",
            p.contrast,
            p.brightness,
            p.rotation_deg,
            p.dx,
            p.dy
        );
    }
    let gray = Tensor::filled(vec![3, 6, 6], 0.5);
    let mut worst = 0.0f64;
    for c in [0.8, 0.9, 1.0, 1.13, 1.2] {
        let params = TransformParams {
            contrast: c,
            ..TransformParams::identity(6, 6)
        };
        let out = transform_patch(&gray, &params)?;
        worst = out.data().iter().map(|v| (v - 0.5).abs()).fold(worst, f64::max);
    }
    ensure!(worst <= 1e-7, "pivot moved by {worst:e}");
    Ok(format!("10000 draws in range; pivot error {worst:.1e}"))
}

#[derive(Debug, Deserialize)]
struct SweepRow {
    value: String,
    status: String,
    steps: Option<usize>,
    layers: Option<usize>,
    attention_maps: Option<usize>,
}

fn ablation_plumbing() -> Result<String> {
    let tmp = tempfile::tempdir()?;
    let data = toy_dataset(tmp.path())?;
    let out = tmp.path().join("sweep");
    envpatch(&[
        "ablate",
        "--dataset",
        data.to_str().unwrap(),
        "--output",
        out.to_str().unwrap(),
        "--epochs",
        "3",
        "--kind",
        "steps",
        "--grid",
        "4,5,6,7,8,9",
    ])?;
    let rows = csv::Reader::from_path(out.join("sweep.csv"))?.deserialize().collect::<Result<Vec<SweepRow>, _>>()?;
    ensure!(rows.len() == 6, "{} rows", rows.len());
    let layers = RunConfig::default().model.denoiser_net.layers;
    for (k, row) in rows.iter().enumerate() {
        let steps = 4 + k;
        ensure!(row.status == "ok" && row.value == steps.to_string(), "cell {k}: {row:?}");
        ensure!(row.steps == Some(steps) && row.layers == Some(layers), "cell {k}: {row:?}");
        ensure!(row.attention_maps == Some(steps * layers), "cell {k}: {row:?}");
        ensure!(out.join(format!("cell_{k:02}/patch.png")).is_file(), "cell {k} has no patch");
    }
    ensure!(out.join("sweep.svg").is_file());
    Ok(format!("6 cells, attention maps {}", rows.iter().map(|r| r.attention_maps.unwrap().to_string()).collect::<Vec<_>>().join("/")))
}

type Criterion = fn() -> Result<String>;

fn main() {
    let criteria: [(&str, Criterion); 9] = [
        ("sampler oracle", sampler_oracle),
        ("determinism", determinism),
        ("gradient suite", gradient_suite),
        ("anchor property", anchor_property),
        ("toy attack efficacy", attack_efficacy),
        ("mAP oracle", map_oracle),
        ("ASR arithmetic", asr_arithmetic),
        ("EOT ranges", eot_ranges),
        ("ablation plumbing", ablation_plumbing),
    ];
    let mut failed = 0;
    for (k, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|p| {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                Err(anyhow::anyhow!("panicked: {msg}"))
            });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {} {name} ({secs:.1}s): {detail}", k + 1),
            Err(e) => {
                failed += 1;
                println!("FAIL {} {name} ({secs:.1}s): {e:#}", k + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
