mod ablate;
mod digital;
mod frames;
mod plot;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use envpatch::config::{RunConfig, SEED_ENV};

/// Prompt-conditioned adversarial patches from a latent diffusion sampler.
#[derive(Debug, Parser)]
#[command(name = "envpatch", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Optimize a patch and write patch.png, metadata.json, history.csv and config.toml.
    Generate(generate::GenerateArgs),
    /// mAP@50 and confidence with no patch, a gray patch and the given patch.
    EvalDigital(digital::EvalDigitalArgs),
    /// Per-posture attack success rate from a frame file.
    EvalFrames(frames::EvalFramesArgs),
    /// Sweep one setting and run generate + eval-digital per grid cell.
    Ablate(ablate::AblateArgs),
    /// Write a synthetic dataset of gray figures on textured backgrounds.
    ToyDataset(ToyArgs),
    /// Print the default configuration as TOML.
    InitConfig {
        /// Write to a file instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

/// Flags shared by every command that reads a run configuration.
/// Precedence: config file, then the seed environment variable, then flags.
#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// TOML run configuration; defaults are used when absent.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Annotation file (JSON lines), overrides the config.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Output directory, overrides the config.
    #[arg(long, short)]
    output: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    prompt: Option<String>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        let env = std::env::var(SEED_ENV).ok();
        cfg = cfg.with_seed_override(env.as_deref())?;
        if let Some(d) = &self.dataset {
            cfg.dataset = Some(d.clone());
        }
        if let Some(o) = &self.output {
            cfg.output = o.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(e) = self.epochs {
            cfg.optimizer.epochs = e;
        }
        if let Some(p) = &self.prompt {
            cfg.prompt = p.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

mod generate {
    use super::*;

    #[derive(Debug, Args)]
    pub struct GenerateArgs {
        #[command(flatten)]
        pub config: ConfigArgs,
    }

    pub fn execute(args: &GenerateArgs) -> Result<()> {
        let cfg = args.config.resolve()?;
        let scenes = run::load_scenes(&cfg)?;
        let summary = run::generate(&cfg, &scenes, &cfg.output)?;
        println!(
            "best epoch {} total {:.6} (attack {:.6}); wrote {}",
            summary.best.epoch,
            summary.best.total,
            summary.best.l_attack,
            cfg.output.display()
        );
        Ok(())
    }
}

#[derive(Debug, Args)]
struct ToyArgs {
    #[arg(long, short)]
    output: PathBuf,
    #[arg(long, default_value_t = 8)]
    count: usize,
    /// Image side in pixels.
    #[arg(long, default_value_t = 96)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => generate::execute(&a),
        Command::EvalDigital(a) => digital::execute(&a),
        Command::EvalFrames(a) => frames::execute(&a),
        Command::Ablate(a) => ablate::execute(&a),
        Command::ToyDataset(a) => {
            let path = envpatch::dataset::write_toy_dataset(&a.output, a.count, a.size, a.seed)?;
            println!("{}", path.display());
            Ok(())
        }
        Command::InitConfig { output } => {
            let text = RunConfig::default().to_toml()?;
            match output {
                Some(p) => std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{text}"),
            }
            Ok(())
        }
    }
}

/// 1 for usage and configuration problems, 3 for numerical failure, 2 for
/// everything else (missing files, bad data, detector failures).
fn exit_code(err: &anyhow::Error) -> u8 {
    use envpatch::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Config(_) | E::UnknownStrategy { .. } => 1,
                E::Numerical(_) => 3,
                _ => 2,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn errors_map_to_documented_exit_codes() {
        let code = |e: envpatch::Error| exit_code(&anyhow::Error::from(e).context("while running"));
        assert_eq!(code(envpatch::Error::Config("bad".into())), 1);
        assert_eq!(
            code(envpatch::Error::UnknownStrategy {
                kind: "detector",
                name: "yolo".into(),
                available: "analytic".into(),
            }),
            1
        );
        assert_eq!(code(envpatch::Error::Data("bad".into())), 2);
        assert_eq!(code(envpatch::Error::Numerical("nan".into())), 3);
        assert_eq!(exit_code(&anyhow::anyhow!("plain")), 2);
    }
}
