use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gpdssm::config::PipelineConfig;
use gpdssm::exec::RayonExecutor;
use gpdssm::manifest::Manifest;
use gpdssm::pipeline::{self, ModelSel};
use gpdssm::Result;

#[derive(Parser)]
#[command(name = "gpdssm", version, about = "Diffeomorphic shape models for acetabular dysplasia")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Dataset manifest (CSV). `generate` writes it.
    #[arg(long)]
    manifest: PathBuf,
    /// key = value configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Artifact directory; defaults to the manifest's directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "all")]
    model: ModelSel,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic labeled cup dataset.
    Generate(Common),
    /// Extract cups and align every mesh to a training reference.
    Preprocess(Common),
    /// Fit the GPDSSM and/or LDDMM models on training rows.
    Fit(Common),
    /// Infer latent representations of test rows.
    Infer(Common),
    /// Score test rows with the trained classifiers.
    Classify(Common),
    /// Write the evaluation report and ROC plot.
    Evaluate(Common),
    /// Write class averages, permutation heat maps and residual modes.
    Visualize(Common),
}

fn out_dir(c: &Common) -> PathBuf {
    c.out.clone().unwrap_or_else(|| c.manifest.parent().map(Path::to_path_buf).unwrap_or_default())
}

fn run(cli: Cli) -> Result<()> {
    let (Command::Generate(c)
    | Command::Preprocess(c)
    | Command::Fit(c)
    | Command::Infer(c)
    | Command::Classify(c)
    | Command::Evaluate(c)
    | Command::Visualize(c)) = &cli.command;
    let mut cfg = PipelineConfig::load(&c.config)?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    let out = out_dir(c);
    let exec = RayonExecutor::new(cfg.threads);
    if let Command::Generate(_) = cli.command {
        let m = pipeline::generate(&c.manifest, &out, &cfg)?;
        log::info!("generated {} rows", m.rows().len());
        return Ok(());
    }
    let manifest = Manifest::load(&c.manifest)?;
    match cli.command {
        Command::Generate(_) => unreachable!(),
        Command::Preprocess(_) => pipeline::preprocess(&manifest, &out, &cfg, &exec).map(drop),
        Command::Fit(_) => pipeline::fit_models(&manifest, &out, &cfg, c.model, &exec).map(drop),
        Command::Infer(_) => pipeline::infer(&manifest, &out, &cfg, c.model, &exec),
        Command::Classify(_) => pipeline::classify(&manifest, &out, &cfg, c.model, &exec),
        Command::Evaluate(_) => {
            let r = pipeline::evaluate(&manifest, &out, &cfg, c.model, &exec)?;
            for (name, sec) in &r.models {
                match sec.report() {
                    Some(m) => println!("{name}: AUC {:.3}", m.auc),
                    None => println!("{name}: absent"),
                }
            }
            Ok(())
        }
        Command::Visualize(_) => pipeline::visualize(&manifest, &out, &cfg, &exec),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
