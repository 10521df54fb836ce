//! Command-line front end: synthesize fields, train, evaluate, and run
//! ablation sweeps over the reconstruction pipeline.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use uqshred::cli::{cmd_ablate, cmd_eval, cmd_synth, cmd_train, RunConfig};

#[derive(Parser)]
#[command(
    name = "uqshred",
    about = "Distributional sparse-sensor field reconstruction with Monte Carlo uncertainty",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonOpts {
    /// key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Global seed (overrides the config key).
    #[arg(long)]
    seed: Option<u64>,

    /// Output directory (overrides the config key).
    #[arg(long)]
    out: Option<PathBuf>,

    /// Field file to read (overrides the config key).
    #[arg(long)]
    data: Option<PathBuf>,

    /// Checkpoint to evaluate (overrides the config key).
    #[arg(long)]
    checkpoint: Option<PathBuf>,

    /// Additional key=value overrides, last one wins.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic field and write it to the output directory.
    Synth(CommonOpts),
    /// Train a model on a field file.
    Train(CommonOpts),
    /// Evaluate a checkpoint on the test split.
    Eval(CommonOpts),
    /// Sweep one axis (lag, sensors, noise_dim, mc_samples, epochs).
    Ablate(AblateOpts),
}

#[derive(Args)]
struct AblateOpts {
    #[command(flatten)]
    common: CommonOpts,

    /// Axis to sweep.
    #[arg(long)]
    axis: String,

    /// Comma-separated grid of axis values.
    #[arg(long)]
    grid: String,
}

fn resolve_config(opts: &CommonOpts) -> Result<RunConfig> {
    let mut config = match &opts.config {
        Some(path) => RunConfig::from_file(path)
            .with_context(|| format!("reading config {}", path.display()))?,
        None => RunConfig::new(),
    };
    for pair in &opts.set {
        let (key, value) = pair
            .split_once('=')
            .with_context(|| format!("--set {pair:?} is not key=value"))?;
        config.set(key.trim(), value.trim())?;
    }
    if let Some(seed) = opts.seed {
        config.set("seed", &seed.to_string())?;
    }
    if let Some(out) = &opts.out {
        config.set("out", &out.display().to_string())?;
    }
    if let Some(data) = &opts.data {
        config.set("data", &data.display().to_string())?;
    }
    if let Some(checkpoint) = &opts.checkpoint {
        config.set("checkpoint", &checkpoint.display().to_string())?;
    }
    Ok(config)
}

fn print_warnings(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Synth(opts) => {
            let config = resolve_config(&opts)?;
            let out = cmd_synth(&config)?;
            println!(
                "wrote {} ({}x{} field)",
                out.field_path.display(),
                out.t_len,
                out.m
            );
        }
        Command::Train(opts) => {
            let config = resolve_config(&opts)?;
            let out = cmd_train(&config)?;
            print_warnings(&out.warnings);
            let last = out.history.train_loss.last().copied().unwrap_or(f64::NAN);
            println!(
                "trained {} epochs (final train loss {last:.6}); checkpoint {}",
                out.history.epochs_run(),
                out.checkpoint_path.display()
            );
            if let Some(best) = out.history.best_epoch {
                println!("best validation epoch: {best}");
            }
        }
        Command::Eval(opts) => {
            let config = resolve_config(&opts)?;
            let out = cmd_eval(&config)?;
            print_warnings(&out.warnings);
            println!(
                "evaluated {} windows x {} cells: rmse {:.6}, crps {:.6}",
                out.report.windows,
                out.report.cells / out.report.windows,
                out.report.rmse,
                out.report.crps
            );
            for stat in &out.report.coverage {
                println!("  coverage {:>5.1}%: {:.3}", stat.level * 100.0, stat.value);
            }
            println!("report: {}", out.report_path.display());
        }
        Command::Ablate(opts) => {
            let config = resolve_config(&opts.common)?;
            let grid: Vec<usize> = opts
                .grid
                .split(',')
                .map(|s| s.trim().parse().with_context(|| format!("bad grid value {s:?}")))
                .collect::<Result<_>>()?;
            if grid.is_empty() {
                bail!("--grid must list at least one value");
            }
            let out = cmd_ablate(&opts.axis, &grid, &config)?;
            print_warnings(&out.warnings);
            println!(
                "swept {} over {} points; sweep CSV {}",
                opts.axis,
                out.rows.len(),
                out.sweep_path.display()
            );
        }
    }
    Ok(())
}
