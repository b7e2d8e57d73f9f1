use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use negvae::checkpoint::Checkpoint;
use negvae::config::RunConfig;
use negvae::run::{self, ExportKind, SweepAxis};
use negvae::{Error, Result};

/// Train and evaluate VAEs with negative sampling for out-of-distribution
/// detection.
#[derive(Parser)]
#[command(name = "negvae", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Seed override (`train.seed` for training, `eval.seed` otherwise).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes checkpoint.bin, metrics.csv and resolved.cfg.
    Train(Common),
    /// Score inlier and OOD test sets; writes report.json and report.txt.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train and evaluate once per value of one configuration axis.
    Sweep {
        /// shift, latent_dim or alpha.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        /// Run every point as a separate process, concurrently.
        #[arg(long)]
        parallel: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Write sample grids, latent coordinates or reconstructions.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        /// samples, latents or reconstructions.
        #[arg(long)]
        what: String,
        /// Destination file (.pgm for images, .csv for latents).
        #[arg(long)]
        path: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train then evaluate a single configuration.
    #[command(hide = true)]
    Run(Common),
}

fn build_config(base: Option<&str>, common: &Common, seed_key: &str) -> Result<RunConfig> {
    let mut cfg = match base {
        Some(text) => RunConfig::parse(text)?,
        None => RunConfig::default(),
    };
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("--config", format!("cannot read {}: {e}", path.display())))?;
        cfg.merge_text(&text)?;
    }
    for pair in &common.set {
        cfg.set_pair(pair)?;
    }
    if let Some(seed) = common.seed {
        cfg.set(seed_key, &seed.to_string())?;
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(common) => {
            let cfg = build_config(None, &common, "train.seed")?;
            let ckpt = run::train(&cfg, &common.out)?;
            println!("trained {} epochs; artifacts in {}", ckpt.epoch, common.out.display());
        }
        Command::Run(common) => {
            let cfg = build_config(None, &common, "train.seed")?;
            let report = run::train_and_evaluate(&cfg, &common.out)?;
            print!("{}", report.table());
        }
        Command::Eval { checkpoint, common } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let cfg = build_config(Some(&ckpt.config_text), &common, "eval.seed")?;
            let report = run::evaluate(&ckpt, &cfg, &common.out)?;
            print!("{}", report.table());
        }
        Command::Sweep {
            axis,
            values,
            parallel,
            common,
        } => {
            let axis = SweepAxis::parse(&axis)
                .ok_or_else(|| Error::config("--axis", format!("`{axis}` is not one of shift, latent_dim, alpha")))?;
            let cfg = build_config(None, &common, "train.seed")?;
            let exe = if parallel {
                Some(std::env::current_exe().map_err(|e| Error::io("current executable", e))?)
            } else {
                None
            };
            let rows = run::sweep(&cfg, axis, &values, &common.out, exe.as_deref())?;
            println!("{}", run::SweepRow::CSV_HEADER);
            for row in &rows {
                println!("{}", row.csv_row());
            }
        }
        Command::Export {
            checkpoint,
            what,
            path,
            common,
        } => {
            let kind = ExportKind::parse(&what).ok_or_else(|| {
                Error::config("--what", format!("`{what}` is not one of samples, latents, reconstructions"))
            })?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let cfg = build_config(Some(&ckpt.config_text), &common, "eval.seed")?;
            run::export(&ckpt, &cfg, kind, &path)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(run::exit_code(&e) as u8)
        }
    }
}
