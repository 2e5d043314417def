//! Command-line front end: one TOML config, staged artifacts under the
//! output directory, and `--section.key=value` overrides.

mod config;
mod stages;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::{
    apply_override, split_overrides, AblateConfig, IngestConfig, Paths, PipelineConfig, RunConfig, SplitConfig,
};
pub use stages::{sha256_file, FileRecord, Manifest, Runner, SplitFile, MANIFEST_VERSION};

use crate::error::{Error, Result};
use crate::eval::AblationAxis;
use crate::models::ModelKind;

#[derive(Debug, Parser)]
#[command(
    name = "aqcast",
    version,
    about = "Forecast PM2.5/PM10 on a fine grid from mobile-sensor readings",
    after_help = "Any config key can be overridden as --section.key=value, e.g. --model.hidden=32."
)]
pub struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(short, long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (same as --paths.output_dir).
    #[arg(short, long, global = true)]
    pub out: Option<PathBuf>,
    /// Do not print the evaluation table.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic readings, dense truth and static features.
    Synth,
    /// Bucket readings into frames and split cells and days.
    Ingest,
    /// Fill unobserved cells by IDW (train and eval views).
    Impute,
    /// Train and checkpoint models.
    Train {
        /// Model kinds; defaults to `model.kind`.
        #[arg(short, long, value_delimiter = ',')]
        kind: Vec<ModelKind>,
    },
    /// Evaluate checkpoints on the test and extended splits.
    Evaluate {
        /// Model kinds; defaults to `model.kind`.
        #[arg(short, long, value_delimiter = ',')]
        kind: Vec<ModelKind>,
    },
    /// Sweep one hyperparameter for `model.kind`.
    Ablate {
        /// layers, seq_len, horizon or k_neighbors; defaults to `ablate.axis`.
        #[arg(long, value_parser = parse_axis)]
        axis: Option<AblationAxis>,
        /// Grid values (days for seq_len and horizon).
        #[arg(long, value_delimiter = ',')]
        values: Vec<usize>,
    },
    /// synth (when enabled), ingest, impute, train and evaluate.
    Pipeline,
    /// Print the effective configuration as TOML.
    ShowConfig,
}

fn parse_axis(s: &str) -> std::result::Result<AblationAxis, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Parses `args` (including the program name) and runs the requested stage.
pub fn run<I: IntoIterator<Item = String>>(args: I) -> Result<()> {
    let (rest, mut overrides) = split_overrides(args);
    let cli = Cli::try_parse_from(rest).map_err(|e| match e.kind() {
        clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
            print!("{e}");
            std::process::exit(0)
        }
        _ => Error::Config(e.to_string()),
    })?;
    if let Some(o) = &cli.out {
        overrides.push(format!("--paths.output_dir={}", toml_string(&o.display().to_string())));
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    let mut runner = Runner::new(cfg);
    runner.quiet = cli.quiet;
    let kinds_or_default = |k: &[ModelKind]| {
        if k.is_empty() {
            vec![runner.cfg.model.kind]
        } else {
            k.to_vec()
        }
    };
    match &cli.command {
        Command::Synth => drop(runner.synth()?),
        Command::Ingest => drop(runner.ingest()?),
        Command::Impute => drop(runner.impute()?),
        Command::Train { kind } => drop(runner.train(&kinds_or_default(kind))?),
        Command::Evaluate { kind } => drop(runner.evaluate(&kinds_or_default(kind))?),
        Command::Ablate { axis, values } => {
            let axis = axis
                .or(runner.cfg.ablate.axis)
                .ok_or_else(|| Error::Config("ablate needs --axis or ablate.axis".into()))?;
            runner.ablate(axis, Some(values))?;
        }
        Command::Pipeline => drop(runner.pipeline()?),
        Command::ShowConfig => print!("{}", runner.cfg.to_toml()),
    }
    Ok(())
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}
