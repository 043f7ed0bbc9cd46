//! Command-line surface of `ear`.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{ConfigFile, PrecisionName};

#[derive(Debug, Parser)]
#[command(name = "ear", version, about = "Error-aware block-sparse attention experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded synthetic instance as a tensor file.
    Gen {
        /// Destination tensor file.
        output: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Route and attend once per seed; one JSON object per line.
    Run {
        tensor: PathBuf,
        #[command(flatten)]
        common: Common,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Evaluate policies over a density grid; CSV.
    Sweep {
        tensor: PathBuf,
        /// Comma-separated global densities, e.g. `0,0.25,1`.
        #[arg(long, value_name = "RHOS")]
        density_grid: Option<String>,
        #[command(flatten)]
        common: Common,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Check the map error bound and the executor and estimator self-checks.
    Verify {
        tensor: PathBuf,
        #[command(flatten)]
        common: Common,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Paper,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Single seed; replaces `seeds` from the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Routing policy. `sweep` takes a comma-separated list.
    #[arg(long)]
    pub policy: Option<String>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Leave wall-clock fields out of the output.
    #[arg(long)]
    pub no_timing: bool,
    /// Worker threads; all cores when unset.
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long, value_enum)]
    pub precision: Option<PrecisionFlag>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PrecisionFlag {
    Double,
    Single,
}

impl From<PrecisionFlag> for PrecisionName {
    fn from(p: PrecisionFlag) -> Self {
        match p {
            PrecisionFlag::Double => PrecisionName::Double,
            PrecisionFlag::Single => PrecisionName::Single,
        }
    }
}

impl Common {
    /// Flag overrides as a config layer. `policy` is left to the commands.
    pub fn as_layer(&self) -> ConfigFile {
        ConfigFile {
            seeds: self.seed.map(|s| vec![s]),
            precision: self.precision.map(Into::into),
            ..ConfigFile::default()
        }
    }
}
