//! Command-line front end for the portrait diffusion toolkit.
//!
//! Every subcommand takes a JSON config (`--config`) and one flag per config
//! key; flags win over the file, the file wins over defaults. The resolved
//! config is written back canonically next to the outputs.

pub mod config;
pub mod error;
pub mod extract;
pub mod harmonize;
pub mod metrics;
pub mod oracle_check;
pub mod pipeline;
pub mod sample;
pub mod util;

use clap::{Parser, Subcommand};

pub use error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "portrait",
    version,
    about = "Frequency-map controls, composable guidance and the split-and-merge portrait pipeline over an analytic mixture oracle",
    after_help = "Timesteps are 0-based indices into a 1000-step schedule: 399 is timestep 400, 699 is timestep 700.\nExit codes: 0 success, 2 validation, 3 tolerance failure, 4 I/O."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
#[allow(clippy::large_enum_variant)]
pub enum Command {
    /// Write the light map of one image and the HF-map of another.
    ExtractMaps(extract::ExtractMapsArgs),
    /// Guided sampling from a mixture oracle.
    Sample(sample::SampleArgs),
    /// Full identity / controls / shading / paste-back / harmonize run.
    Pipeline(pipeline::PipelineArgs),
    /// Partial noise-and-denoise pass over one image.
    Harmonize(harmonize::HarmonizeArgs),
    /// Identity-similarity report as JSON lines.
    Metrics(metrics::MetricsArgs),
    /// Numerical checks of the oracle and the guidance algebra.
    OracleCheck(oracle_check::OracleCheckArgs),
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::ExtractMaps(a) => extract::run(&a.resolve()?),
        Command::Sample(a) => sample::run(&a.resolve()?),
        Command::Pipeline(a) => pipeline::run(&a.resolve()?),
        Command::Harmonize(a) => harmonize::run(&a.resolve()?),
        Command::Metrics(a) => metrics::run(&a.resolve()?),
        Command::OracleCheck(a) => oracle_check::run(&a.resolve()?),
    }
}
