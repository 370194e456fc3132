//! Command-line surface shared by the binary and tests.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::verify::{run_suite, Suite};
use crate::{simulate, with_workers, CliError};

#[derive(Debug, Parser)]
#[command(name = "boltzmix", version, about = "Multi-species Boltzmann mixture experiments")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, global = true, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in preset: two_species_relax or large_amplitude.
    #[arg(long, global = true)]
    pub preset: Option<String>,
    /// Output directory; overrides run.output.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads; overrides run.workers.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Random seed; overrides run.seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Write SVG line plots next to the CSV.
    #[arg(long, global = true)]
    pub plots: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a property suite and write a plain-text report.
    Verify {
        /// identities, conservation, spectral, entropy or carleman
        suite: String,
    },
    /// Run the configured scenario and write diagnostics.csv.
    Simulate,
    /// One run per value of a dotted config path; writes sweep.csv.
    Sweep {
        /// Dotted config path, e.g. kernel.gamma, grid.points or mass_ratio.
        parameter: String,
        /// Values, separated by commas or spaces.
        #[arg(required = true, value_delimiter = ',', num_args = 1..)]
        values: Vec<f64>,
    },
}

impl Common {
    pub fn load(&self) -> Result<RunConfig, CliError> {
        let mut config = match (&self.config, &self.preset) {
            (Some(path), _) => RunConfig::load(path)?,
            (None, Some(name)) => RunConfig::preset(name)?,
            (None, None) => RunConfig::default(),
        };
        if let Some(out) = &self.out {
            config.run.output = out.clone();
        }
        if let Some(w) = self.workers {
            config.run.workers = w;
        }
        if let Some(s) = self.seed {
            config.run.seed = s;
        }
        config.resolve()?;
        Ok(config)
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|source| CliError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    std::fs::write(path, text).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Executes one command; `Ok(false)` means a suite ran and reported a violation.
pub fn execute(cli: &Cli) -> Result<bool, CliError> {
    let config = cli.common.load()?;
    let out = config.run.output.clone();
    match &cli.command {
        Command::Verify { suite } => {
            let suite = Suite::parse(suite)?;
            let report = with_workers(config.run.workers, || run_suite(suite, &config))??;
            let text = report.render();
            let path = out.join(format!("verify_{}.txt", suite.name()));
            write_text(&path, &text)?;
            print!("{text}");
            println!("report {}", path.display());
            Ok(report.passed())
        }
        Command::Simulate => {
            let result = with_workers(config.run.workers, || simulate::simulate(&config, &out, cli.common.plots))??;
            println!(
                "{} records, final rel_entropy {:e}, csv {}",
                result.records.len(),
                result.final_rel_entropy(),
                out.join("diagnostics.csv").display()
            );
            Ok(true)
        }
        Command::Sweep { parameter, values } => {
            let rows = with_workers(config.run.workers, || simulate::sweep(&config, parameter, values, &out, cli.common.plots))??;
            println!("{} runs, csv {}", rows.len(), out.join("sweep.csv").display());
            Ok(true)
        }
    }
}
