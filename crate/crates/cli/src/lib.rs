//! Front end for the mvflow solvers: reads a TOML experiment config, runs one
//! experiment and writes CSV artifacts plus generated plot scripts.
pub mod commands;
pub mod config;
pub mod error;
pub mod figures;
pub mod output;
pub mod verify;

use clap::{Parser, Subcommand};
use config::ExperimentConfig;
use error::CliError;
use std::io::Write;
use std::path::PathBuf;

#[derive(Debug, Parser)]
#[command(
    name = "mvflow",
    version,
    about = "Mobility McKean-Vlasov flows: PDE, particles, transport"
)]
pub struct Cli {
    /// TOML experiment config; built-in defaults fill every missing key.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set model.family=bose --set model.gamma=3`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Output directory (same as `--set output.dir=...`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Master seed of the particle streams (same as `--set particles.seed=...`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the Fokker-Planck equation and write the density snapshots.
    FpeSolve,
    /// Free energy, relative entropy, dissipation and the identity residual.
    EnergyReport,
    /// Simulate the particle system and its energy processes.
    Particles,
    /// Transport-metric speed of the PDE curve against the square root of I.
    MetricDerivative,
    /// Weighted transport distance between the initial and target densities.
    WhDistance,
    /// Re-run one of the figure experiments.
    Reproduce {
        #[arg(value_enum)]
        figure: figures::Figure,
    },
    /// Run the invariant suite for the configured model and print a table.
    Verify,
    /// Print the effective config and its hash.
    ShowConfig,
}

impl Cli {
    pub fn load_config(&self) -> Result<ExperimentConfig, CliError> {
        let text = match &self.config {
            Some(p) => std::fs::read_to_string(p).map_err(|e| {
                CliError::Validation(format!("cannot read config {}: {e}", p.display()))
            })?,
            None => String::new(),
        };
        let mut overrides = self.overrides.clone();
        if let Some(dir) = &self.out {
            let quoted = toml::Value::String(dir.to_string_lossy().into_owned());
            overrides.push(format!("output.dir={quoted}"));
        }
        if let Some(seed) = self.seed {
            overrides.push(format!("particles.seed={seed}"));
        }
        ExperimentConfig::load(&text, &overrides)
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code: 0 success, 2 invalid input, 3 numerical failure.
pub fn main_with_args<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 {
                out.write_all(text.as_bytes())
            } else {
                err.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match run(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = cli.load_config()?;
    match &cli.command {
        Command::FpeSolve => commands::fpe_solve(&cfg, out),
        Command::EnergyReport => commands::energy_report(&cfg, out),
        Command::Particles => commands::particles(&cfg, out),
        Command::MetricDerivative => commands::metric_derivative(&cfg, out),
        Command::WhDistance => commands::wh_distance(&cfg, out),
        Command::Reproduce { figure } => figures::reproduce(&cfg, *figure, out).map(|_| ()),
        Command::Verify => verify::verify(&cfg, out).and_then(|table| {
            if table.all_pass() {
                Ok(())
            } else {
                Err(CliError::Numerical(format!(
                    "{} of {} checks failed",
                    table.failures(),
                    table.rows.len()
                )))
            }
        }),
        Command::ShowConfig => {
            write!(out, "# config_hash={}\n{}", cfg.hash(), cfg.to_toml())?;
            Ok(())
        }
    }
}
