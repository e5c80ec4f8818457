use clap::{Parser, Subcommand};
use copiv_cli::commands;
use copiv_cli::config::{self, CoverageFileConfig, RunConfig, SimulateConfig};
use copiv_cli::CliError;
use std::path::PathBuf;
use std::process::ExitCode;

/// Copula-invariance IV estimation of potential-outcome distributions.
#[derive(Parser)]
#[command(name = "copiv", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Input CSV (estimate, check).
    #[arg(long, global = true)]
    input: Option<PathBuf>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Cap on worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Bootstrap replicates.
    #[arg(long = "bootstrap", global = true, value_name = "B")]
    bootstrap: Option<usize>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Fit, compute functionals and bootstrap bands.
    Estimate,
    /// Draw a sample from a law and write the population truth.
    Simulate,
    /// Monte Carlo coverage of bootstrap bands.
    Coverage,
    /// Relevance and ordered-choice diagnostics only.
    Check,
}

fn reject(flag: &str, cmd: &str) -> CliError {
    CliError::Config(format!("--{flag} does not apply to `{cmd}`"))
}

fn run(cli: &Cli) -> Result<String, CliError> {
    if let Some(t) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Config(format!("cannot set thread count: {e}")))?;
    }
    let cfg_path = cli.config.as_deref();
    match cli.command {
        Command::Estimate | Command::Check => {
            let mut cfg: RunConfig = config::load(cfg_path)?;
            if cli.input.is_some() {
                cfg.input = cli.input.clone();
            }
            if cli.output_dir.is_some() {
                cfg.output_dir = cli.output_dir.clone();
            }
            if let Some(s) = cli.seed {
                cfg.bootstrap.seed = s;
            }
            if let Some(b) = cli.bootstrap {
                cfg.bootstrap.b = b;
            }
            if let Some(a) = cli.alpha {
                cfg.bootstrap.alpha = a;
            }
            if matches!(cli.command, Command::Check) {
                let out = commands::run_check(&cfg)?;
                for w in &out.warnings {
                    eprintln!("warning: {w}");
                }
                if !out.check.passed {
                    return Err(CliError::Core(copiv_core::Error::Assumption(out.check.failures.join("; "))));
                }
                return Ok(format!("assumption checks passed (n = {})", out.n));
            }
            let out = commands::run_estimate(&cfg)?;
            Ok(format!("wrote {} functionals and {} bands to {}", out.items.len(), out.bands.len(), out.dir.display()))
        }
        Command::Simulate => {
            for (set, flag) in [(cli.input.is_some(), "input"), (cli.bootstrap.is_some(), "bootstrap"), (cli.alpha.is_some(), "alpha")] {
                if set {
                    return Err(reject(flag, "simulate"));
                }
            }
            let mut cfg: SimulateConfig = config::load(cfg_path)?;
            if cli.output_dir.is_some() {
                cfg.output_dir = cli.output_dir.clone();
            }
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let out = commands::run_simulate(&cfg)?;
            Ok(format!("wrote {} observations to {}", out.data.n(), out.dir.display()))
        }
        Command::Coverage => {
            if cli.input.is_some() {
                return Err(reject("input", "coverage"));
            }
            let mut cfg: CoverageFileConfig = config::load(cfg_path)?;
            if cli.output_dir.is_some() {
                cfg.output_dir = cli.output_dir.clone();
            }
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            if let Some(b) = cli.bootstrap {
                cfg.bootstrap.b = b;
            }
            if let Some(a) = cli.alpha {
                cfg.bootstrap.alpha = a;
            }
            let out = commands::run_coverage(&cfg)?;
            let r = &out.report;
            Ok(format!(
                "{} of {} replications: mean pointwise coverage {:.3} (MC se {:.3}), uniform {:.3} (MC se {:.3})",
                r.completed, r.config.reps, r.mean_pointwise, r.mc_se_pointwise, r.uniform, r.mc_se_uniform
            ))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
