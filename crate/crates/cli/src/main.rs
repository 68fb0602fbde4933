//! `wafl-sim`: runs federated training experiments, sweeps and OT checks.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(#[from] wafl_core::Error),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) | CliError::Io(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "wafl-sim", version, about = "Wasserstein distributionally robust federated learning simulator")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Experiment config (TOML, or JSON when the extension is .json).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the root seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Overrides `output.dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Validate and print the resolved config without computing.
    #[arg(long, global = true)]
    pub dry_run: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one configuration; writes rounds.csv, summary.json and checkpoint.json.
    Run,
    /// Train WAFL over a γ grid; writes sweep_gamma.csv.
    SweepGamma {
        #[arg(long, value_delimiter = ',', default_value = "0.05,0.1,0.5,1,5,10")]
        gamma_grid: Vec<f64>,
        /// Also evaluate under the `[attack]` shift.
        #[arg(long)]
        with_attack: bool,
    },
    /// Compare all variants across attacked-client fractions; writes sweep_attack.csv.
    SweepAttack {
        #[arg(long, value_delimiter = ',', default_value = "0,0.2,0.4,0.6,0.8")]
        fractions: Vec<f64>,
    },
    /// λ selection from source-target transport costs and the method comparison.
    DomainAdapt,
    /// Sinkhorn against the exact solver on random uniform clouds.
    OtCheck {
        #[arg(long, value_delimiter = ',', default_value = "4,8")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 1e-3)]
        entropic_reg: f64,
    },
    /// Load and partition the configured dataset; writes partition.csv.
    Dataset,
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let g = &cli.global;
    match cli.command {
        Command::Run => commands::run(g),
        Command::SweepGamma {
            gamma_grid,
            with_attack,
        } => commands::sweep_gamma(g, &gamma_grid, with_attack),
        Command::SweepAttack { fractions } => commands::sweep_attack(g, &fractions),
        Command::DomainAdapt => commands::domain_adapt(g),
        Command::OtCheck {
            sizes,
            trials,
            entropic_reg,
        } => commands::ot_check(g, &sizes, trials, entropic_reg),
        Command::Dataset => commands::dataset(g),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("WAFL_SIM_LOG", "warn")).init();
    let cli = Cli::parse();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.global.workers.unwrap_or(0))
        .build();
    let pool = match pool {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return ExitCode::from(1);
        }
    };
    match pool.install(|| dispatch(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
