use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lamn_cli::{exit_code, execute, load_config, Command, Overrides, EXIT_FAIL};

#[derive(Parser)]
#[command(name = "lamn", version, about = "LAMN verification experiments for degenerate diffusions")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Simulate one path and its observations.
    Simulate(Common),
    /// Build a block covariance and run identity checks.
    Psi(Common),
    /// Information matrices along one path.
    Info(Common),
    /// Monte Carlo check of the likelihood-ratio expansion.
    LamnCheck(Common),
    /// Score variances of the joint, diffusive and integrated schemes.
    FactorTwo(Common),
    /// Quasi-maximum-likelihood estimate.
    Estimate(Common),
    /// Repeated estimation against the efficiency bound.
    Study(Common),
}

#[derive(Args)]
struct Common {
    /// JSON experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    /// Number of Monte Carlo paths.
    #[arg(long = "paths", short = 'M')]
    paths: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    substeps: Option<usize>,
    #[arg(long = "e-n")]
    e_n: Option<usize>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    h: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    theta0: Option<Vec<f64>>,
    #[arg(long = "L")]
    big_l: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker thread cap.
    #[arg(long)]
    threads: Option<usize>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (command, c) = match cli.command {
        Sub::Simulate(c) => (Command::Simulate, c),
        Sub::Psi(c) => (Command::Psi, c),
        Sub::Info(c) => (Command::Info, c),
        Sub::LamnCheck(c) => (Command::LamnCheck, c),
        Sub::FactorTwo(c) => (Command::FactorTwo, c),
        Sub::Estimate(c) => (Command::Estimate, c),
        Sub::Study(c) => (Command::Study, c),
    };
    let overrides = Overrides {
        model: c.model,
        n: c.n,
        paths: c.paths,
        seed: c.seed,
        substeps: c.substeps,
        e_n: c.e_n,
        h: c.h,
        theta0: c.theta0,
        big_l: c.big_l,
        output: c.out,
    };
    let result = load_config(c.config.as_deref()).and_then(|cfg| execute(command, cfg, &overrides, c.threads));
    match result {
        Ok((outcome, dir)) => {
            for line in &outcome.lines {
                println!("{line}");
            }
            println!("artifacts: {}", dir.display());
            if outcome.pass() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_FAIL as u8)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
