//! Configuration-driven front end for the lamn-core experiments.

pub mod checks;
pub mod commands;
pub mod config;

use std::path::{Path, PathBuf};

use lamn_core::{LamnError, Result};

pub use commands::Outcome;
pub use config::{Check, Command, ExperimentConfig, Overrides, Resolved, Tolerances};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_VAR: &str = "LAMN_OUTPUT_ROOT";

pub const EXIT_FAIL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Exit status for an error: 2 for configuration problems, 3 for numerical
/// failures.
pub fn exit_code(err: &LamnError) -> i32 {
    match err {
        LamnError::Singular { .. }
        | LamnError::IllConditioned { .. }
        | LamnError::NonFinite(_)
        | LamnError::NoInformation(_)
        | LamnError::FailureBudget { .. }
        | LamnError::StepLeavesBox { .. } => EXIT_NUMERIC,
        _ => EXIT_CONFIG,
    }
}

/// `--out`, then the config's `output`, then `$LAMN_OUTPUT_ROOT/<command>`.
pub fn output_dir(resolved: &Resolved) -> PathBuf {
    if let Some(p) = &resolved.config.output {
        return p.clone();
    }
    let root = std::env::var_os(OUTPUT_ROOT_VAR).map_or_else(|| PathBuf::from("lamn-out"), PathBuf::from);
    root.join(resolved.command.name())
}

pub fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::from_json(&std::fs::read_to_string(p)?),
        None => Ok(ExperimentConfig::default()),
    }
}

/// Resolves, writes `manifest.json` and runs the command. `threads` caps the
/// worker pool.
pub fn execute(
    command: Command,
    mut config: ExperimentConfig,
    overrides: &Overrides,
    threads: Option<usize>,
) -> Result<(Outcome, PathBuf)> {
    config.apply(overrides);
    let resolved = config.resolve(command)?;
    let out = output_dir(&resolved);
    std::fs::create_dir_all(&out)?;
    commands::write_text(&out.join("manifest.json"), &resolved.config.to_json())?;
    let outcome = match threads {
        Some(t) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .map_err(|e| LamnError::InvalidArgument(format!("thread pool: {e}")))?;
            pool.install(|| commands::run(&resolved, &out))?
        }
        None => commands::run(&resolved, &out)?,
    };
    Ok((outcome, out))
}

#[cfg(test)]
mod tests;
