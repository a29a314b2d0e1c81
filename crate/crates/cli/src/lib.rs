//! Pipeline commands behind the `scalemixer` binary.

pub mod ablate;
pub mod evaluate;
pub mod forecast;
pub mod pipeline;

use std::path::Path;

use scalemixer_core::config::RunConfig;
use scalemixer_core::Error;

/// Raised when a gradient check site exceeds its tolerance.
#[derive(Debug, thiserror::Error)]
#[error("{failed} of {total} gradient check sites exceed tolerance {tol:e}")]
pub struct GradcheckFailed {
    pub failed: usize,
    pub total: usize,
    pub tol: f64,
}

/// Process exit code for a command failure.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<GradcheckFailed>().is_some() {
        return 4;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Config { .. }) => 2,
        Some(Error::Pipeline(_)) => 3,
        Some(Error::Diverged { .. }) => 4,
        _ => 1,
    }
}

/// Reads a TOML run config, or the desk defaults without one.
pub fn load_config(path: Option<&Path>) -> Result<RunConfig, Error> {
    match path {
        None => {
            let run = RunConfig::default();
            run.validate()?;
            Ok(run)
        }
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::config("--config", format!("cannot read {}: {e}", p.display())))?;
            RunConfig::from_toml(&text)
        }
    }
}
