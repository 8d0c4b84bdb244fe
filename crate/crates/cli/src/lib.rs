//! Configuration parsing and experiment orchestration for the `nonlocal` binary.

pub mod config;
pub mod run;

pub use config::{parse_config, ConfigError, ConfigErrors, ExperimentName, RunConfig};
pub use run::{config_hash, load_config, run, RunOptions, RunSummary};

use nonlocal_core::Error;

/// Process exit status for each failure class.
pub fn exit_code(error: &Error) -> i32 {
    match error {
        Error::Config(_) | Error::Usage(_) => 1,
        Error::Hypothesis { .. } => 2,
        Error::Numerical(_) => 3,
        Error::Diagnostic(_) => 4,
        Error::Io(_) => 5,
        Error::Resource(_) => 6,
    }
}
