//! Command-line experiment runner: data generation, domain-model training,
//! distillation runs, reports and the quantification study.

pub mod commands;
pub mod config;
pub mod manifest;

use ckd::CkdError;

pub use commands::{correlate, gen_data, report, run, train_teachers, Layout};
pub use config::ExperimentConfig;
pub use manifest::RunManifest;

/// Errors split by the exit code they map to.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
        }
    }
}

impl From<CkdError> for CliError {
    fn from(e: CkdError) -> Self {
        match e {
            CkdError::InvalidSpec(_) | CkdError::InvalidConfig(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

/// Caps rayon's worker count from `CKD_THREADS`, if set.
pub fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("CKD_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("CKD_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(format!("cannot size the thread pool: {e}")))
}
