//! Front end for `dpwate`: CSV ingestion, configuration and the
//! `analyze`, `simulate` and `balance` commands.

pub mod config;
pub mod ingest;
pub mod report;
pub mod run;

use serde::Serialize;

pub use config::{Cli, Command, Flags, RunConfig};
pub use ingest::{ingest_csv, ColumnSpec, IngestError, Rescale, Roles};
pub use run::run;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Core(#[from] dpwate::Error),
    #[error("cannot write {path}: {message}")]
    Output { path: String, message: String },
}

/// Machine-readable form of a [`CliError`], printed on failure.
#[derive(Debug, Serialize)]
pub struct ErrorReport {
    pub kind: String,
    pub message: String,
}

impl CliError {
    pub fn kind(&self) -> String {
        match self {
            Self::Config(_) => "Config".into(),
            Self::Ingest(e) => e.kind().into(),
            Self::Core(e) => {
                let debug = format!("{e:?}");
                debug.split(|c: char| !c.is_alphanumeric()).next().unwrap_or("Core").to_string()
            }
            Self::Output { .. } => "Output".into(),
        }
    }

    pub fn report(&self) -> ErrorReport {
        ErrorReport { kind: self.kind(), message: self.to_string() }
    }

    /// Process exit status: 2 for bad input or configuration, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Ingest(_) => 2,
            Self::Core(_) | Self::Output { .. } => 1,
        }
    }
}
