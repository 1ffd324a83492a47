//! Command-line driver: `assign`, `run`, and `sweep` plus the JSON run
//! manifest. Exit codes: 0 success, 2 usage error, 3 data/validation
//! error, 4 internal numeric failure.

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;

use crate::association::AssociationError;
use crate::checkpoint::CheckpointError;
use crate::episodes::EpisodeError;
use crate::losses::LossError;
use crate::nethead::NetError;
use crate::pipeline::PipelineError;
use crate::taxonomy::TaxonomyError;

pub mod assign;
pub mod config;
pub mod run;
pub mod sweep;

pub use assign::{cmd_assign, AssignArgs};
pub use config::{RunConfig, SimilaritySource};
pub use run::{cmd_run, StageSel};
pub use sweep::{cmd_sweep, SweepGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}

/// CLI-facing error carrying its exit code class.
#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn usage(msg: impl fmt::Display) -> CliError {
        CliError { kind: ErrorKind::Usage, message: msg.to_string() }
    }

    pub fn data(msg: impl fmt::Display) -> CliError {
        CliError { kind: ErrorKind::Data, message: msg.to_string() }
    }

    pub fn numeric(msg: impl fmt::Display) -> CliError {
        CliError { kind: ErrorKind::Numeric, message: msg.to_string() }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Usage => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numeric => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.message)
    }
}

impl std::error::Error for CliError {}

impl From<TaxonomyError> for CliError {
    fn from(e: TaxonomyError) -> Self {
        CliError::data(e)
    }
}

impl From<AssociationError> for CliError {
    fn from(e: AssociationError) -> Self {
        match e {
            AssociationError::BadPolicy(_) | AssociationError::ZeroRank => CliError::usage(e),
            other => CliError::data(other),
        }
    }
}

impl From<EpisodeError> for CliError {
    fn from(e: EpisodeError) -> Self {
        CliError::data(e)
    }
}

impl From<LossError> for CliError {
    fn from(e: LossError) -> Self {
        CliError::data(e)
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::data(e)
    }
}

impl From<NetError> for CliError {
    fn from(e: NetError) -> Self {
        CliError::numeric(e)
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::NumericFailure { .. } | PipelineError::Net(_) => CliError::numeric(e),
            other => CliError::data(other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::data(e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::data(e)
    }
}

/// Written into the run directory before any stage executes.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub seed: u64,
    pub stages: Vec<String>,
    pub outputs: BTreeMap<String, String>,
    pub config: RunConfig,
}

impl RunManifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }
}
