use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bearing_core::bearingnet::ModelError;
use bearing_core::evalmetrics::MetricError;
use bearing_core::naver::NavError;
use bearing_core::synthcity::SynthError;
use bearing_core::trainer::TrainError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("missing {what} at {}; produce it with `{producer}`", path.display())]
    Missing { what: String, path: PathBuf, producer: String },
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Other(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Usage(_) | CliError::Other(_) => 1,
            CliError::Missing { .. } => 2,
            CliError::Numeric(_) => 3,
        })
    }

    pub fn other(e: impl std::fmt::Display) -> Self {
        CliError::Other(anyhow::anyhow!("{e}"))
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Fails with a missing-artifact error unless `path` exists.
pub fn require(path: &Path, what: &str, producer: &str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Missing { what: what.into(), path: path.to_path_buf(), producer: producer.into() })
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Config(m) => CliError::Usage(m),
            SynthError::Geo(g) => CliError::Usage(g.to_string()),
            other => CliError::other(other),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(m) => CliError::Usage(m),
            other => CliError::other(other),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite(m) => CliError::Numeric(m),
            TrainError::Config(m) => CliError::Usage(m),
            TrainError::Model(m) => m.into(),
            other => CliError::other(other),
        }
    }
}

impl From<NavError> for CliError {
    fn from(e: NavError) -> Self {
        match e {
            NavError::Config(m) | NavError::Route(m) => CliError::Usage(m),
            NavError::Model(m) => m.into(),
            NavError::Synth(s) => s.into(),
            other => CliError::other(other),
        }
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        CliError::other(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::other(e)
    }
}
