use std::io;
use std::path::{Path, PathBuf};

use serde_json::json;
use thiserror::Error;
use vidguard_core::annotator::AnnotateError;
use vidguard_core::encoder::EncoderError;
use vidguard_core::engine::EngineError;
use vidguard_core::fixtures::FixtureError;
use vidguard_core::metrics::MetricsError;
use vidguard_core::pipeline::PipelineError;
use vidguard_core::policy::PolicyError;
use vidguard_core::sampler::SamplerError;

pub const ERROR_SCHEMA: &str = "vidguard.error/v1";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("could not serialize output: {0}")]
    Serialize(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Annotate(#[from] AnnotateError),
    #[error(transparent)]
    Fixture(#[from] FixtureError),
}

impl CliError {
    pub fn io(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
        move |source| CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn parse(path: &Path, message: impl ToString) -> CliError {
        CliError::Parse {
            path: path.to_path_buf(),
            message: message.to_string(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Io { .. } => "io",
            CliError::Parse { .. } => "parse",
            CliError::Invalid(_) => "invalid-argument",
            CliError::Serialize(_) => "serialize",
            CliError::Policy(_) => "policy",
            CliError::Sampler(_) => "sampler",
            CliError::Encoder(_) => "config",
            CliError::Engine(_) => "engine",
            CliError::Pipeline(_) => "pipeline",
            CliError::Metrics(_) => "metrics",
            CliError::Annotate(_) => "annotate",
            CliError::Fixture(_) => "fixture",
        }
    }

    /// One-line JSON report for stderr.
    pub fn report(&self) -> String {
        json!({
            "schema": ERROR_SCHEMA,
            "error": { "kind": self.kind(), "message": self.to_string() },
        })
        .to_string()
    }
}
