//! Crate-wide error type and its coarse classification.

use std::io;

use thiserror::Error;

use crate::analysis::AnalysisError;
use crate::cda::CdaError;
use crate::metrics::MetricsError;
use crate::pretrain::PrepError;
use crate::scorer::ScorerError;
use crate::templates::TemplateError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Scorer(#[from] ScorerError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Cda(#[from] CdaError),
    #[error(transparent)]
    Prep(#[from] PrepError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
}

/// What went wrong, for exit codes and structured error output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad assets, flags or configuration.
    Config,
    /// The scoring backend failed or a fixture had no answer.
    Backend,
    /// The inputs were readable but unusable.
    Data,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => 2,
            ErrorKind::Backend => 3,
            ErrorKind::Data => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorKind::Config => "config",
            ErrorKind::Backend => "backend",
            ErrorKind::Data => "data",
        }
    }
}

impl Error {
    pub fn io(context: impl Into<String>, source: io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Template(_) | Error::Config(_) => ErrorKind::Config,
            Error::Scorer(e) => scorer_kind(e),
            Error::Metrics(MetricsError::Scorer(e)) => scorer_kind(e),
            Error::Prep(PrepError::InvalidPolicy(_) | PrepError::InvalidSchedule(_)) => ErrorKind::Config,
            Error::Cda(CdaError::CorpusUnreadable(_)) => ErrorKind::Config,
            Error::Metrics(_) | Error::Cda(_) | Error::Prep(_) | Error::Analysis(_) | Error::Io { .. } => {
                ErrorKind::Data
            }
        }
    }
}

fn scorer_kind(e: &ScorerError) -> ErrorKind {
    match e {
        ScorerError::InvalidQuery(_) => ErrorKind::Data,
        ScorerError::Fixture(_) => ErrorKind::Config,
        ScorerError::BackendUnreachable(_)
        | ScorerError::FixtureMiss(_)
        | ScorerError::Backend { .. }
        | ScorerError::Protocol(_) => ErrorKind::Backend,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kinds_map_to_exit_codes() {
        let backend: Error = ScorerError::BackendUnreachable("x".into()).into();
        assert_eq!(backend.kind().exit_code(), 3);
        let nested: Error = MetricsError::Scorer(ScorerError::FixtureMiss("q".into())).into();
        assert_eq!(nested.kind(), ErrorKind::Backend);
        let config: Error = TemplateError::AssetMissing("x".into()).into();
        assert_eq!(config.kind().exit_code(), 2);
        let data: Error = MetricsError::IncompleteGrid("x".into()).into();
        assert_eq!(data.kind().exit_code(), 4);
    }
}
