use std::io;
use std::path::PathBuf;

use crate::align::AlignError;
use crate::config::ConfigError;
use crate::fewshot::FewShotError;
use crate::fusion::FusionError;
use crate::ingest::IngestError;
use crate::metrics::MetricsError;
use crate::prepare::PrepareError;
use crate::synth::SynthError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used by the command line tool to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Prepare(#[from] PrepareError),
    #[error(transparent)]
    FewShot(#[from] FewShotError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Io { .. } => ErrorKind::Config,
            Error::Prepare(e) if e.is_numeric() => ErrorKind::Numeric,
            Error::FewShot(FewShotError::NonFinite { .. }) => ErrorKind::Numeric,
            Error::FewShot(FewShotError::Config(_)) => ErrorKind::Config,
            Error::Synth(_) => ErrorKind::Config,
            _ => ErrorKind::Data,
        }
    }
}
