use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Errors raised while loading or validating program images.
#[derive(Debug, Error)]
pub enum PmirError {
    #[error("{file}: cannot read: {source}")]
    Io {
        file: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{file}: parse error at line {line}, column {column}: {message}")]
    Parse {
        file: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{file}: {message}")]
    Document { file: PathBuf, message: String },
    #[error("invariant `{invariant}` violated by {entity}: {detail}")]
    Validation {
        invariant: &'static str,
        entity: String,
        detail: String,
    },
}

impl PmirError {
    pub(crate) fn invalid(
        invariant: &'static str,
        entity: impl Into<String>,
        detail: impl Into<String>,
    ) -> Self {
        PmirError::Validation {
            invariant,
            entity: entity.into(),
            detail: detail.into(),
        }
    }
}

/// Errors from the analysis stages.
#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Pmir(#[from] PmirError),
    #[error("symbol `{symbol}` requested by `{requester}` is exported by none of: {searched}")]
    UnresolvedSymbol {
        symbol: String,
        requester: String,
        searched: String,
    },
    #[error("transition point address {addr:#x} not found in `{function}`")]
    TransitionNotFound { function: String, addr: u64 },
    #[error("thread start argument at pthread_create callsite {site:#x} could not be resolved")]
    UnresolvedThreadStart { site: u64 },
    #[error("library `{name}` observed at callsite {site:#x} is not in the library corpus")]
    MissingLibrary { name: String, site: u64 },
    #[error("execve target `{path}` at callsite {site:#x} has no program image")]
    UnresolvedExecTarget { path: String, site: u64 },
    #[error("execve at callsite {site:#x} has no resolvable target program")]
    UnknownExecTarget { site: u64 },
    #[error("cannot place filter for partition {partition}: {reason}")]
    Placement { partition: u32, reason: String },
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("unknown syscall name `{0}`")]
    UnknownSyscall(String),
    #[error("{0}")]
    Bpf(#[from] crate::bpf::BpfError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}
