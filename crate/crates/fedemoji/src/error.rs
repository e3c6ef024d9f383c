//! Error type shared across the crate.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,

    #[error("population underfilled: {sentences} sentences for {clients} clients")]
    PopulationUnderfilled { sentences: usize, clients: usize },

    #[error("token out of range: id {id} >= vocabulary size {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },

    #[error("numeric overflow: non-finite value in {context}")]
    NumericOverflow { context: &'static str },

    #[error("empty effective batch: every example weight is zero")]
    EmptyEffectiveBatch,

    #[error("incompatible architectures: {0}")]
    IncompatibleArchitectures(String),

    #[error("no updates this round")]
    NoUpdates,

    #[error("population too small: {population} clients, {requested} requested")]
    PopulationTooSmall { population: usize, requested: usize },

    #[error("diverged round: non-finite values after round {round}")]
    DivergedRound { round: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("config error at line {line}: {message}")]
    ConfigParse { line: usize, message: String },

    #[error("config error: key `{key}`: {message}")]
    ConfigValue { key: String, message: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Process exit code: 1 for configuration errors, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ConfigParse { .. } | Error::ConfigValue { .. } => 1,
            _ => 2,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
