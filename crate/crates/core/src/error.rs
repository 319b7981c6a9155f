//! Error type shared across the toolkit.

use std::path::PathBuf;

use thiserror::Error;

/// All failure modes surfaced by the library.
#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid microphone id {0}: valid ids are 2..=18")]
    InvalidMicrophone(i64),

    #[error("manifest parse error at row {row}: {message}")]
    ManifestParse { row: usize, message: String },

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("channel mismatch: microphone {mic} is not on device {device}")]
    ChannelMismatch { mic: u8, device: String },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("insufficient audio: {0}")]
    InsufficientAudio(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("channel leakage: train {train:?} and test {test:?} partially overlap")]
    Leakage { train: Vec<u8>, test: Vec<u8> },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("no data matched the selection: {0}")]
    NoData(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("wav error on {path}: {message}")]
    Wav { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
