// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Everything that can go wrong while loading, running or steering a model.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes do not satisfy an operation's contract.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported format version {found} (expected {expected})")]
    UnsupportedVersion { expected: u32, found: u32 },

    /// Truncated file or checksum failure.
    #[error("corrupt {what} payload: {detail}")]
    CorruptPayload { what: &'static str, detail: String },

    /// A weight tensor is missing or disagrees with the declared config.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("sequence overflow: {needed} positions exceed max_seq {max_seq}")]
    SequenceOverflow { needed: usize, max_seq: usize },

    #[error("invalid layer {layer}: model has {n_layers} layers (valid range 0..={})", n_layers.saturating_sub(1))]
    InvalidLayer { layer: usize, n_layers: usize },

    #[error("unknown token id {0}")]
    UnknownToken(u32),

    #[error("empty prompt")]
    EmptyPrompt,

    #[error("no positions left in trace for layer {0} after applying the position policy")]
    EmptyTrace(usize),

    #[error("{file}:{line}: {message}")]
    Parse { file: String, line: usize, message: String },

    #[error("duplicate id {0:?}")]
    DuplicateId(String),

    #[error("invalid item: {0}")]
    InvalidItem(String),

    #[error("model mismatch: vector was derived from model {expected}, target model is {found}")]
    ModelMismatch { expected: String, found: String },

    #[error("steering vector is for layer {vector}, injection targets layer {requested}")]
    LayerMismatch { vector: usize, requested: usize },

    #[error("question {id:?} failed: {source}")]
    Question {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad inputs (files, flags, mismatched
    /// artifacts) rather than failures during a run.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Io(_) | Error::SequenceOverflow { .. } | Error::EmptyTrace(_) => false,
            Error::Question { source, .. } => source.is_validation(),
            _ => true,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
