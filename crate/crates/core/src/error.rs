use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("input error: {0}")]
    Input(String),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    Shape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("degenerate value range: vmin {vmin} >= vmax {vmax}")]
    DegenerateRange { vmin: f64, vmax: f64 },

    #[error("no surface at isovalue {0}")]
    EmptySurface(f64),

    #[error("region does not intersect the volume")]
    EmptyRegion,

    #[error("block error: {0}")]
    Block(String),

    #[error("symbol {symbol} outside alphabet at position {position}")]
    SymbolOutOfRange { symbol: i32, position: usize },

    #[error("invalid probability model: {0}")]
    Model(String),

    #[error("bitstream error in block {block}: {reason}")]
    Bitstream { block: usize, reason: String },

    #[error("model hash mismatch: file {file}, model {model}")]
    HashMismatch { file: String, model: String },

    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },

    #[error("unknown cluster node {0}")]
    UnknownNode(u32),

    #[error("analysis error: {0}")]
    Analysis(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io(_) => "io",
            Error::Input(_) => "input",
            Error::Shape { .. } => "shape",
            Error::DegenerateRange { .. } => "degenerate_range",
            Error::EmptySurface(_) => "empty_surface",
            Error::EmptyRegion => "empty_region",
            Error::Block(_) => "block",
            Error::SymbolOutOfRange { .. } => "symbol_out_of_range",
            Error::Model(_) => "model",
            Error::Bitstream { .. } => "bitstream",
            Error::HashMismatch { .. } => "hash_mismatch",
            Error::Diverged { .. } => "diverged",
            Error::UnknownNode(_) => "unknown_node",
            Error::Analysis(_) => "analysis",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Serde(_) => "serde",
        }
    }

    pub(crate) fn shape(expected: &[usize], actual: &[usize]) -> Self {
        Error::Shape {
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }
}
