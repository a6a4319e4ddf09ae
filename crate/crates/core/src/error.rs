use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model spec `{name}`: {reason}")]
    InvalidModel { name: String, reason: String },

    #[error("context position {pos} outside 1..={max}")]
    ContextOutOfRange { pos: u64, max: u64 },

    #[error("batch size must be at least 1")]
    ZeroBatch,

    #[error("kernel moves zero bytes; operational intensity undefined")]
    ZeroByteKernel,

    #[error("die area {0} mm^2 must be positive")]
    NonPositiveArea(f64),

    #[error("die area {area} mm^2 exceeds the reticle limit of {limit} mm^2")]
    ReticleExceeded { area: f64, limit: f64 },

    #[error("invalid constants: {0}")]
    InvalidConstants(String),

    #[error("empty sweep: {0}")]
    EmptySweep(String),

    #[error("collective needs at least 2 nodes, got {0}")]
    TooFewNodes(u64),

    #[error("dimension {dim} is not divisible by tensor-parallel size {t}")]
    IndivisibleSplit { dim: u64, t: u64 },

    #[error("model `{model}` does not fit within {max_servers} servers of this design")]
    ModelDoesNotFit { model: String, max_servers: u64 },

    #[error("tile {tile} out of range ({n_tiles} tiles)")]
    TileOutOfRange { tile: usize, n_tiles: usize },

    #[error("malformed tile-CSR stream: {0}")]
    Format(String),

    #[error("throughput must be positive")]
    ZeroThroughput,

    #[error("break-even impossible: NRE ${nre:.0} >= baseline spend ${baseline:.0} over the horizon")]
    BreakEvenImpossible { nre: f64, baseline: f64 },

    #[error("no design point satisfies the constraints ({0})")]
    NoFeasiblePoint(String),

    #[error("no chiplet design is feasible for every model")]
    NoCommonChiplet,

    #[error("unknown figure `{0}`")]
    UnknownFigure(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable machine-readable code used in the CLI error JSON.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidModel { .. } => "INVALID_MODEL",
            Error::ContextOutOfRange { .. } => "CONTEXT_OUT_OF_RANGE",
            Error::ZeroBatch => "ZERO_BATCH",
            Error::ZeroByteKernel => "ZERO_BYTE_KERNEL",
            Error::NonPositiveArea(_) => "NON_POSITIVE_AREA",
            Error::ReticleExceeded { .. } => "RETICLE_EXCEEDED",
            Error::InvalidConstants(_) => "INVALID_CONSTANTS",
            Error::EmptySweep(_) => "EMPTY_SWEEP",
            Error::TooFewNodes(_) => "TOO_FEW_NODES",
            Error::IndivisibleSplit { .. } => "INDIVISIBLE_SPLIT",
            Error::ModelDoesNotFit { .. } => "MODEL_DOES_NOT_FIT",
            Error::TileOutOfRange { .. } => "TILE_OUT_OF_RANGE",
            Error::Format(_) => "FORMAT",
            Error::ZeroThroughput => "ZERO_THROUGHPUT",
            Error::BreakEvenImpossible { .. } => "BREAK_EVEN_IMPOSSIBLE",
            Error::NoFeasiblePoint(_) => "NO_FEASIBLE_DESIGNS",
            Error::NoCommonChiplet => "NO_COMMON_CHIPLET",
            Error::UnknownFigure(_) => "UNKNOWN_FIGURE",
            Error::Config(_) => "CONFIG",
            Error::Io { .. } => "IO",
            Error::Json { .. } => "JSON",
            Error::Csv(_) => "CSV",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
