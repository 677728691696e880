use std::io;

#[derive(thiserror::Error, Debug)]
pub enum Error {
    #[error("invalid shape {rows}x{cols}: both dimensions must be at least 1")]
    EmptyShape { rows: usize, cols: usize },
    #[error("data length {actual} does not match shape {rows}x{cols}")]
    DataLength {
        rows: usize,
        cols: usize,
        actual: usize,
    },
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("timestep {t} out of range (T = {timesteps})")]
    TimestepOutOfRange { t: usize, timesteps: usize },
    #[error("value {0} outside the int4 range [-7, 7]")]
    Int4Range(i8),
    #[error("alpha {0} outside [0, 1]")]
    AlphaOutOfRange(f32),
    #[error("rank {rank} outside [1, {max}]")]
    RankOutOfRange { rank: usize, max: usize },
    #[error("calibration statistics contain no samples")]
    EmptyStats,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("payload length mismatch: expected {expected} bytes, found {actual}")]
    PayloadLength { expected: u64, actual: u64 },
    #[error("format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures that originate from reading or decoding artifacts.
    pub fn is_io_or_format(&self) -> bool {
        matches!(
            self,
            Error::BadMagic(_)
                | Error::UnsupportedVersion(_)
                | Error::UnknownDtype(_)
                | Error::PayloadLength { .. }
                | Error::Format(_)
                | Error::Io(_)
                | Error::Json(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
