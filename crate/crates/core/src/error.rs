use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("I/O error: {0}")]
    RawIo(#[from] std::io::Error),

    #[error("vector norm {norm:e} is too small to normalize")]
    ZeroVector { norm: f64 },

    #[error("label id {0} is outside the label map")]
    UnknownLabel(u32),

    #[error("unknown label name '{0}'")]
    UnknownLabelName(String),

    #[error("expected dimension {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("row {row} is not unit-normalized (norm {norm})")]
    NotNormalized { row: usize, norm: f64 },

    #[error("bad magic bytes, expected {expected:?}")]
    BadMagic { expected: &'static str },

    #[error("payload checksum mismatch (stored {stored:#018x}, computed {computed:#018x})")]
    ChecksumMismatch { stored: u64, computed: u64 },

    #[error("format version {0} is not supported")]
    VersionUnsupported(u32),

    #[error("malformed manifest: {0}")]
    Manifest(String),

    #[error("malformed {what} at line {line}: {msg}")]
    Parse {
        what: &'static str,
        line: usize,
        msg: String,
    },

    #[error("unknown volume id '{0}'")]
    UnknownVolumeId(String),

    #[error("slice {slice} out of range for volume '{volume}'")]
    SliceOutOfRange { volume: String, slice: usize },

    #[error("index is empty")]
    EmptyIndex,

    #[error("invalid index parameters: {0}")]
    InvalidParams(String),

    #[error("hit table is empty")]
    EmptyHitTable,

    #[error("similarity matrix is empty")]
    EmptyMatrix,

    #[error("region '{region}' does not occur in volume '{volume}'")]
    RegionAbsent { volume: String, region: String },

    #[error("invalid synthetic corpus spec: {0}")]
    InvalidSpec(String),

    #[error("index does not belong to this store (store checksum {store:#018x}, index built for {index:#018x})")]
    IndexStoreMismatch { store: u64, index: u64 },

    #[error("query store is empty")]
    EmptyQueryStore,

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 3 for unknown queries, 4 for an empty query store,
    /// 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::UnknownVolumeId(_) | Error::RegionAbsent { .. } | Error::UnknownLabelName(_) => 3,
            Error::EmptyQueryStore => 4,
            _ => 2,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(Error::UnknownVolumeId("x".into()).exit_code(), 3);
        assert_eq!(Error::RegionAbsent { volume: "v".into(), region: "liver".into() }.exit_code(), 3);
        assert_eq!(Error::EmptyQueryStore.exit_code(), 4);
        assert_eq!(Error::Config("x".into()).exit_code(), 2);
        assert_eq!(Error::ChecksumMismatch { stored: 0, computed: 1 }.exit_code(), 2);
    }
}
