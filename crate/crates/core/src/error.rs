use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the retrieval pipeline can report.
///
/// Variant names double as the stable error names printed by the command-line
/// front end, see [`Error::name`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: bad magic, expected \"EMB1\"")]
    MagicMismatch { path: PathBuf },
    #[error("{path}: truncated file ({detail})")]
    TruncatedFile { path: PathBuf, detail: String },
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("non-finite value in row {row} ({id:?})")]
    NonFiniteValue { row: usize, id: String },
    #[error("invalid embedding set: {0}")]
    InvalidEmbeddings(String),
    #[error("{path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed {what}: {detail}")]
    Malformed {
        path: PathBuf,
        what: &'static str,
        detail: String,
    },
    #[error("row {row} ({id:?}) has zero norm")]
    ZeroVector { row: usize, id: String },
    #[error("scale {label:?} is not aligned with the first scale: {detail}")]
    MisalignedScales { label: String, detail: String },
    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("row {row} ({id:?}) is not unit length (norm {norm})")]
    NotNormalized { row: usize, id: String, norm: f64 },
    #[error("gallery id {0:?} has no parent in the crop map")]
    UnmappedCropId(String),
    #[error("invalid crop map: {0}")]
    InvalidCropMap(String),
    #[error("re-ranking needs more than k1={k1} items, got {n}")]
    TooFewItems { n: usize, k1: usize },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("shard {shard} is corrupt: {reason}")]
    CorruptShard { shard: usize, reason: String },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("id mismatch: {0}")]
    IdMismatch(String),
    #[error("model {model:?} submitted more than one list for query {query:?}")]
    DuplicateBallot { model: String, query: String },
    #[error("pool holds {pool} ids but {needed} singleton classes are required")]
    PoolTooSmall { pool: usize, needed: usize },
    #[error("target of {target} classes is below the {clusters} kept clusters")]
    TargetBelowClusterCount { target: usize, clusters: usize },
    #[error("query {query:?} ranks unknown gallery id {gallery:?}")]
    UnknownGalleryId { query: String, gallery: String },
    #[error("{} shard(s) missing: {shards:?}", shards.len())]
    ShardsMissing { shards: Vec<usize> },
    #[error("invalid manifest: {0}")]
    ManifestInvalid(String),
    #[error("worker failure injected for shard {0}")]
    InjectedFailure(usize),
}

impl Error {
    pub fn name(&self) -> &'static str {
        match self {
            Error::MagicMismatch { .. } => "MagicMismatch",
            Error::TruncatedFile { .. } => "TruncatedFile",
            Error::DuplicateId(_) => "DuplicateId",
            Error::NonFiniteValue { .. } => "NonFiniteValue",
            Error::InvalidEmbeddings(_) => "InvalidEmbeddings",
            Error::IoFailure { .. } => "IoFailure",
            Error::Malformed { .. } => "Malformed",
            Error::ZeroVector { .. } => "ZeroVector",
            Error::MisalignedScales { .. } => "MisalignedScales",
            Error::DimMismatch { .. } => "DimMismatch",
            Error::NotNormalized { .. } => "NotNormalized",
            Error::UnmappedCropId(_) => "UnmappedCropId",
            Error::InvalidCropMap(_) => "InvalidCropMap",
            Error::TooFewItems { .. } => "TooFewItems",
            Error::InvalidParams(_) => "InvalidParams",
            Error::CorruptShard { .. } => "CorruptShard",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::IdMismatch(_) => "IdMismatch",
            Error::DuplicateBallot { .. } => "DuplicateBallot",
            Error::PoolTooSmall { .. } => "PoolTooSmall",
            Error::TargetBelowClusterCount { .. } => "TargetBelowClusterCount",
            Error::UnknownGalleryId { .. } => "UnknownGalleryId",
            Error::ShardsMissing { .. } => "ShardsMissing",
            Error::ManifestInvalid(_) => "ManifestInvalid",
            Error::InjectedFailure(_) => "InjectedFailure",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::IoFailure {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(
        path: impl Into<PathBuf>,
        what: &'static str,
        detail: impl ToString,
    ) -> Self {
        Error::Malformed {
            path: path.into(),
            what,
            detail: detail.to_string(),
        }
    }
}
