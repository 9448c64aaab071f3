use std::path::PathBuf;

/// Error type shared across the crate.
///
/// Shape violations inside the differentiation graph are programmer errors
/// and panic instead; `CoreError` covers data, configuration and protocol
/// errors that a caller can meaningfully handle or report.
#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    #[error("backward called before forward, or called twice on the same graph")]
    BackwardState,

    #[error("degenerate student batch: all student rows identical (mu_s = 0)")]
    DegenerateStudentBatch,

    #[error("degenerate teacher batch: all teacher rows identical (mu_t = 0)")]
    DegenerateTeacherBatch,

    #[error("{skipped} of {total} angle triples skipped (coincident points)")]
    TooManySkippedTriples { skipped: usize, total: usize },

    #[error("zero embedding: cosine similarity undefined for a zero-norm vector")]
    ZeroEmbedding,

    #[error("degenerate FDR: both score distributions have zero variance")]
    DegenerateFdr,

    #[error("score set needs at least one genuine and one impostor score")]
    EmptyScoreSet,

    #[error("insufficient items: requested {requested} {kind} pairs, only {available} available")]
    InsufficientPairs {
        kind: &'static str,
        requested: usize,
        available: usize,
    },

    #[error("degenerate keypoints: correspondences are collinear")]
    DegenerateKeypoints,

    #[error("translation ({dx},{dy}) out of range, |dx| and |dy| must be <= 3")]
    TranslationOutOfRange { dx: i64, dy: i64 },

    #[error("non-finite loss (NaN or inf) at batch {batch}")]
    NanLoss { batch: usize },

    #[error("frozen parameters changed during {stage}")]
    FrozenChanged { stage: &'static str },

    #[error("missing stage artifact: {0}")]
    MissingArtifact(String),

    #[error("model file {path}: {reason}")]
    ModelFormat { path: PathBuf, reason: String },

    #[error("embedding file {path}: {reason}")]
    EmbeddingFormat { path: PathBuf, reason: String },

    #[error("image file {path}: {reason}")]
    ImageFormat { path: PathBuf, reason: String },

    #[error("manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CoreError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
