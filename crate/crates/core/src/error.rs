use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    // bundle
    #[error("archive has no manifest.json")]
    MissingManifest,
    #[error("malformed JSON in {path}: {reason}")]
    MalformedJson { path: String, reason: String },
    #[error("manifest points at missing layer payload {0}")]
    DanglingLayerPointer(String),
    #[error("layer {0} has a missing or unsupported VERSION marker")]
    BadVersionMarker(String),
    #[error("image config is inconsistent: {0}")]
    InconsistentConfig(String),
    #[error("{0} is not a directory")]
    NotADirectory(PathBuf),
    #[error("layer {0} payload is not a readable tar archive")]
    CorruptPayload(String),
    #[error("layer index {index} out of range (image has {count} layers)")]
    LayerIndexOutOfRange { index: usize, count: usize },
    #[error("invalid digest {0:?}")]
    InvalidDigest(String),
    #[error("invalid path {0:?}")]
    InvalidPath(String),
    #[error("I/O failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    // dockerfile
    #[error("line {0}: no instruction keyword")]
    UnparsableLine(usize),
    #[error("multi-stage builds are not supported (second FROM at line {0})")]
    MultiStage(usize),
    #[error("line {line}: {reason}")]
    UnsupportedSyntax { line: usize, reason: String },
    #[error("alignment mismatch: {0}")]
    AlignmentMismatch(String),

    // planner
    #[error("{0} requires build-context file trees")]
    MissingContext(String),
    #[error("changes in more than one ADD/COPY layer (instructions {0:?}); multi-layer injection is not supported")]
    MultiContentChange(Vec<usize>),
    #[error("instruction {0} is not invalidated")]
    NotInvalidated(usize),
    #[error("instruction {index} ({keyword}) changed, but it is neither a content nor a configuration change")]
    OperationChange { index: usize, keyword: String },

    // injector
    #[error("path {0} not found in layer")]
    PathNotFound(String),
    #[error("path {0} already exists in layer")]
    PathExists(String),
    #[error("unknown layer {0}")]
    UnknownLayer(String),
    #[error("invalid plan: {0}")]
    InvalidPlan(String),

    // digest
    #[error("digest {0} not found in any image document")]
    RewriteMiss(String),

    // bench
    #[error("sample counts differ: {full} full-rebuild vs {inject} inject")]
    MethodCountMismatch { full: usize, inject: usize },
    #[error("degenerate sample: {0}")]
    DegenerateSample(String),
    #[error("no scenario results to report")]
    EmptyReport,
    #[error("unknown scenario {0:?}")]
    UnknownScenario(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::IoFailure {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<String>, err: serde_json::Error) -> Self {
        Error::MalformedJson {
            path: path.into(),
            reason: err.to_string(),
        }
    }
}
