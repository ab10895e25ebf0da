use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    // bundles
    #[error("no manifest.json in {0}")]
    MissingManifest(PathBuf),
    #[error("malformed manifest: {0}")]
    BadManifest(String),
    #[error("unsupported bundle version {0} (expected 1)")]
    UnsupportedVersion(u64),
    #[error("shape mismatch for tensor `{name}`: {detail}")]
    ShapeMismatch { name: String, detail: String },
    #[error("non-contiguous layer layout: {0}")]
    NonContiguousLayout(String),
    #[error("invalid bundle: {0}")]
    InvalidBundle(String),
    #[error("no tensor named `{0}` in bundle")]
    MissingTensor(String),
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    // layout and vectors
    #[error("unknown layer `{0}`")]
    UnknownLayer(String),
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),

    // clustering
    #[error("too few points: {points} usable points for k = {k}")]
    TooFewPoints { points: usize, k: usize },
    #[error("degenerate input: every point has zero norm")]
    DegenerateInput,
    #[error("layer `{layer}` has {actual} channels, cluster model expects {expected}")]
    LayerMismatch {
        layer: String,
        expected: usize,
        actual: usize,
    },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    // attribution
    #[error("contribution mode mismatch: {0}")]
    ModeMismatch(String),
    #[error("empty batch")]
    EmptyBatch,

    // transfer
    #[error("temperature must be positive, got {0}")]
    NonPositiveTau(f64),
    #[error("unknown feature `{0}`")]
    UnknownFeature(String),

    // retrieval
    #[error("layer `{0}` has zero variance across the indexed images")]
    DegenerateLayer(String),
    #[error("normalization stats do not match layout: {0}")]
    LayoutMismatch(String),
    #[error("missing activations for image `{0}`")]
    MissingActivations(String),
    #[error("bad k = {k} for {n} indexed images")]
    BadK { k: usize, n: usize },
    #[error("unknown image id `{0}`")]
    UnknownImage(String),

    // evaluation
    #[error("missing attribute prediction for image `{0}`")]
    MissingPrediction(String),
    #[error("attribute group for `{0}` is empty")]
    EmptyGroup(String),
    #[error("bad top-n {n} for {channels} channels")]
    BadN { n: usize, channels: usize },
    #[error("malformed table: {0}")]
    BadTable(String),

    // toy generator
    #[error("infeasible region partition: {0}")]
    InfeasiblePartition(String),
    #[error("bad group spec: {0}")]
    BadGroupSpec(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::IoFailure {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(name: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            name: name.into(),
            detail: detail.into(),
        }
    }
}
