use thiserror::Error;

/// Errors from the tensor engine and model construction.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward on an empty tape")]
    EmptyTape,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("NaN gradient in parameter '{name}' at element {index}")]
    NanGradient { name: String, index: usize },
}

/// Errors from image decoding, operators, and corruption specs.
#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image {height}x{width} is smaller than the {support}x{support} kernel support")]
    TooSmall {
        height: usize,
        width: usize,
        support: usize,
    },
    #[error("expected {expected}-channel image, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("corruption level {level} outside supported range 0..=5")]
    BadLevel { level: u32 },
    #[error("mean_spectrum over an empty image list")]
    EmptyImageList,
    #[error("images of mixed sizes: {0}x{1} vs {2}x{3}")]
    MixedSizes(usize, usize, usize, usize),
    #[error("{path}: {reason}")]
    Decode { path: String, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Errors from manifests, corpus generation, and splits.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("manifest line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("manifest validation failed:\n{}", .0.join("\n"))]
    Invalid(Vec<String>),
    #[error("split ratios {0:?} do not sum to 1")]
    BadRatios(Vec<f64>),
    #[error("{found} identities cannot fill {want} non-empty splits")]
    TooFewIdentities { found: usize, want: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Errors from configuration parsing.
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key '{0}'")]
    UnknownKey(String),
    #[error("config key '{key}': cannot parse '{value}': {reason}")]
    BadValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("config line {line}: expected 'key = value'")]
    BadLine { line: usize },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Errors from metric computation and protocol runs.
#[derive(Debug, Error)]
pub enum EvalError {
    #[error("AUC undefined: all {0} examples share one class")]
    SingleClass(usize),
    #[error("metrics over an empty prediction set")]
    Empty,
    #[error("prediction {pred} out of range for {classes} classes")]
    PredOutOfRange { pred: usize, classes: usize },
    #[error("non-finite score at index {0}")]
    NonFiniteScore(usize),
}

/// Top-level error for training and protocol drivers.
#[derive(Debug, Error)]
pub enum CaelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },
}

impl CaelError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        CaelError::Io {
            path: path.into(),
            source,
        }
    }
}
