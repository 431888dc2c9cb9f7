use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: expected a scalar, got shape {shape:?}")]
    NotScalar { op: &'static str, shape: Vec<usize> },

    #[error("{op}: node id {id} is not part of this graph")]
    InvalidNode { op: &'static str, id: usize },

    #[error("{op}: image must be at least {min}x{min}, got {h}x{w}")]
    ImageTooSmall {
        op: &'static str,
        min: usize,
        h: usize,
        w: usize,
    },

    #[error("tensor: shape {shape:?} does not hold {len} values")]
    ShapeLenMismatch { shape: Vec<usize>, len: usize },

    #[error("{op}: invalid argument: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("{op}: empty input")]
    EmptyInput { op: &'static str },

    #[error("{op}: non-finite value encountered: {msg}")]
    NonFinite { op: &'static str, msg: String },

    #[error("attack: non-finite gradient at iteration {iteration}")]
    NonFiniteGradient { iteration: usize },

    #[error("repair: input already classified as label {label}")]
    AlreadyCorrect { label: usize },

    #[error("glm: degenerate targets: {msg}")]
    DegenerateTargets { msg: String },

    #[error("attribution: diameter not resolved for attribute '{attribute}'")]
    UnresolvedDiameter { attribute: String },

    #[error(
        "attribution: predictions over the background are constant for '{attribute}'; \
         use a larger or more varied background dataset"
    )]
    ZeroDiameter { attribute: String },

    #[error("attribution: duplicate attribute name '{attribute}'")]
    DuplicateAttribute { attribute: String },

    #[error("logit: argument {value} outside the open interval (0, 1)")]
    LogitDomain { value: f64 },

    #[error("direction: beta has zero norm")]
    ZeroNormDirection,

    #[error("direction: prediction saturated at {value}; refusing to take its logit")]
    SaturatedPrediction { value: f64 },

    #[error("{path}: bad IDX magic: expected {expected:#010x}, found {found:#010x}")]
    IdxMagic {
        path: String,
        expected: u32,
        found: u32,
    },

    #[error("{path}: truncated IDX file: expected {expected} bytes, found {actual}")]
    IdxTruncated {
        path: String,
        expected: usize,
        actual: usize,
    },

    #[error("IDX image/label count mismatch: {images} images vs {labels} labels")]
    IdxCountMismatch { images: usize, labels: usize },

    #[error("dataset: label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("dataset: pixel {value} outside [0, 1]")]
    PixelOutOfRange { value: f64 },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
