use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch { expected: Vec<usize>, actual: Vec<usize> },
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dataset format error: {0}")]
    Format(String),
    #[error("partitioning failed: {0}")]
    Partition(String),
    #[error("invalid crypto parameters: {0}")]
    CryptoParams(String),
    #[error("value {value} exceeds the fixed-point range of +/-{limit}")]
    Overflow { value: f64, limit: f64 },
    #[error("scale overflow: {0}")]
    ScaleOverflow(String),
    #[error("ciphertext was produced under a different key")]
    WrongKey,
    #[error("decryption failed integrity check")]
    DecryptionFailed,
    #[error("encryption mask mismatch")]
    MaskMismatch,
    #[error("mixed encryption status among aggregated models")]
    MixedEncryption,
    #[error("aggregation weights sum to {0}, expected 1")]
    WeightSum(f64),
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
