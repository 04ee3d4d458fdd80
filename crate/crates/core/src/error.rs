use std::path::PathBuf;

/// Errors produced anywhere in the inference stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: dimension mismatch, expected {expected}, found {found}")]
    DimensionMismatch {
        op: &'static str,
        expected: String,
        found: String,
    },

    #[error("{0}: non-finite value")]
    NonFinite(String),

    #[error("{0}: empty input")]
    Empty(&'static str),

    #[error("packed word {word} holds reserved code pattern 0b11 in field {field}")]
    CorruptCode { word: usize, field: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unsupported precision `{precision}` for {role}")]
    UnsupportedPrecision { precision: String, role: String },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("truncated file: {0} is incomplete")]
    Truncated(String),

    #[error("sections `{first}` and `{second}` overlap")]
    OverlappingSections { first: String, second: String },

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("duplicate tensor `{0}`")]
    DuplicateTensor(String),

    #[error("malformed section `{name}`: {reason}")]
    MalformedSection { name: String, reason: String },

    #[error("ternary section `{name}` is corrupt: {source}")]
    CorruptTernary {
        name: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed tensor file: {0}")]
    MalformedTensor(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dims(
        op: &'static str,
        expected: impl std::fmt::Display,
        found: impl std::fmt::Display,
    ) -> Self {
        Error::DimensionMismatch {
            op,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
