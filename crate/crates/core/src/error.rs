use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// Errors raised by the core algorithms.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes do not conform for the named operation.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// Data length does not match the product of the shape.
    BadTensor { expected: usize, actual: usize },
    /// `backward` was called on something that is not a scalar.
    NotScalar(Vec<usize>),
    /// `backward` was called on a value with no trainable ancestors.
    Detached,
    /// Embedding dimensions disagree within a list.
    DimMismatch { expected: usize, actual: usize },
    /// A ranked list must contain at least one document.
    EmptyList,
    /// Text input with no tokens.
    EmptyText,
    /// More documents than the bridge has positional slots for.
    TooManyDocuments { k: usize, k_max: usize },
    /// Sequence longer than the language model's position table.
    SequenceTooLong { len: usize, max_len: usize },
    /// Token id outside the vocabulary.
    TokenOutOfRange { id: usize, vocab: usize },
    /// Label and prediction vectors differ in length.
    LengthMismatch { labels: usize, predictions: usize },
    /// The loss mask selects no positions.
    NoSupervisedPositions,
    /// Placeholder count and injected-row count disagree.
    PlaceholderMismatch { placeholders: usize, rows: usize },
    /// A document is missing the text needed to render a prompt.
    MissingDocumentText(usize),
    /// Invalid configuration value.
    Config(String),
    /// Invalid dataset or generator request.
    Data(String),
    /// Too many consecutive steps produced a non-finite loss.
    Diverged { consecutive: usize },
}

pub type Result<T> = core::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, left, right } => {
                write!(f, "shape mismatch in {op}: {left:?} vs {right:?}")
            }
            Error::BadTensor { expected, actual } => {
                write!(f, "tensor data has {actual} values, shape needs {expected}")
            }
            Error::NotScalar(shape) => write!(f, "backward requires a scalar, got shape {shape:?}"),
            Error::Detached => write!(f, "backward called on a value that is not connected to any trainable tensor"),
            Error::DimMismatch { expected, actual } => {
                write!(f, "embedding dimension mismatch: expected {expected}, got {actual}")
            }
            Error::EmptyList => write!(f, "k must be ≥ 1"),
            Error::EmptyText => write!(f, "text has no tokens"),
            Error::TooManyDocuments { k, k_max } => write!(
                f,
                "list has {k} documents but the bridge supports at most {k_max}; raise k_max in the config"
            ),
            Error::SequenceTooLong { len, max_len } => {
                write!(f, "sequence of {len} positions exceeds max_len {max_len}")
            }
            Error::TokenOutOfRange { id, vocab } => {
                write!(f, "token id {id} out of range for vocabulary of {vocab}")
            }
            Error::LengthMismatch { labels, predictions } => {
                write!(f, "{labels} labels but {predictions} predictions")
            }
            Error::NoSupervisedPositions => write!(f, "no supervised positions"),
            Error::PlaceholderMismatch { placeholders, rows } => {
                write!(f, "{placeholders} placeholders but {rows} retrieval embeddings")
            }
            Error::MissingDocumentText(i) => write!(f, "document {i} has no text"),
            Error::Config(msg) => write!(f, "config: {msg}"),
            Error::Data(msg) => write!(f, "data: {msg}"),
            Error::Diverged { consecutive } => {
                write!(f, "{consecutive} consecutive non-finite losses, stopping")
            }
        }
    }
}

impl core::error::Error for Error {}
