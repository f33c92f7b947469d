use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },
    #[error("invalid N:M pattern {n_keep}:{m_group}: {reason}")]
    InvalidPattern {
        n_keep: usize,
        m_group: usize,
        reason: &'static str,
    },
    #[error("pattern {n_keep}:{m_group} is not supported by the metadata codec (only 2:4)")]
    UnsupportedPattern { n_keep: usize, m_group: usize },
    #[error("group {group}: {reason}")]
    Metadata { group: usize, reason: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{pool} pool overflow: offset {offset} does not fit a 16-bit signed index")]
    Capacity { pool: &'static str, offset: usize },
    #[error("corrupt index map at block {block}: {reason}")]
    CorruptIndex { block: usize, reason: String },
    #[error(transparent)]
    Container(#[from] ContainerError),
}

/// Failures while parsing a serialized cache container. Offsets are byte
/// positions into the input buffer.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ContainerError {
    #[error("bad magic at offset 0: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 8], found: Vec<u8> },
    #[error("unsupported container version {found} at offset {offset}")]
    Version { found: u16, offset: usize },
    #[error("truncated {section} section at offset {offset}: need {needed} bytes, {available} available")]
    Truncated {
        section: &'static str,
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("invalid {field} at offset {offset}: {reason}")]
    Invalid {
        field: &'static str,
        offset: usize,
        reason: String,
    },
    #[error("{trailing} trailing bytes after the meta section at offset {offset}")]
    TrailingBytes { offset: usize, trailing: usize },
}
