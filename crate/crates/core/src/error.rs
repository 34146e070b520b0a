use thiserror::Error;

/// Errors surfaced by every layer of the engine.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("sequence of length {len} exceeds max_context {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("token id {token} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },

    #[error("forward pass requires a nonempty sequence")]
    EmptySequence,

    #[error(
        "seed {seed}: tokens {a} and {b} produce identical layer-1 keys at position {position}"
    )]
    InjectivityViolation {
        seed: u64,
        position: usize,
        a: u32,
        b: u32,
    },

    #[error("session {0} is already registered")]
    DuplicateSession(u32),

    #[error("unknown session {0}")]
    UnknownSession(u32),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite residual component at index {index}")]
    NonFinite { index: usize },

    #[error("malformed record: {0}")]
    MalformedRecord(String),

    #[error("model fingerprint mismatch: container {found:#018x}, model {expected:#018x}")]
    FingerprintMismatch { expected: u64, found: u64 },

    #[error("truncated container: {0}")]
    Truncated(String),

    #[error("corrupted container: {0}")]
    Corrupted(String),

    #[error("enumeration budget exceeded: {needed} forward steps > {budget}")]
    BudgetExceeded { needed: u64, budget: u64 },

    #[error("token {token} is not recoverable from its decoded KV even at maximum depth")]
    Unrecoverable { token: u32 },

    #[error("session {session}, position {position}: {source}")]
    AtPosition {
        session: u32,
        position: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("config parse error at line {line}: {message}")]
    ConfigParse { line: usize, message: String },

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn at(self, session: u32, position: usize) -> Self {
        Error::AtPosition {
            session,
            position,
            source: Box::new(self),
        }
    }
}
