use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    // facts / manifests
    #[error("line {line}: malformed record: {message}")]
    FactsParse { line: usize, message: String },
    #[error("line {line}: duplicate image_id {image_id:?}")]
    DuplicateImageId { line: usize, image_id: String },
    #[error("line {line}: image {image_id:?} has an empty fact list")]
    EmptyFactList { line: usize, image_id: String },
    #[error("line {line}: image {image_id:?} fact #{index} is blank")]
    BlankFact {
        line: usize,
        image_id: String,
        index: usize,
    },
    #[error("line {line}: image_id must be non-empty and free of path separators, got {image_id:?}")]
    InvalidImageId { line: usize, image_id: String },
    #[error("pair {pair_id:?} occurs {count} times, expected exactly 2")]
    PairCardinality { pair_id: String, count: usize },
    #[error("pair {pair_id:?} has two members labelled {label}")]
    PairLabelConflict { pair_id: String, label: String },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("no embedding file for image {image_id:?} (expected {path})")]
    MissingEmbedding { image_id: String, path: PathBuf },
    #[error("image id mismatch: expected {expected:?}, found {found:?}")]
    IdMismatch { expected: String, found: String },
    #[error("embedding dimension mismatch: expected {expected}, found {found} ({context})")]
    DimMismatch {
        expected: usize,
        found: usize,
        context: String,
    },
    #[error("unknown image id {0:?}")]
    UnknownImageId(String),

    // embedding blocks
    #[error("bad magic bytes: {found:?}")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated payload: need {expected} bytes, have {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("{extra} trailing bytes after payload")]
    TrailingBytes { extra: usize },
    #[error("image id is not valid UTF-8")]
    InvalidUtf8,
    #[error("fact {fact} has no unmasked token")]
    EmptyMaskRow { fact: usize },
    #[error("mask value {value} at fact {fact}, token {token} is not 0 or 1")]
    InvalidMaskValue { fact: usize, token: usize, value: u8 },
    #[error("non-finite value at fact {fact}, token {token}, component {component}")]
    NonFiniteData {
        fact: usize,
        token: usize,
        component: usize,
    },
    #[error("shape mismatch for {what}: expected {expected}, got {actual}")]
    Shape {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    // model
    #[error("epsilon must be positive and finite, got {0}")]
    InvalidEpsilon(f64),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("attention weights sum to zero")]
    ZeroWeightSum,
    #[error("attention weights must be non-negative")]
    NegativeWeight,
    #[error("non-finite gradient for {0}")]
    NonFiniteGradient(&'static str),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("params file: {0}")]
    ParamsFormat(String),

    // evaluation
    #[error("k must be at least 2, got {0}")]
    InvalidFoldCount(usize),
    #[error("k = {k} exceeds the number of fold units ({units})")]
    TooManyFolds { k: usize, units: usize },
    #[error("no predictions to score")]
    EmptyPredictions,
    #[error("pair {0:?} is missing a member")]
    IncompletePair(String),

    // analysis
    #[error("need at least 2 facts, got {0}")]
    TooFewFacts(usize),
    #[error("fact vector {0} has zero norm")]
    ZeroNorm(usize),
    #[error("invalid lexicon: {0}")]
    InvalidLexicon(String),

    // embedding service
    #[error("invalid embed request: {0}")]
    InvalidRequest(String),
    #[error("request to {url} timed out")]
    Timeout { url: String },
    #[error("transport error talking to {url}: {message}")]
    Transport { url: String, message: String },
    #[error("service returned HTTP {status}: {message}")]
    Http { status: u16, message: String },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("response payload violates block invariants: {0}")]
    InvalidPayload(#[source] Box<Error>),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
