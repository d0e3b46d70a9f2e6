use alloc::string::String;
use alloc::vec::Vec;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("zero-norm vector in {0}")]
    ZeroNorm(&'static str),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("token id {id} out of vocabulary of size {size}")]
    OutOfVocabulary { id: usize, size: usize },
    #[error("sequence of {len} tokens exceeds the limit of {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("words missing from vocabulary: {0:?}")]
    UnknownWords(Vec<String>),
    #[error("invalid attribute table: {0}")]
    AttributeTable(String),
    #[error("invalid annotation: {0}")]
    Annotation(String),
    #[error("invalid config field `{field}`: {reason}")]
    Config { field: &'static str, reason: String },
    #[error("identity {identity} outside classifier range 0..{classes}")]
    Identity { identity: usize, classes: usize },
    #[error("invalid batch: {0}")]
    Batch(String),
    #[error("generator gave up: {0}")]
    Generation(String),
    #[error("non-finite loss at step {step}: {breakdown}")]
    Divergence { step: usize, breakdown: String },
    #[error("evaluation error: {0}")]
    Evaluation(String),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}
