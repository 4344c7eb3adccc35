use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid tensor: shape {shape:?} does not hold {len} values")]
    InvalidTensor { shape: Vec<usize>, len: usize },
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("tape already consumed by a previous backward pass")]
    StaleTape,
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("id {id} out of vocabulary for field `{field}` (size {vocab})")]
    OutOfVocabulary {
        field: String,
        id: usize,
        vocab: usize,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid data: {0}")]
    Data(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.into(),
            right: right.into(),
        }
    }
}
