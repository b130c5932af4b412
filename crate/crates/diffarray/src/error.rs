use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ArrayError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {detail}")]
    Numeric { op: &'static str, detail: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite gradient in parameter `{name}`")]
    NonFiniteGrad { name: String },
    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
}

pub type Result<T, E = ArrayError> = std::result::Result<T, E>;
