use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("penalty kind {0} is not defined on absolute boxes; use the encoded-offset l1 loss")]
    WrongOperandSpace(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("direction undefined: box centers coincide")]
    CoincidentCenters,
}

pub type Result<T> = std::result::Result<T, Error>;
