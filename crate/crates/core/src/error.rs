use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Operand shapes are incompatible for the named operation.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A caller-supplied value is out of range.
    #[error("invalid argument: {0}")]
    Argument(String),
    /// A structural precondition was violated (wrong layout, non-scalar loss, ...).
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

macro_rules! argument {
    ($($t:tt)*) => { $crate::error::Error::Argument(alloc::format!($($t)*)) };
}
macro_rules! contract {
    ($($t:tt)*) => { $crate::error::Error::Contract(alloc::format!($($t)*)) };
}
macro_rules! config_err {
    ($($t:tt)*) => { $crate::error::Error::Config(alloc::format!($($t)*)) };
}
pub(crate) use {argument, config_err, contract};
