use alloc::string::String;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Errors raised by the numerical core.
#[derive(Clone, Debug, PartialEq)]
pub enum Error {
    /// A configuration value is outside its allowed range.
    Config(String),
    /// Array or image dimensions do not agree.
    Shape(String),
    /// An input violates a mathematical precondition (e.g. negative density).
    Domain(String),
    /// A pose or image failed validation.
    Validation(String),
    /// Training produced a non-finite loss.
    Divergence { stage: &'static str, step: usize, loss: f64 },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::Domain(msg) => write!(f, "domain error: {msg}"),
            Error::Validation(msg) => write!(f, "validation error: {msg}"),
            Error::Divergence { stage, step, loss } => {
                write!(f, "{stage} training diverged at step {step} (loss = {loss})")
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(alloc::format!($($arg)*)) };
}
macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(alloc::format!($($arg)*)) };
}
pub(crate) use config_err;
pub(crate) use shape_err;
