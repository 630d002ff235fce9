use alloc::string::String;

/// Errors produced by the library.
///
/// The variants double as the exit-code classes of the command line tool:
/// shape and usage problems are input errors, numeric problems are internal.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    /// An error raised inside a named pipeline phase.
    #[error("{phase}: {source}")]
    Phase {
        phase: &'static str,
        #[source]
        source: alloc::boxed::Box<Error>,
    },
}

impl Error {
    pub(crate) fn in_phase(self, phase: &'static str) -> Self {
        Error::Phase {
            phase,
            source: alloc::boxed::Box::new(self),
        }
    }

    /// The innermost error, with any phase context stripped.
    pub fn root(&self) -> &Error {
        match self {
            Error::Phase { source, .. } => source.root(),
            other => other,
        }
    }

    /// True for errors caused by bad input rather than by the computation.
    pub fn is_input_error(&self) -> bool {
        matches!(self.root(), Error::Shape(_) | Error::Usage(_))
    }
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! usage {
    ($($arg:tt)*) => { $crate::Error::Usage(alloc::format!($($arg)*)) };
}
macro_rules! shape {
    ($($arg:tt)*) => { $crate::Error::Shape(alloc::format!($($arg)*)) };
}
macro_rules! numeric {
    ($($arg:tt)*) => { $crate::Error::Numeric(alloc::format!($($arg)*)) };
}
pub(crate) use {numeric, shape, usage};
