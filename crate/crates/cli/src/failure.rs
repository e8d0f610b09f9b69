use std::fmt;

/// Process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Code {
    Usage = 1,
    Io = 2,
    Transport = 3,
    Calibration = 4,
}

/// An error plus the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: Code,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn new(code: Code, error: anyhow::Error) -> Self {
        Failure { code, error }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

pub trait ResultExt<T> {
    fn with_code<F: FnOnce() -> String>(self, code: Code, context: F) -> Result<T, Failure>;
}

impl<T> ResultExt<T> for Result<T, anyhow::Error> {
    fn with_code<F: FnOnce() -> String>(self, code: Code, context: F) -> Result<T, Failure> {
        self.map_err(|e| Failure::new(code, e.context(context())))
    }
}
