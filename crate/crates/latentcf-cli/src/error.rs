use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad invocation or configuration; maps to exit code 1.
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Lib(#[from] latentcf::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("checkpoint {path}: unsupported header '{found}', expected '{expected}'")]
    CkptVersion {
        path: String,
        found: String,
        expected: String,
    },

    #[error("checkpoint {path}: checksum mismatch: header {expected:08X}, payload {actual:08X}")]
    CkptChecksum {
        path: String,
        expected: u32,
        actual: u32,
    },

    #[error("checkpoint {path}: truncated payload: expected {expected} bytes, found {actual}")]
    CkptTruncated {
        path: String,
        expected: usize,
        actual: usize,
    },

    #[error("checkpoint {path}: malformed: {msg}")]
    CkptFormat { path: String, msg: String },

    #[error("pgm: {0}")]
    Pgm(String),

    #[error("{path}: malformed CSV: {msg}")]
    Csv { path: String, msg: String },
}

impl CliError {
    /// Process exit code: 1 for usage/config problems, 2 for runtime errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
