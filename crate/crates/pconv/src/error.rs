use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] pconv_core::Error),
    /// Malformed container; `offset` is the byte position of the bad field.
    #[error("at byte {offset}: {message}")]
    Format { offset: u64, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format { offset, message: message.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Short tag printed by the CLI as `error[kind]`.
    pub fn kind(&self) -> &'static str {
        use pconv_core::Error as C;
        match self {
            Error::Core(C::Shape(_)) => "shape",
            Error::Core(C::Data(_)) => "data",
            Error::Core(C::Domain(_)) => "domain",
            Error::Core(C::UnsupportedShape { .. }) => "unsupported-shape",
            Error::Core(C::Config(_)) => "config",
            Error::Core(C::Validation(_)) => "validation",
            Error::Core(C::Fingerprint { .. }) => "fingerprint",
            Error::Core(C::Diverged(_)) => "diverged",
            Error::Format { .. } => "format",
            Error::Io { .. } => "io",
            Error::Parse(_) => "parse",
        }
    }
}

pub(crate) fn read_file(path: &std::path::Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &std::path::Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
