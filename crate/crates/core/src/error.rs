use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("unsupported kernel shape {kh}x{kw} (pattern pruning needs 3x3 kernels)")]
    UnsupportedShape { kh: usize, kw: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("plan fingerprint {expected:#018x} does not match layer fingerprint {found:#018x}")]
    Fingerprint { expected: u64, found: u64 },
    #[error("training diverged: {0}")]
    Diverged(String),
}

/// `format!` into an error variant without importing `alloc::format` everywhere.
#[macro_export]
#[doc(hidden)]
macro_rules! err {
    ($kind:ident, $($arg:tt)*) => {
        $crate::Error::$kind(::alloc::format!($($arg)*))
    };
}
