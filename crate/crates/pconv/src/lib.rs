//! File formats, benchmark harness and command-line front end for
//! [`pconv_core`].

pub mod bench;
pub mod cli;
pub mod config;
pub mod error;
pub mod format;
pub mod patterns;
pub mod plan_io;
pub mod tensor_io;
pub mod zoo;

pub use error::{Error, Result};
