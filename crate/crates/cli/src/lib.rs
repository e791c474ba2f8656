//! Command implementations behind the `himtm` binary, exposed as a library
//! so integration tests can drive whole runs in-process.

pub mod diag;
pub mod pipeline;
