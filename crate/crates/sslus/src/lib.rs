//! Filesystem side of `sslus-core`. Holds the file formats and the `sslus`
//! command line.

pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod manifest;
pub mod overlay;
pub mod png;
pub mod preview;
pub mod report;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

pub use error::{Error, Result};
pub use sslus_core;
