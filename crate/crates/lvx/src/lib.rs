//! Threaded in-process cluster, tensor files, verification suites and the
//! command-line front end for [`lvx_core`].

pub mod driver;
pub mod error;
pub mod io;
pub mod runtime;
pub mod verify;

pub use error::{Error, Result};
