//! Code injection into saved container images.
//!
//! A changed source file is written straight into the existing layer that
//! holds it, and the layer's SHA-256 checksum is rewritten everywhere the
//! image records it. Layers stacked above it stay cached.

pub mod bench;
pub mod bundle;
#[cfg(feature = "cli")]
pub mod cli;
pub mod builder;
pub mod digest;
pub mod dockerfile;
pub mod error;
pub mod injector;
pub mod planner;
mod tarball;

pub use error::{Error, Result};
