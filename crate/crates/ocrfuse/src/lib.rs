//! Multimodal encoder with query-guided attention blocks, a transformer
//! fusion stage over six summary vectors plus OCR token slots, and a
//! pointer-augmented generative decoder — together with a synthetic-task
//! training harness and an encoder complexity profiler.
//!
//! Everything runs on an in-crate f64 reverse-mode autodiff engine so the
//! whole pipeline is checkable against finite differences.

pub mod attention;
pub mod cli;
pub mod complexity;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod features;
pub mod harness;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod tensor;
pub mod vocab;

pub use error::{Error, Result};

/// CLI entry point; returns the process exit code (0 success, 1 contract
/// error, 2 usage error — the latter produced by argument parsing).
pub fn run_cli() -> i32 {
    cli::run()
}
