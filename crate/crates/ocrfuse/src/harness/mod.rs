//! Synthetic task generation, training loop, evaluation, persistence, and
//! the ablation runner.

pub mod checkpoint;
pub mod checks;
pub mod data;
pub mod synth;
pub mod train;

pub use data::Instance;
