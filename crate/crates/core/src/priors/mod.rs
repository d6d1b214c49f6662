//! Semantic and visual priors: provider clients, a seeded mock, and the
//! checksummed on-disk cache consumed by training.

mod cache;
mod generate;
pub mod provider;

pub use cache::*;
pub use generate::*;
