//! Training, evaluation, checkpoints and inference.

mod checkpoint;
mod config;
mod eval;
mod inference;
mod schedule;
mod train;

pub use checkpoint::*;
pub use config::*;
pub use eval::*;
pub use inference::*;
pub use schedule::*;
pub use train::*;
