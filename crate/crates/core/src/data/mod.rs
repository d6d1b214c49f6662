//! Dataset ingestion and synthetic scene generation.

mod coco;
mod synth;

pub use coco::*;
pub use synth::*;
