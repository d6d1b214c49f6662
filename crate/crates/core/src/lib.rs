pub mod aggregator;
pub mod blob;
pub mod data;
pub mod engine;
pub mod error;
pub mod geometry;
pub mod instrument;
pub mod losses;
pub mod matching;
pub mod model;
pub mod nn;
pub mod params;
pub mod priors;

pub use error::{KadError, Result};
