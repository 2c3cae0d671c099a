//! Consistency-aware attention recommender for continuing user-generated item lists.

pub mod checkpoint;
pub mod cooc;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
