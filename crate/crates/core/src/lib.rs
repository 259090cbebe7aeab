pub mod checkpoint;
pub mod coarse;
pub mod config;
pub mod data;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod numerics;
pub mod prototypes;
pub mod schedule;
pub mod target;
pub mod trainer;

pub use error::{Error, Result};
