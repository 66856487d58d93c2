pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod room;
pub mod synth;
pub mod tape;
pub mod train;

pub use error::{Error, Result};
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod gradcheck;
