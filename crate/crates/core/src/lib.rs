pub mod error;
pub mod nn;
pub mod numerics;
pub mod scan;
pub mod blocks;
pub mod data;
pub mod decoder;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod suite;
pub mod bench;
pub mod cli;

pub use error::{Error, Result};
