pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod hermite;
pub mod model;
pub mod oracles;
pub mod rng;
pub mod taskgen;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
