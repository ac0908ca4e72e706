pub mod config;
pub mod env;
pub mod eval;
pub mod experiment;
pub mod error;
pub mod gate;
pub mod nn;
pub mod qnet;
pub mod trainer;

pub use error::{Error, Result};
