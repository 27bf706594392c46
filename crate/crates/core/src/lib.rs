//! Multi-epoch annealed dual averaging for sparse stochastic optimization,
//! with baselines and an experiment harness.

pub mod acceptance;
pub mod drivers;
pub mod engine;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod oracles;
pub mod reference;
pub mod schedule;

pub use error::{Error, ErrorClass, Result};
