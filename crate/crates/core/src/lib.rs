pub mod error;
pub mod identities;
pub mod linalg;
pub mod minima;
pub mod network;
pub mod planted;
pub mod random_lab;
pub mod seed;
pub mod structure;
pub mod sweep;
pub mod synthetic;
pub mod trainer;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
