#[cfg(feature = "cli")]
pub mod cli;
pub mod config;
pub mod curriculum;
pub mod datagen;
pub mod digest;
pub mod error;
pub mod eval;
pub mod lm;
pub mod nn;
pub mod rag;
pub mod rat;
pub mod sample;

pub use error::{Error, Result};
