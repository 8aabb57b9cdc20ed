//! Batch experiment runner for the `fedls` toolkit: config parsing, dataset
//! wiring, accountant queries, membership attacks and artifact export.

pub mod accountant;
pub mod attack;
pub mod config;
pub mod error;
pub mod experiment;
pub mod spectrum;

pub use error::{CliError, Result};
