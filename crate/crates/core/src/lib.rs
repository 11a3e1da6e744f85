//! Multiply robust double score matching estimators of average and quantile
//! treatment effects, with comparators, weighted bootstrap inference and a
//! simulation harness.

pub mod analysis;
pub mod balance;
pub mod bootstrap;
pub mod config;
pub mod data;
pub mod design;
pub mod dgp;
pub mod estimator;
pub mod error;
pub mod linalg;
pub mod matching;
pub mod mean;
pub mod models;
pub mod quantile;
pub mod rng;
pub mod sieve;
pub mod sim;
pub mod stats;

pub use error::{DsmError, ErrorKind, Result};
