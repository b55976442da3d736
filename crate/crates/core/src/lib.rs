//! Conditional random-coefficient density estimation.
//!
//! Estimates the density of `(B0, B1)` in `Y = B0 + B1 W` given controls `X`
//! with a two-stage Hermite sieve whose coefficients are learned by honest
//! random forests.

pub mod basis;
pub mod cli;
pub mod data;
pub mod error;
pub mod forest;
pub mod inference;
pub mod pipeline;
pub mod quadrature;
pub mod simlab;
pub mod transforms;
pub mod tuning;

pub use error::{Error, Result};
