//! Risk-averse contextual stochastic optimization.

pub mod cli;
pub mod error;
pub mod kernel;
pub mod nested;
pub mod newsvendor;
pub mod normal;
pub mod objectives;
pub mod policy;
pub mod portfolio;
pub mod risk;
pub mod solve;

pub use error::{Error, Result};
