pub mod acceptance;
pub mod error;
pub mod geometry;
pub mod mcmc;
pub mod model;
pub mod oracle;
pub mod polymer;
pub mod proca;
pub mod quadrature;
pub mod runner;
pub mod wick;

pub use error::{Error, Result};
