//! Tabular preference games: contrastive preference losses, their population
//! gradients, learning dynamics, regularised Nash fixed points, stochastic
//! gradient estimators and stationarity diagnostics.

pub mod analysis;
pub mod cli;
pub mod dynamics;
pub mod error;
pub mod estimators;
pub mod game;
pub mod games;
pub mod losses;
pub mod math;
pub mod solvers;

pub use error::{Error, Result};
