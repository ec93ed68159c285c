//! Invariant Granger causal discovery from multi-environment time series.
//!
//! The library fits a shared (invariant) lag-1 predictive model across several
//! environments while learning per-environment deviation weights and latent
//! confounder trajectories. Edges of the causal graph are read off group norms
//! of the fitted weights; per-environment deviations localize interventions.

pub mod analysis;
pub mod baseline;
pub mod bench;
pub mod datagen;
pub mod dataset;
pub mod error;
pub mod linear;
pub mod metrics;
pub mod model;
pub mod nonlinear;
pub mod prox;
pub mod selftest;

pub use error::{Error, Result};
