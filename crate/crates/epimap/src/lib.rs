//! Cell-level epidemic incidence mapping and forecasting.
//!
//! `epimap` turns municipality-level daily case counts into continuous
//! cell-level incidence-rate maps via direct block sequential simulation
//! under a Poisson kriging model, forecasts their evolution with four
//! models (per-cell ARMA, panel VAR, per-municipality SIRD coupled back
//! through block simulation, and a spatio-temporal convolutional
//! sequence-to-sequence network), and scores everything with a
//! rolling-origin backtesting harness.
//!
//! Start with the runnable examples (`cargo run --release --example ...`):
//!
//! - `synthetic_country` — generate a seeded synthetic dataset with gold
//!   standard rasters
//! - `variogram_fit` — population-weighted experimental variogram and model fit
//! - `block_simulation` — simulate an ensemble and write median/CI maps
//! - `sird_forecast` — per-municipality SIRD rate forecasting
//! - `train_stconv` — train the convolutional forecaster on a small task
//! - `backtest` — rolling-origin evaluation of simple forecasters
//!
//! The thin `epimap` binary drives the same library through four
//! subcommands (`synth`, `simulate`, `forecast`, `evaluate`).

pub mod baselines;
pub mod dss;
pub mod error;
pub mod eval;
pub mod grid;
pub mod kriging;
pub mod raster;
pub mod sird;
pub mod stconv;
pub mod tensor;
pub mod variogram;

pub use error::{Error, Result};
