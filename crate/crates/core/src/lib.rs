//! Activity-conditioned Laplace diffusion forecasting for wearable heart rate.

pub mod autodiff;
pub mod commands;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod experiments;
pub mod features;
pub mod io;
pub mod model;
pub mod pipeline;
pub mod preprocess;
pub mod series;
pub mod synthgen;
pub mod util;

pub use error::{Error, Result};
