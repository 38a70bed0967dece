//! Efficient estimation of target-population functionals from fused data
//! sources that share some conditional distributions with the target.

pub mod data;
pub mod discrete;
pub mod error;
pub mod estimands;
pub mod gradient;
pub mod kde;
pub mod longitudinal;
pub mod nuisance;
pub mod numdiff;
pub mod onestep;
pub mod plan;
pub mod scalar;
pub mod simulate;
pub mod stats;
pub mod tangent;
pub mod verify;

pub use error::{FusionError, Result};

/// Double-precision kernel density estimator.
pub type KdeF64 = kde::Kde<f64>;
