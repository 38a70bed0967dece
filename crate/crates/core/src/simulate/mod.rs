//! Simulation: discrete oracle fixtures, the longitudinal data-generating
//! process, and the Monte Carlo harness.

pub mod dgp;
pub mod toys;
pub mod monte_carlo;
