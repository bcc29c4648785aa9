//! Contrast-based l1-penalized multinomial regression with debiased-Lasso
//! inference, baseline inference procedures and a Monte-Carlo harness.

pub mod baselines;
pub mod cli;
pub mod debias;
pub mod error;
pub mod model;
pub mod rng;
pub mod simgen;
pub mod solver;

pub use error::{Error, Result};
pub use model::{CoefficientSet, Dataset, PosteriorVector, SigmaHat};
