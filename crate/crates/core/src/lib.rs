//! Adaptive finite element methods driven by the primal-dual gap error
//! estimator for the p-Laplace equation and ROF total-variation denoising.

pub mod afem;
pub mod error;
pub mod mesh;
pub mod plaplace;
pub mod rof;
pub mod solver;
pub mod spaces;

pub use error::{Error, Result};
