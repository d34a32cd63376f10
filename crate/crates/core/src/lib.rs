//! Segmentation by a convolutional network trained end to end through a
//! non-differentiable dynamic-programming contour solver.
//!
//! The network's output map is resampled on a star pattern of radial lines
//! ([`warp`]); [`dp`] picks one point per line forming the best closed
//! contour. Since the solver has no useful gradient, a second network
//! ([`nets::ApproxNet`]) is fitted to imitate it under random perturbations
//! and its gradient stands in for the solver's ([`trainer`]).

pub mod autodiff;
pub mod dp;
pub mod error;
pub mod exec;
pub mod geometry;
pub mod grid;
pub mod metrics;
pub mod nets;
pub mod pgm;
pub mod synth;
pub mod trainer;
pub mod warp;

pub use error::{Error, Result};
pub use exec::Exec;
