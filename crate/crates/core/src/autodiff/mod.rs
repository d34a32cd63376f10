//! Minimal reverse-mode automatic differentiation over `f64` tensors.

mod adam;
mod checkpoint;
mod conv;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_update, AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, MAGIC as CHECKPOINT_MAGIC, VERSION as CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, grad_check_inputs, grad_check_with, Coordinates, GradCheckReport};
pub use params::ParamSet;
pub use tape::{sigmoid, Elementwise, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
