//! Dynamic sparse training under a fixed global weight budget.
//!
//! Models are trained with binary masks over their weights. At the start
//! of each epoch a rewiring step drops small-magnitude weights and grows
//! the same number elsewhere, following one of four strategies: SET,
//! RigL, DSR, or global gradient-based redistribution (GGR), which ranks
//! the dense gradients of all inactive weights across the whole network
//! to decide how many weights each layer receives.

mod apportion;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod experiment;
mod kernels;
pub mod metrics;
pub mod nn;
pub mod rewire;
pub mod sparsity;
pub mod tensor;
pub mod train;

pub use apportion::largest_remainder;
pub use error::{Error, Result};
pub use tensor::Tensor;
