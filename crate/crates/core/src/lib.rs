//! Latent chain-of-thought on a modular affine recurrence: task generation, a
//! small transformer with hand-written gradients, teacher/student training,
//! interpretability probes and the closed-form theory of the task.

pub mod error;
pub mod interp;
pub mod nnkernel;
pub mod taskgen;
pub mod theory;
pub mod training;

pub use error::{Error, Result};
