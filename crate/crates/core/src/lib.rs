//! Longhorn: a state-space sequence layer whose recurrence is the closed-form
//! implicit update of an online regression objective, together with the
//! machinery to verify, train and evaluate it.

pub mod autodiff;
pub mod baselines;
pub mod checkpoint;
pub mod error;
pub mod kernel;
pub mod linear;
pub mod longhorn;
pub mod model;
pub mod scalar;
pub mod recurrence;
pub mod scan;
pub mod tasks;
pub mod tensor;
pub mod train;
pub mod verify;

pub use autodiff::{CustomOp, GradStore, Gradients, HasParams, NodeId, Param, ParamId, ParamRegistry, Tape};
pub use error::{Error, Result};
pub use scalar::{Precision, Scalar};
pub use scan::{ScanElement, ScanMode};
pub use tensor::Tensor;
