//! Reverse-mode automatic-differentiation tensor core with exactly the
//! operations the forecasting model needs, plus the Adam optimizer.

pub mod adam;
pub mod kernels;
mod tape;
mod tensor;

pub use adam::AdamState;
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;
