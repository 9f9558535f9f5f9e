//! Angular-margin classification heads with analytic gradients, embedding
//! quality metrics, and a small MLP trainer.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix it to double precision, which is what the trainer, the data
//! loaders and the command-line tool use.

pub mod scalar;
pub mod numerics;
pub mod loss_heads;
pub mod metrics;
pub mod data;
pub mod trainer;
pub mod cli;

pub use loss_heads::{HeadError, HeadKind};
pub use numerics::NumericsError;
pub use scalar::Scalar;

pub type Matrix = numerics::Matrix<f64>;
pub type Matrix32 = numerics::Matrix<f32>;
pub type HeadConfig = loss_heads::HeadConfig<f64>;
pub type HeadState = loss_heads::HeadState<f64>;
pub type ForwardCache = loss_heads::ForwardCache<f64>;
pub type HeadGrads = loss_heads::HeadGrads<f64>;
