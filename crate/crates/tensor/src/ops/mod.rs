//! Differentiable operations, implemented as methods on [`crate::Var`].

mod attention;
mod conv;
mod elementwise;
pub(crate) mod linalg;
pub(crate) mod reduce;
mod sample;
mod shape;

pub use attention::attention_weights;
pub use conv::{area_downsample, avg_pool_same};
