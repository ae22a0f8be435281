//! Differentiable operations, implemented as methods on [`Var`](crate::Var).

mod elementwise;
mod matrix;
mod volume;

pub use elementwise::sigmoid;
pub use volume::conv_out_dim;
