//! Forward kernels and their analytic adjoints. These operate on raw buffers; the
//! [`Tape`](crate::Tape) owns shape checking and gradient routing.

pub mod conv;
pub mod corr;
pub mod deform;
mod gemm;
pub mod loss;
pub mod pointwise;
pub mod pool;
pub mod sample;
