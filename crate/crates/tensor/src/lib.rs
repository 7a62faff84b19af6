//! Minimal dense tensors with forward kernels and reverse-mode gradients for the
//! operations a small convolutional flow/reconstruction network needs.
//!
//! Every differentiable operation is a method on [`Tape`]; parameters live in a
//! [`ParamSet`] and are bound to a tape per forward pass.

pub mod error;
pub mod gradcheck;
pub mod ops;
pub mod param;
pub mod tape;
pub mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheck, GradCheckReport};
pub use ops::loss::EuForm;
pub use ops::pointwise::Pointwise;
pub use param::{Bound, ParamSet};
pub use tape::{CustomBackward, Gradients, Tape, Var};
pub use tensor::Tensor;

/// Deterministic uniform tensor in `[lo, hi)`; convenient for tests and initialisation.
pub fn uniform(shape: impl Into<Vec<usize>>, lo: f64, hi: f64, seed: u64) -> Tensor {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}
