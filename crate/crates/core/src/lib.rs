//! Multi-frame video denoising with iterative flow refinement, cascaded reconstruction
//! blocks and uncertainty-gated early exit.
//!
//! Frames are `[C, H, W]` tensors in `[0, 1]`. The pipeline per reference frame:
//! single-frame pre-denoising, patch matching in the two neighbours, then for each
//! patch a refinement cascade that interleaves flow updates with reconstruction
//! blocks until the predicted variance is low enough or the iteration cap is hit.

pub mod config;
pub mod error;
pub mod flow;
pub mod gate;
pub mod harness;
pub mod io;
pub mod model;
mod nn;
pub mod patch_match;
pub mod predenoise;
pub mod recon;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use gate::{ExitPolarity, ExitPolicy, GateDecision};
pub use model::{Model, ModelConfig};
pub use patch_match::PatchTriplet;
pub use synth::VideoSequence;
