//! Single-frame pre-denoiser: a two-level encoder/decoder with skip connections,
//! predicting a residual over its input.

use cascade_tensor::{Bound, ParamSet, Tape, Var};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{rescale, ModelConfig};
use crate::nn::{conv, conv_relu, upsample2};

pub const DEPTH: usize = 2;
pub const PREFIX: &str = "pre.";

pub(crate) fn init(ps: &mut ParamSet, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    let (c, w) = (cfg.channels, cfg.pre_width);
    ps.init_conv("pre.enc0a", w, c, 3, rng)?;
    ps.init_conv("pre.enc0b", w, w, 3, rng)?;
    ps.init_conv("pre.enc1", 2 * w, w, 3, rng)?;
    ps.init_conv("pre.enc2", 2 * w, 2 * w, 3, rng)?;
    ps.init_conv("pre.dec1", 2 * w, 4 * w, 3, rng)?;
    ps.init_conv("pre.dec0", w, 3 * w, 3, rng)?;
    ps.init_conv("pre.out", c, w, 3, rng)?;
    rescale(ps, "pre.out.weight", 0.1)
}

/// `x: [B,C,H,W]` with `H`, `W` divisible by 4.
pub fn forward(tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let factor = 1 << DEPTH;
    if s.len() != 4 || s[2] % factor != 0 || s[3] % factor != 0 || s[2] == 0 || s[3] == 0 {
        return Err(Error::Tensor(cascade_tensor::TensorError::Dimension {
            op: "predenoise",
            detail: format!("frame extents {:?} (axes 2,3) must be nonzero multiples of {factor}", &s[2.min(s.len())..]),
        }));
    }
    let e0 = conv_relu(tape, bound, "pre.enc0a", x, 1)?;
    let e0 = conv_relu(tape, bound, "pre.enc0b", e0, 1)?;
    let p1 = tape.avg_pool2(e0)?;
    let e1 = conv_relu(tape, bound, "pre.enc1", p1, 1)?;
    let p2 = tape.avg_pool2(e1)?;
    let e2 = conv_relu(tape, bound, "pre.enc2", p2, 1)?;
    let u1 = upsample2(tape, e2)?;
    let d1 = tape.concat(&[u1, e1])?;
    let d1 = conv_relu(tape, bound, "pre.dec1", d1, 1)?;
    let u0 = upsample2(tape, d1)?;
    let d0 = tape.concat(&[u0, e0])?;
    let d0 = conv_relu(tape, bound, "pre.dec0", d0, 1)?;
    let residual = conv(tape, bound, "pre.out", d0, 1)?;
    Ok(tape.add(x, residual)?)
}
