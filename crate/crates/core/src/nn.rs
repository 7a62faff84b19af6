//! Small layer helpers shared by the networks.

use cascade_tensor::{Bound, Tape, Tensor, Var};

use crate::error::Result;

/// Same-padded convolution with parameters `{name}.weight` / `{name}.bias`.
pub(crate) fn conv(tape: &mut Tape, bound: &Bound, name: &str, x: Var, stride: usize) -> Result<Var> {
    let w = bound.get(&format!("{name}.weight"))?;
    let b = bound.get(&format!("{name}.bias"))?;
    let k = tape.shape(w)[2];
    Ok(tape.conv2d(x, w, b, stride, k / 2)?)
}

pub(crate) fn conv_relu(tape: &mut Tape, bound: &Bound, name: &str, x: Var, stride: usize) -> Result<Var> {
    let y = conv(tape, bound, name, x, stride)?;
    Ok(tape.relu(y)?)
}

/// `[C,H,W]` → `[1,C,H,W]`.
pub(crate) fn batched(t: &Tensor) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(t.shape());
    Ok(t.clone().reshape(shape)?)
}

/// Stacks equally shaped `[C,H,W]` tensors into `[B,C,H,W]`.
pub(crate) fn stack(items: &[&Tensor]) -> Result<Tensor> {
    let mut shape = vec![items.len()];
    shape.extend_from_slice(items[0].shape());
    let data = items.iter().flat_map(|t| t.data().iter().copied()).collect();
    Ok(Tensor::new(shape, data)?)
}

/// Item `i` of a `[B, ...]` tensor, without the batch axis.
pub(crate) fn unstack(t: &Tensor, i: usize) -> Result<Tensor> {
    let inner: Vec<usize> = t.shape()[1..].to_vec();
    let n: usize = inner.iter().product();
    Ok(Tensor::new(inner, t.data()[i * n..(i + 1) * n].to_vec())?)
}

/// Absolute sampling positions `[B,2,h,w]`: channel 0 holds x = column, channel 1 y = row.
pub(crate) fn identity_grid(batch: usize, h: usize, w: usize) -> Tensor {
    let plane = h * w;
    Tensor::from_fn([batch, 2, h, w], |i| {
        let (c, p) = ((i / plane) % 2, i % plane);
        if c == 0 {
            (p % w) as f64
        } else {
            (p / w) as f64
        }
    })
}

/// Bilinear ×2 upsampling with half-pixel alignment.
pub(crate) fn upsample2(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (b, h, w) = (s[0], s[2] * 2, s[3] * 2);
    let plane = h * w;
    let coords = Tensor::from_fn([b, 2, h, w], |i| {
        let (c, p) = ((i / plane) % 2, i % plane);
        let pos = if c == 0 { p % w } else { p / w };
        (pos as f64 + 0.5) / 2.0 - 0.5
    });
    let coords = tape.constant(coords);
    Ok(tape.bilinear_sample(x, coords)?)
}
