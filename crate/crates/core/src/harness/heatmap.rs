//! Per-patch value grids rendered as grayscale images.

use std::path::Path;

use cascade_tensor::Tensor;

use crate::error::{Error, Result};
use crate::io::write_frame;

/// Min-max normalises a `[gh, gw]` grid and upsamples it (nearest) to `[1, h, w]`.
/// A constant grid maps to 0.5.
pub fn heatmap_image(grid: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (gh, gw) = match grid.shape() {
        [gh, gw] if *gh > 0 && *gw > 0 => (*gh, *gw),
        s => return Err(Error::param(format!("heat-map grid must be a nonempty 2-D array, got {s:?}"))),
    };
    if h == 0 || w == 0 {
        return Err(Error::param("empty heat-map size"));
    }
    let d = grid.data();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::param("non-finite heat-map value"));
    }
    let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(Tensor::from_fn([1, h, w], |p| {
        let (i, j) = (p / w, p % w);
        let v = d[(i * gh / h) * gw + j * gw / w];
        if hi > lo {
            (v - lo) / (hi - lo)
        } else {
            0.5
        }
    }))
}

pub fn emit_heatmap(grid: &Tensor, size: (usize, usize), path: impl AsRef<Path>) -> Result<Tensor> {
    let img = heatmap_image(grid, size.0, size.1)?;
    write_frame(path, &img)?;
    Ok(img)
}
