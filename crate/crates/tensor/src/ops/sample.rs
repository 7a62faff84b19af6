//! Bilinear sampling with clamp-to-edge borders.

/// Interpolation stencil for one sample position along one axis.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Axis {
    pub i0: usize,
    pub i1: usize,
    pub frac: f64,
    /// False when the coordinate was clamped; its derivative is then zero.
    pub live: bool,
}

pub(crate) fn axis(coord: f64, extent: usize) -> Axis {
    let hi = (extent - 1) as f64;
    let live = (0.0..=hi).contains(&coord);
    let c = coord.clamp(0.0, hi);
    let i0 = c.floor() as usize;
    let i1 = (i0 + 1).min(extent - 1);
    Axis {
        i0,
        i1,
        frac: c - i0 as f64,
        live,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SampleGeom {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_h: usize,
    pub out_w: usize,
}

pub fn forward(g: &SampleGeom, x: &[f64], coords: &[f64]) -> Vec<f64> {
    let plane = g.height * g.width;
    let opix = g.out_h * g.out_w;
    let mut out = vec![0.0; g.batch * g.channels * opix];
    for b in 0..g.batch {
        let cx = &coords[(b * 2) * opix..(b * 2 + 1) * opix];
        let cy = &coords[(b * 2 + 1) * opix..(b * 2 + 2) * opix];
        for p in 0..opix {
            let ax = axis(cx[p], g.width);
            let ay = axis(cy[p], g.height);
            let (wx, wy) = (ax.frac, ay.frac);
            for c in 0..g.channels {
                let src = &x[(b * g.channels + c) * plane..(b * g.channels + c + 1) * plane];
                let v00 = src[ay.i0 * g.width + ax.i0];
                let v01 = src[ay.i0 * g.width + ax.i1];
                let v10 = src[ay.i1 * g.width + ax.i0];
                let v11 = src[ay.i1 * g.width + ax.i1];
                out[(b * g.channels + c) * opix + p] = (1.0 - wy) * ((1.0 - wx) * v00 + wx * v01)
                    + wy * ((1.0 - wx) * v10 + wx * v11);
            }
        }
    }
    out
}

pub fn backward(
    g: &SampleGeom,
    x: &[f64],
    coords: &[f64],
    grad_out: &[f64],
    want: [bool; 2],
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let plane = g.height * g.width;
    let opix = g.out_h * g.out_w;
    let mut dx = want[0].then(|| vec![0.0; x.len()]);
    let mut dc = want[1].then(|| vec![0.0; coords.len()]);
    for b in 0..g.batch {
        let cx = &coords[(b * 2) * opix..(b * 2 + 1) * opix];
        let cy = &coords[(b * 2 + 1) * opix..(b * 2 + 2) * opix];
        for p in 0..opix {
            let ax = axis(cx[p], g.width);
            let ay = axis(cy[p], g.height);
            let (wx, wy) = (ax.frac, ay.frac);
            let (mut gx, mut gy) = (0.0, 0.0);
            for c in 0..g.channels {
                let base = (b * g.channels + c) * plane;
                let go = grad_out[(b * g.channels + c) * opix + p];
                if go == 0.0 {
                    continue;
                }
                let i00 = base + ay.i0 * g.width + ax.i0;
                let i01 = base + ay.i0 * g.width + ax.i1;
                let i10 = base + ay.i1 * g.width + ax.i0;
                let i11 = base + ay.i1 * g.width + ax.i1;
                if let Some(dx) = dx.as_mut() {
                    dx[i00] += go * (1.0 - wy) * (1.0 - wx);
                    dx[i01] += go * (1.0 - wy) * wx;
                    dx[i10] += go * wy * (1.0 - wx);
                    dx[i11] += go * wy * wx;
                }
                if dc.is_some() {
                    let (v00, v01, v10, v11) = (x[i00], x[i01], x[i10], x[i11]);
                    if ax.live {
                        gx += go * ((1.0 - wy) * (v01 - v00) + wy * (v11 - v10));
                    }
                    if ay.live {
                        gy += go * ((1.0 - wx) * (v10 - v00) + wx * (v11 - v01));
                    }
                }
            }
            if let Some(dc) = dc.as_mut() {
                dc[(b * 2) * opix + p] += gx;
                dc[(b * 2 + 1) * opix + p] += gy;
            }
        }
    }
    (dx, dc)
}
