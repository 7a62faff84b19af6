//! All-pairs feature correlation and the multi-level lookup.

use super::gemm::gemm;
use super::sample::axis;

/// `out[b, p, q] = Σ_d f1[b, d, p] · f2[b, d, q]` with `p, q` flattened pixels.
pub fn corr_forward(batch: usize, dim: usize, npix: usize, f1: &[f64], f2: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; batch * npix * npix];
    let fsz = dim * npix;
    for b in 0..batch {
        gemm(
            npix,
            dim,
            npix,
            &f1[b * fsz..(b + 1) * fsz],
            true,
            &f2[b * fsz..(b + 1) * fsz],
            false,
            0.0,
            &mut out[b * npix * npix..(b + 1) * npix * npix],
        );
    }
    out
}

pub fn corr_backward(
    batch: usize,
    dim: usize,
    npix: usize,
    f1: &[f64],
    f2: &[f64],
    grad_out: &[f64],
    want: [bool; 2],
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let fsz = dim * npix;
    let mut d1 = want[0].then(|| vec![0.0; f1.len()]);
    let mut d2 = want[1].then(|| vec![0.0; f2.len()]);
    for b in 0..batch {
        let g = &grad_out[b * npix * npix..(b + 1) * npix * npix];
        if let Some(d1) = d1.as_mut() {
            // d1[d, p] = Σ_q f2[d, q] g[p, q]
            gemm(dim, npix, npix, &f2[b * fsz..(b + 1) * fsz], false, g, true, 0.0, &mut d1[b * fsz..(b + 1) * fsz]);
        }
        if let Some(d2) = d2.as_mut() {
            // d2[d, q] = Σ_p f1[d, p] g[p, q]
            gemm(dim, npix, npix, &f1[b * fsz..(b + 1) * fsz], false, g, false, 0.0, &mut d2[b * fsz..(b + 1) * fsz]);
        }
    }
    (d1, d2)
}

#[derive(Debug, Clone)]
pub struct LookupGeom {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub radius: usize,
    /// `(h_l, w_l)` target extents of each level.
    pub levels: Vec<(usize, usize)>,
}

impl LookupGeom {
    pub fn window(&self) -> usize {
        (2 * self.radius + 1) * (2 * self.radius + 1)
    }

    pub fn out_channels(&self) -> usize {
        self.window() * self.levels.len()
    }
}

/// Calls `f(level, out_channel, source_pixel, x_axis, y_axis)` for every tap.
fn for_each_tap(
    g: &LookupGeom,
    b: usize,
    flow: &[f64],
    mut f: impl FnMut(usize, usize, usize, super::sample::Axis, super::sample::Axis),
) {
    let npix = g.height * g.width;
    let r = g.radius as isize;
    let fx = &flow[(b * 2) * npix..(b * 2 + 1) * npix];
    let fy = &flow[(b * 2 + 1) * npix..(b * 2 + 2) * npix];
    for (l, &(lh, lw)) in g.levels.iter().enumerate() {
        let scale = (1u64 << l) as f64;
        for i in 0..g.height {
            for j in 0..g.width {
                let p = i * g.width + j;
                let cx = (j as f64 + fx[p]) / scale;
                let cy = (i as f64 + fy[p]) / scale;
                let mut ch = l * g.window();
                for dy in -r..=r {
                    let ay = axis(cy + dy as f64, lh);
                    for dx in -r..=r {
                        let ax = axis(cx + dx as f64, lw);
                        f(l, ch, p, ax, ay);
                        ch += 1;
                    }
                }
            }
        }
    }
}

/// Samples each level's correlation slice on a `(2r+1)²` grid around the flow-displaced
/// position. Output channels are ordered level-major, then row (`dy`), then column (`dx`).
pub fn lookup_forward(g: &LookupGeom, levels: &[&[f64]], flow: &[f64]) -> Vec<f64> {
    let npix = g.height * g.width;
    let oc = g.out_channels();
    let mut out = vec![0.0; g.batch * oc * npix];
    for b in 0..g.batch {
        let o = &mut out[b * oc * npix..(b + 1) * oc * npix];
        for_each_tap(g, b, flow, |l, ch, p, ax, ay| {
            let (lh, lw) = g.levels[l];
            let plane = lh * lw;
            let src = &levels[l][(b * npix + p) * plane..(b * npix + p + 1) * plane];
            let (wx, wy) = (ax.frac, ay.frac);
            o[ch * npix + p] = (1.0 - wy) * ((1.0 - wx) * src[ay.i0 * lw + ax.i0] + wx * src[ay.i0 * lw + ax.i1])
                + wy * ((1.0 - wx) * src[ay.i1 * lw + ax.i0] + wx * src[ay.i1 * lw + ax.i1]);
        });
    }
    out
}

/// Gradient with respect to every level; the flow is treated as a constant.
pub fn lookup_backward(g: &LookupGeom, flow: &[f64], grad_out: &[f64]) -> Vec<Vec<f64>> {
    let npix = g.height * g.width;
    let oc = g.out_channels();
    let mut grads: Vec<Vec<f64>> = g
        .levels
        .iter()
        .map(|&(lh, lw)| vec![0.0; g.batch * npix * lh * lw])
        .collect();
    for b in 0..g.batch {
        let go = &grad_out[b * oc * npix..(b + 1) * oc * npix];
        for_each_tap(g, b, flow, |l, ch, p, ax, ay| {
            let v = go[ch * npix + p];
            if v == 0.0 {
                return;
            }
            let (lh, lw) = g.levels[l];
            let plane = lh * lw;
            let dst = &mut grads[l][(b * npix + p) * plane..(b * npix + p + 1) * plane];
            let (wx, wy) = (ax.frac, ay.frac);
            dst[ay.i0 * lw + ax.i0] += v * (1.0 - wy) * (1.0 - wx);
            dst[ay.i0 * lw + ax.i1] += v * (1.0 - wy) * wx;
            dst[ay.i1 * lw + ax.i0] += v * wy * (1.0 - wx);
            dst[ay.i1 * lw + ax.i1] += v * wy * wx;
        });
    }
    grads
}
