//! Modulated deformable convolution (stride 1, "same" padding).
//!
//! Offsets are laid out as `[B, G·K·2, H, W]` with channel `(g·K + t)·2 + {0: x, 1: y}`
//! and the modulation mask as `[B, G·K, H, W]`, where `K = k²` kernel taps and input
//! channel `c` belongs to offset group `c / (C / G)`. Samples falling outside the
//! input read zero, so zero offsets with a unit mask reproduce a zero-padded convolution.

use super::gemm::gemm;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeformGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub groups: usize,
}

impl DeformGeom {
    pub fn taps(&self) -> usize {
        self.kernel * self.kernel
    }
}

#[derive(Clone, Copy)]
struct Corner {
    x0: isize,
    y0: isize,
    wx: f64,
    wy: f64,
}

impl Corner {
    fn at(px: f64, py: f64) -> Self {
        let (fx, fy) = (px.floor(), py.floor());
        Corner {
            x0: fx as isize,
            y0: fy as isize,
            wx: px - fx,
            wy: py - fy,
        }
    }
}

#[inline]
fn fetch(src: &[f64], h: usize, w: usize, y: isize, x: isize) -> f64 {
    if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
        0.0
    } else {
        src[y as usize * w + x as usize]
    }
}

#[inline]
fn put(dst: &mut [f64], h: usize, w: usize, y: isize, x: isize, v: f64) {
    if y >= 0 && x >= 0 && y < h as isize && x < w as isize {
        dst[y as usize * w + x as usize] += v;
    }
}

/// Sampling position and corner of tap `t` of group `grp` at pixel `p`.
fn tap_corner(g: &DeformGeom, off: &[f64], p: usize, grp: usize, t: usize) -> Corner {
    let npix = g.height * g.width;
    let pad = (g.kernel / 2) as f64;
    let (y, x) = ((p / g.width) as f64, (p % g.width) as f64);
    let (ky, kx) = ((t / g.kernel) as f64, (t % g.kernel) as f64);
    let ch = (grp * g.taps() + t) * 2;
    let px = x + kx - pad + off[ch * npix + p];
    let py = y + ky - pad + off[(ch + 1) * npix + p];
    Corner::at(px, py)
}

/// Unmodulated samples `[C·K, H·W]` for one batch item.
fn sample_columns(g: &DeformGeom, x: &[f64], off: &[f64], col: &mut [f64]) {
    let npix = g.height * g.width;
    let k = g.taps();
    let cpg = g.in_ch / g.groups;
    for grp in 0..g.groups {
        for t in 0..k {
            for p in 0..npix {
                let cr = tap_corner(g, off, p, grp, t);
                for c in grp * cpg..(grp + 1) * cpg {
                    let src = &x[c * npix..(c + 1) * npix];
                    let v00 = fetch(src, g.height, g.width, cr.y0, cr.x0);
                    let v01 = fetch(src, g.height, g.width, cr.y0, cr.x0 + 1);
                    let v10 = fetch(src, g.height, g.width, cr.y0 + 1, cr.x0);
                    let v11 = fetch(src, g.height, g.width, cr.y0 + 1, cr.x0 + 1);
                    col[(c * k + t) * npix + p] = (1.0 - cr.wy) * ((1.0 - cr.wx) * v00 + cr.wx * v01)
                        + cr.wy * ((1.0 - cr.wx) * v10 + cr.wx * v11);
                }
            }
        }
    }
}

fn modulate(g: &DeformGeom, mask: &[f64], col: &mut [f64]) {
    let npix = g.height * g.width;
    let k = g.taps();
    let cpg = g.in_ch / g.groups;
    for c in 0..g.in_ch {
        let grp = c / cpg;
        for t in 0..k {
            let m = &mask[(grp * k + t) * npix..(grp * k + t + 1) * npix];
            let row = &mut col[(c * k + t) * npix..(c * k + t + 1) * npix];
            row.iter_mut().zip(m).for_each(|(v, m)| *v *= m);
        }
    }
}

pub fn forward(g: &DeformGeom, x: &[f64], off: &[f64], mask: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let npix = g.height * g.width;
    let rows = g.in_ch * g.taps();
    let (xs, os, ms) = (g.in_ch * npix, 2 * g.groups * g.taps() * npix, g.groups * g.taps() * npix);
    let mut col = vec![0.0; rows * npix];
    let mut out = vec![0.0; g.batch * g.out_ch * npix];
    for bi in 0..g.batch {
        let off_b = &off[bi * os..(bi + 1) * os];
        sample_columns(g, &x[bi * xs..(bi + 1) * xs], off_b, &mut col);
        modulate(g, &mask[bi * ms..(bi + 1) * ms], &mut col);
        let o = &mut out[bi * g.out_ch * npix..(bi + 1) * g.out_ch * npix];
        for (oc, chunk) in o.chunks_mut(npix).enumerate() {
            chunk.fill(b[oc]);
        }
        gemm(g.out_ch, rows, npix, w, false, &col, false, 1.0, o);
    }
    out
}

#[derive(Default)]
pub struct DeformGrads {
    pub dx: Option<Vec<f64>>,
    pub doff: Option<Vec<f64>>,
    pub dmask: Option<Vec<f64>>,
    pub dw: Option<Vec<f64>>,
    pub db: Option<Vec<f64>>,
}

#[allow(clippy::too_many_arguments)]
pub fn backward(
    g: &DeformGeom,
    x: &[f64],
    off: &[f64],
    mask: &[f64],
    w: &[f64],
    grad_out: &[f64],
    want: [bool; 5],
) -> DeformGrads {
    let npix = g.height * g.width;
    let k = g.taps();
    let rows = g.in_ch * k;
    let cpg = g.in_ch / g.groups;
    let (xs, os, ms) = (g.in_ch * npix, 2 * g.groups * k * npix, g.groups * k * npix);
    let mut grads = DeformGrads {
        dx: want[0].then(|| vec![0.0; x.len()]),
        doff: want[1].then(|| vec![0.0; off.len()]),
        dmask: want[2].then(|| vec![0.0; mask.len()]),
        dw: want[3].then(|| vec![0.0; w.len()]),
        db: want[4].then(|| vec![0.0; g.out_ch]),
    };
    let need_col = want[2] || want[3];
    let need_dcol = want[0] || want[1] || want[2];
    let mut col = vec![0.0; rows * npix];
    let mut dcol = vec![0.0; rows * npix];
    for bi in 0..g.batch {
        let go = &grad_out[bi * g.out_ch * npix..(bi + 1) * g.out_ch * npix];
        let (xb, ob, mb) = (
            &x[bi * xs..(bi + 1) * xs],
            &off[bi * os..(bi + 1) * os],
            &mask[bi * ms..(bi + 1) * ms],
        );
        if let Some(db) = grads.db.as_mut() {
            for (oc, chunk) in go.chunks(npix).enumerate() {
                db[oc] += chunk.iter().sum::<f64>();
            }
        }
        if need_col {
            sample_columns(g, xb, ob, &mut col);
        }
        if let Some(dw) = grads.dw.as_mut() {
            let mut modded = col.clone();
            modulate(g, mb, &mut modded);
            gemm(g.out_ch, npix, rows, go, false, &modded, true, 1.0, dw);
        }
        if !need_dcol {
            continue;
        }
        gemm(rows, g.out_ch, npix, w, true, go, false, 0.0, &mut dcol);
        if let Some(dmask) = grads.dmask.as_mut() {
            let dm = &mut dmask[bi * ms..(bi + 1) * ms];
            for c in 0..g.in_ch {
                let grp = c / cpg;
                for t in 0..k {
                    let r = (c * k + t) * npix;
                    let m = (grp * k + t) * npix;
                    for p in 0..npix {
                        dm[m + p] += dcol[r + p] * col[r + p];
                    }
                }
            }
        }
        if !(want[0] || want[1]) {
            continue;
        }
        for grp in 0..g.groups {
            for t in 0..k {
                let och = (grp * k + t) * 2;
                for p in 0..npix {
                    let cr = tap_corner(g, ob, p, grp, t);
                    let m = mb[(grp * k + t) * npix + p];
                    let (mut gx, mut gy) = (0.0, 0.0);
                    for c in grp * cpg..(grp + 1) * cpg {
                        let d = dcol[(c * k + t) * npix + p] * m;
                        if d == 0.0 {
                            continue;
                        }
                        if let Some(dx) = grads.dx.as_mut() {
                            let dst = &mut dx[bi * xs + c * npix..bi * xs + (c + 1) * npix];
                            put(dst, g.height, g.width, cr.y0, cr.x0, d * (1.0 - cr.wy) * (1.0 - cr.wx));
                            put(dst, g.height, g.width, cr.y0, cr.x0 + 1, d * (1.0 - cr.wy) * cr.wx);
                            put(dst, g.height, g.width, cr.y0 + 1, cr.x0, d * cr.wy * (1.0 - cr.wx));
                            put(dst, g.height, g.width, cr.y0 + 1, cr.x0 + 1, d * cr.wy * cr.wx);
                        }
                        if want[1] {
                            let src = &xb[c * npix..(c + 1) * npix];
                            let v00 = fetch(src, g.height, g.width, cr.y0, cr.x0);
                            let v01 = fetch(src, g.height, g.width, cr.y0, cr.x0 + 1);
                            let v10 = fetch(src, g.height, g.width, cr.y0 + 1, cr.x0);
                            let v11 = fetch(src, g.height, g.width, cr.y0 + 1, cr.x0 + 1);
                            gx += d * ((1.0 - cr.wy) * (v01 - v00) + cr.wy * (v11 - v10));
                            gy += d * ((1.0 - cr.wx) * (v10 - v00) + cr.wx * (v11 - v01));
                        }
                    }
                    if let Some(doff) = grads.doff.as_mut() {
                        doff[bi * os + och * npix + p] += gx;
                        doff[bi * os + (och + 1) * npix + p] += gy;
                    }
                }
            }
        }
    }
    grads
}
