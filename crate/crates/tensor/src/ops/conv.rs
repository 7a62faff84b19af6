//! Dense 2-D convolution via im2col and GEMM.

use super::gemm::gemm;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.height + 2 * self.padding - self.kernel) / self.stride + 1,
            (self.width + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }
}

fn im2col(g: &ConvGeom, x: &[f64], col: &mut [f64]) {
    let (ho, wo) = g.out_hw();
    let k = g.kernel;
    for c in 0..g.in_ch {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.width as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, col: &[f64], dx: &mut [f64]) {
    let (ho, wo) = g.out_hw();
    let k = g.kernel;
    for c in 0..g.in_ch {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            line[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn forward(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let (ho, wo) = g.out_hw();
    let npix = ho * wo;
    let rows = g.col_rows();
    let mut col = vec![0.0; rows * npix];
    let mut out = vec![0.0; g.batch * g.out_ch * npix];
    let in_sz = g.in_ch * g.height * g.width;
    for bi in 0..g.batch {
        im2col(g, &x[bi * in_sz..(bi + 1) * in_sz], &mut col);
        let o = &mut out[bi * g.out_ch * npix..(bi + 1) * g.out_ch * npix];
        for (oc, chunk) in o.chunks_mut(npix).enumerate() {
            chunk.fill(b[oc]);
        }
        gemm(g.out_ch, rows, npix, w, false, &col, false, 1.0, o);
    }
    out
}

pub struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Option<Vec<f64>>,
    pub db: Option<Vec<f64>>,
}

pub fn backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    grad_out: &[f64],
    want: [bool; 3],
) -> ConvGrads {
    let (ho, wo) = g.out_hw();
    let npix = ho * wo;
    let rows = g.col_rows();
    let in_sz = g.in_ch * g.height * g.width;
    let mut col = vec![0.0; rows * npix];
    let mut dcol = vec![0.0; rows * npix];
    let mut dx = want[0].then(|| vec![0.0; x.len()]);
    let mut dw = want[1].then(|| vec![0.0; w.len()]);
    let mut db = want[2].then(|| vec![0.0; g.out_ch]);
    for bi in 0..g.batch {
        let go = &grad_out[bi * g.out_ch * npix..(bi + 1) * g.out_ch * npix];
        if let Some(db) = db.as_mut() {
            for (oc, chunk) in go.chunks(npix).enumerate() {
                db[oc] += chunk.iter().sum::<f64>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            im2col(g, &x[bi * in_sz..(bi + 1) * in_sz], &mut col);
            gemm(g.out_ch, npix, rows, go, false, &col, true, 1.0, dw);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(rows, g.out_ch, npix, w, true, go, false, 0.0, &mut dcol);
            col2im(g, &dcol, &mut dx[bi * in_sz..(bi + 1) * in_sz]);
        }
    }
    ConvGrads { dx, dw, db }
}
