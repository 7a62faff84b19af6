/// 2×2 mean pooling over the last two axes of `[N, H, W]` planes.
pub fn avg_pool2_forward(planes: usize, h: usize, w: usize, x: &[f64]) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; planes * ho * wo];
    for n in 0..planes {
        let src = &x[n * h * w..(n + 1) * h * w];
        let dst = &mut out[n * ho * wo..(n + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let (y, x0) = (2 * oy, 2 * ox);
                dst[oy * wo + ox] = 0.25
                    * (src[y * w + x0] + src[y * w + x0 + 1] + src[(y + 1) * w + x0] + src[(y + 1) * w + x0 + 1]);
            }
        }
    }
    out
}

pub fn avg_pool2_backward(planes: usize, h: usize, w: usize, grad_out: &[f64]) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut dx = vec![0.0; planes * h * w];
    for n in 0..planes {
        let go = &grad_out[n * ho * wo..(n + 1) * ho * wo];
        let dst = &mut dx[n * h * w..(n + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = 0.25 * go[(y / 2) * wo + x / 2];
            }
        }
    }
    dx
}

/// Per-plane standardisation `(x − μ) / √(σ² + eps)`; returns the output and each
/// plane's inverse deviation.
pub fn instance_norm_forward(planes: usize, size: usize, eps: f64, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; planes * size];
    let mut inv = Vec::with_capacity(planes);
    for n in 0..planes {
        let src = &x[n * size..(n + 1) * size];
        let mean = src.iter().sum::<f64>() / size as f64;
        let var = src.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / size as f64;
        let s = 1.0 / (var + eps).sqrt();
        for (o, v) in out[n * size..(n + 1) * size].iter_mut().zip(src) {
            *o = (v - mean) * s;
        }
        inv.push(s);
    }
    (out, inv)
}

/// `dx = s · (g − mean(g) − y · mean(g·y))` per plane.
pub fn instance_norm_backward(size: usize, y: &[f64], inv: &[f64], grad_out: &[f64]) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    for (n, &s) in inv.iter().enumerate() {
        let r = n * size..(n + 1) * size;
        let (ys, gs) = (&y[r.clone()], &grad_out[r.clone()]);
        let gm = gs.iter().sum::<f64>() / size as f64;
        let gy = gs.iter().zip(ys).map(|(g, y)| g * y).sum::<f64>() / size as f64;
        for ((d, g), y) in dx[r].iter_mut().zip(gs).zip(ys) {
            *d = s * (g - gm - y * gy);
        }
    }
    dx
}
