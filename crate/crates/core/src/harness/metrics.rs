//! Image quality and correlation metrics.

use cascade_tensor::{Tensor, TensorError};

use crate::error::{Error, Result};
use crate::patch_match::grayscale;

pub const SSIM_WINDOW: usize = 8;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::Dimension { op, detail: format!("{:?} vs {:?}", a.shape(), b.shape()) }.into());
    }
    Ok(())
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape("mse", a, b)?;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.numel() as f64)
}

/// `10·log10(peak² / MSE)`; identical inputs give `+∞`.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::param(format!("peak {peak} must be > 0")));
    }
    let m = mse(a, b)?;
    Ok(if m == 0.0 { f64::INFINITY } else { 10.0 * (peak * peak / m).log10() })
}

/// PSNR from a pooled MSE.
pub fn psnr_from_mse(m: f64, peak: f64) -> f64 {
    if m == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / m).log10()
    }
}

/// CSV rendering; `+∞` becomes `inf`.
pub fn fmt_metric(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else {
        format!("{v:.6}")
    }
}

/// Inclusive prefix sums with a zero border, `(h+1)×(w+1)`.
fn integral(h: usize, w: usize, f: impl Fn(usize) -> f64) -> Vec<f64> {
    let mut s = vec![0.0; (h + 1) * (w + 1)];
    for i in 0..h {
        let mut row = 0.0;
        for j in 0..w {
            row += f(i * w + j);
            s[(i + 1) * (w + 1) + j + 1] = s[i * (w + 1) + j + 1] + row;
        }
    }
    s
}

/// Mean SSIM over all 8×8 windows (stride 1) of the channel-mean images, peak 1.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape("ssim", a, b)?;
    let (ga, gb) = (grayscale(a)?, grayscale(b)?);
    let [_, h, w] = ga.dims3("ssim")?;
    let n = SSIM_WINDOW;
    if h < n || w < n {
        return Err(Error::param(format!("{w}x{h} image smaller than the {n}x{n} SSIM window")));
    }
    let (x, y) = (ga.data(), gb.data());
    let sums = [
        integral(h, w, |i| x[i]),
        integral(h, w, |i| y[i]),
        integral(h, w, |i| x[i] * x[i]),
        integral(h, w, |i| y[i] * y[i]),
        integral(h, w, |i| x[i] * y[i]),
    ];
    let (c1, c2) = (K1 * K1, K2 * K2);
    let area = (n * n) as f64;
    let stride = w + 1;
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..=h - n {
        for j in 0..=w - n {
            let [sx, sy, sxx, syy, sxy] = sums.each_ref().map(|s| {
                (s[(i + n) * stride + j + n] - s[i * stride + j + n] - s[(i + n) * stride + j] + s[i * stride + j]) / area
            });
            let (vx, vy, cxy) = (sxx - sx * sx, syy - sy * sy, sxy - sx * sy);
            total += ((2.0 * sx * sy + c1) * (2.0 * cxy + c2)) / ((sx * sx + sy * sy + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Product-moment correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::param(format!("pearson needs two equal-length series of ≥ 2 values, got {} and {}", x.len(), y.len())));
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation(format!("zero variance (x: {sxx}, y: {syy})")));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}
