//! Uncertainty-weighted reconstruction loss.

/// Residual-vs-variance form of the per-pixel negative log-likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EuForm {
    /// `‖s − g‖₂ / (2σ²) + ½ ln σ²`, the residual norm left unsquared.
    #[default]
    Printed,
    /// Canonical Laplace likelihood `‖s − g‖₂ / σ + ln σ`.
    Laplace,
}

/// Per-pixel residual norms over channels for one `[B, C, H, W]` pair.
fn residual_norms(batch: usize, ch: usize, npix: usize, s: &[f64], g: &[f64]) -> Vec<f64> {
    let mut e = vec![0.0; batch * npix];
    for b in 0..batch {
        for c in 0..ch {
            let base = (b * ch + c) * npix;
            for p in 0..npix {
                let d = s[base + p] - g[base + p];
                e[b * npix + p] += d * d;
            }
        }
    }
    e.iter_mut().for_each(|v| *v = v.sqrt());
    e
}

/// Mean over `B·H·W` pixels; `log_var` is `[B, 1, H, W]`.
pub fn eu_forward(form: EuForm, batch: usize, ch: usize, npix: usize, s: &[f64], g: &[f64], log_var: &[f64]) -> f64 {
    let e = residual_norms(batch, ch, npix, s, g);
    let total: f64 = e
        .iter()
        .zip(log_var)
        .map(|(&e, &lv)| match form {
            EuForm::Printed => e * (-lv).exp() / 2.0 + lv / 2.0,
            EuForm::Laplace => e * (-lv / 2.0).exp() + lv / 2.0,
        })
        .sum();
    total / e.len() as f64
}

/// Returns `(d/ds, d/dg, d/dlog_var)` scaled by the upstream scalar gradient.
#[allow(clippy::too_many_arguments)]
pub fn eu_backward(
    form: EuForm,
    batch: usize,
    ch: usize,
    npix: usize,
    s: &[f64],
    g: &[f64],
    log_var: &[f64],
    grad_out: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let e = residual_norms(batch, ch, npix, s, g);
    let scale = grad_out / e.len() as f64;
    let mut ds = vec![0.0; s.len()];
    let mut dlv = vec![0.0; log_var.len()];
    for (i, (&e, &lv)) in e.iter().zip(log_var).enumerate() {
        let (de, dl) = match form {
            EuForm::Printed => ((-lv).exp() / 2.0, -e * (-lv).exp() / 2.0 + 0.5),
            EuForm::Laplace => ((-lv / 2.0).exp(), -e * (-lv / 2.0).exp() / 2.0 + 0.5),
        };
        dlv[i] = scale * dl;
        if e == 0.0 {
            continue;
        }
        let (b, p) = (i / npix, i % npix);
        for c in 0..ch {
            let idx = (b * ch + c) * npix + p;
            ds[idx] = scale * de * (s[idx] - g[idx]) / e;
        }
    }
    let dg = ds.iter().map(|v| -v).collect();
    (ds, dg, dlv)
}
