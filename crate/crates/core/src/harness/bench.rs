//! Mixed-noise benchmark: quality with and without gating, iteration savings, and the
//! per-patch uncertainty/error correlation.

use std::fmt::Write as _;
use std::path::Path;

use cascade_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::heatmap::emit_heatmap;
use super::metrics::{fmt_metric, pearson, psnr_from_mse, ssim};
use super::video::{denoise_video, trace_video, DenoiseOptions, VideoTrace};
use crate::error::{Error, Result};
use crate::gate::ExitPolicy;
use crate::model::Model;
use crate::patch_match::crop;
use crate::synth::{add_noise, synth_sequence, NoiseModel, TextureKind, VideoSequence};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSpec {
    pub seed: u64,
    pub sigmas: Vec<f64>,
    /// Sequences generated per noise level.
    pub per_sigma: usize,
    pub size: (usize, usize),
    pub frames: usize,
    pub channels: usize,
    /// Per-frame motion components are drawn from `[-max_motion, max_motion]`.
    pub max_motion: f64,
    pub textures: Vec<TextureKind>,
    pub search_radius: usize,
}

impl Default for BenchSpec {
    fn default() -> Self {
        BenchSpec {
            seed: 1,
            sigmas: vec![0.02, 0.05, 0.1],
            per_sigma: 3,
            size: (64, 64),
            frames: 3,
            channels: 3,
            max_motion: 2.0,
            textures: vec![TextureKind::PerlinLike, TextureKind::Checker, TextureKind::Gradient],
            search_radius: 8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchSequence {
    pub clean: VideoSequence,
    pub noisy: VideoSequence,
    pub sigma: f64,
}

/// Renders `per_sigma` clean sequences and noises each one at every level, so the
/// noise levels are compared on identical content.
pub fn generate_suite(spec: &BenchSpec) -> Result<Vec<BenchSequence>> {
    if spec.sigmas.is_empty() || spec.per_sigma == 0 || spec.textures.is_empty() {
        return Err(Error::param("benchmark suite is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut cleans = Vec::with_capacity(spec.per_sigma);
    for i in 0..spec.per_sigma {
        // cycle through the textures so every kind is represented
        let tex = spec.textures[i % spec.textures.len()];
        let m = spec.max_motion;
        let motion = if m > 0.0 { (rng.random_range(-m..=m), rng.random_range(-m..=m)) } else { (0.0, 0.0) };
        cleans.push(synth_sequence(rng.random(), spec.frames, spec.size, motion, tex, spec.channels)?);
    }
    let mut out = Vec::new();
    for &sigma in &spec.sigmas {
        for clean in &cleans {
            let noisy = add_noise(clean, &NoiseModel::Gaussian(sigma), rng.random())?;
            out.push(BenchSequence { clean: clean.clone(), noisy, sigma });
        }
    }
    Ok(out)
}

/// MSE pooled over every frame.
fn sequence_mse(a: &VideoSequence, b: &VideoSequence) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for (x, y) in a.frames.iter().zip(&b.frames) {
        total += super::metrics::mse(x, y)? * x.numel() as f64;
        n += x.numel();
    }
    Ok(total / n as f64)
}

fn sequence_ssim(a: &VideoSequence, b: &VideoSequence) -> Result<f64> {
    let mut s = 0.0;
    for (x, y) in a.frames.iter().zip(&b.frames) {
        s += ssim(x, y)?;
    }
    Ok(s / a.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub sequence: usize,
    pub sigma: f64,
    pub gating: bool,
    pub psnr: f64,
    pub ssim: f64,
    pub mean_iterations: f64,
    pub savings: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchStat {
    pub sequence: usize,
    pub sigma: f64,
    pub frame: usize,
    pub origin: (usize, usize),
    /// Mean |error| of the ungated output.
    pub mae: f64,
    /// Mean σ² of the ungated output.
    pub mean_variance: f64,
    pub exit_iteration: usize,
}

/// Suite-level summary for one gating mode.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub psnr: f64,
    pub ssim: f64,
    pub pearson_r: Option<f64>,
    pub mean_iterations: f64,
    pub savings: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub patches: Vec<PatchStat>,
    pub gated: EvalReport,
    pub ungated: EvalReport,
    pub threshold: f64,
    pub max_iters: usize,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sequence,sigma,gating,psnr,ssim,mean_iterations,savings,pearson_r\n");
        let onoff = |g: bool| if g { "on" } else { "off" };
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{:.6},{:.4},{:.6},",
                r.sequence,
                r.sigma,
                onoff(r.gating),
                fmt_metric(r.psnr),
                r.ssim,
                r.mean_iterations,
                r.savings
            )
            .expect("string write");
        }
        for (g, e) in [(false, &self.ungated), (true, &self.gated)] {
            let r = e.pearson_r.map(|v| format!("{v:.6}")).unwrap_or_default();
            writeln!(out, "all,,{},{},{:.6},{:.4},{:.6},{r}", onoff(g), fmt_metric(e.psnr), e.ssim, e.mean_iterations, e.savings)
                .expect("string write");
        }
        out
    }

    pub fn patches_csv(&self) -> String {
        let mut out = String::from("sequence,sigma,frame,x,y,mae,mean_variance,exit_iteration\n");
        for p in &self.patches {
            writeln!(
                out,
                "{},{},{},{},{},{:.8e},{:.8e},{}",
                p.sequence, p.sigma, p.frame, p.origin.0, p.origin.1, p.mae, p.mean_variance, p.exit_iteration
            )
            .expect("string write");
        }
        out
    }

    /// Mean exit iteration of patches at noise level `sigma` (gated run).
    pub fn mean_exit_for(&self, sigma: f64) -> Option<f64> {
        let its: Vec<usize> = self.patches.iter().filter(|p| p.sigma == sigma).map(|p| p.exit_iteration).collect();
        (!its.is_empty()).then(|| its.iter().sum::<usize>() as f64 / its.len() as f64)
    }
}

/// Runs the suite with gating off (full trace) and on (real early exit).
pub fn bench(model: &Model, spec: &BenchSpec, policy: &ExitPolicy, heatmap_dir: Option<&Path>) -> Result<BenchReport> {
    policy.validate()?;
    let suite = generate_suite(spec)?;
    let p = model.cfg.patch;
    let mut rows = Vec::new();
    let mut patches = Vec::new();
    let mut totals = [(0.0, 0.0, 0.0, 0.0); 2];
    for (si, seq) in suite.iter().enumerate() {
        let trace = trace_video(model, &seq.noisy, policy.max_iters, spec.search_radius)?;
        let (full, full_rep) = trace.replay(&ExitPolicy::disabled(policy.max_iters))?;
        let opts = DenoiseOptions { policy: ExitPolicy { enabled: true, ..*policy }, stride: 0, search_radius: spec.search_radius };
        let (gated, gated_rep) = denoise_video(model, &seq.noisy, &opts)?;
        for (gating, out, rep) in [(false, &full, &full_rep), (true, &gated, &gated_rep)] {
            let row = BenchRow {
                sequence: si,
                sigma: seq.sigma,
                gating,
                psnr: psnr_from_mse(sequence_mse(out, &seq.clean)?, 1.0),
                ssim: sequence_ssim(out, &seq.clean)?,
                mean_iterations: rep.mean_iterations,
                savings: rep.savings,
            };
            let t = &mut totals[gating as usize];
            t.0 += row.psnr;
            t.1 += row.ssim;
            t.2 += row.mean_iterations;
            t.3 += row.savings;
            rows.push(row);
        }
        for (rec, g) in full_rep.patches.iter().zip(&gated_rep.patches) {
            let est = crop(&full.frames[rec.frame], rec.origin, p)?;
            let truth = crop(&seq.clean.frames[rec.frame], rec.origin, p)?;
            let mae = est.data().iter().zip(truth.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / est.numel() as f64;
            patches.push(PatchStat {
                sequence: si,
                sigma: seq.sigma,
                frame: rec.frame,
                origin: rec.origin,
                mae,
                mean_variance: rec.mean_variance,
                exit_iteration: g.iterations,
            });
        }
        if si == 0 {
            if let Some(dir) = heatmap_dir {
                emit_frame_heatmaps(&trace, &full, &seq.clean, p, dir)?;
            }
        }
    }
    let n = suite.len() as f64;
    let mae: Vec<f64> = patches.iter().map(|s| s.mae).collect();
    let var: Vec<f64> = patches.iter().map(|s| s.mean_variance).collect();
    let r = pearson(&mae, &var).ok();
    let summary = |t: (f64, f64, f64, f64), pearson_r| EvalReport {
        psnr: t.0 / n,
        ssim: t.1 / n,
        pearson_r,
        mean_iterations: t.2 / n,
        savings: t.3 / n,
    };
    Ok(BenchReport {
        rows,
        patches,
        ungated: summary(totals[0], r),
        gated: summary(totals[1], None),
        threshold: policy.threshold,
        max_iters: policy.max_iters,
    })
}

/// Error and uncertainty heat-maps of the middle frame.
fn emit_frame_heatmaps(trace: &VideoTrace, out: &VideoSequence, clean: &VideoSequence, p: usize, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let t = trace.n_frames / 2;
    let [_, h, w] = trace.dims;
    let (gh, gw) = (h / p, w / p);
    let mut err = Tensor::zeros([gh, gw]);
    let mut unc = Tensor::zeros([gh, gw]);
    for pt in trace.patches.iter().filter(|pt| pt.frame == t && pt.origin.0 % p == 0 && pt.origin.1 % p == 0) {
        let (gi, gj) = (pt.origin.1 / p, pt.origin.0 / p);
        if gi >= gh || gj >= gw {
            continue;
        }
        let est = crop(&out.frames[t], pt.origin, p)?;
        let truth = crop(&clean.frames[t], pt.origin, p)?;
        err.data_mut()[gi * gw + gj] = est.data().iter().zip(truth.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / est.numel() as f64;
        let u = pt.log_vars.last().expect("nonempty trace");
        unc.data_mut()[gi * gw + gj] = u.data().iter().map(|v| v.exp()).sum::<f64>() / u.numel() as f64;
    }
    emit_heatmap(&err, (h, w), dir.join("error_heatmap.pgm"))?;
    emit_heatmap(&unc, (h, w), dir.join("uncertainty_heatmap.pgm"))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tuning {
    pub threshold: f64,
    /// Suite PSNR lost relative to running every iteration.
    pub psnr_drop: f64,
    pub mean_iterations: f64,
}

/// Largest exit threshold whose mean PSNR loss on `spec`'s suite stays below `max_drop_db`.
pub fn tune_threshold(model: &Model, spec: &BenchSpec, max_iters: usize, max_drop_db: f64) -> Result<Tuning> {
    let suite = generate_suite(spec)?;
    let traces = suite
        .iter()
        .map(|s| trace_video(model, &s.noisy, max_iters, spec.search_radius))
        .collect::<Result<Vec<_>>>()?;
    let evaluate = |policy: &ExitPolicy| -> Result<(f64, f64)> {
        let (mut psnr, mut iters) = (0.0, 0.0);
        for (s, tr) in suite.iter().zip(&traces) {
            let (out, rep) = tr.replay(policy)?;
            psnr += psnr_from_mse(sequence_mse(&out, &s.clean)?, 1.0);
            iters += rep.mean_iterations;
        }
        Ok((psnr / suite.len() as f64, iters / suite.len() as f64))
    };
    let (base, _) = evaluate(&ExitPolicy::disabled(max_iters))?;

    let mut vars: Vec<f64> = traces.iter().flat_map(|t| t.variances()).collect();
    vars.sort_by(f64::total_cmp);
    vars.dedup();
    // thresholds just above observed means, thinned to a bounded number of quantiles
    let step = (vars.len() / 256).max(1);
    let mut candidates: Vec<f64> = vars.iter().step_by(step).map(|v| v * (1.0 + 1e-9)).collect();
    candidates.push(vars.last().copied().unwrap_or(0.0) * (1.0 + 1e-9));

    let mut best = Tuning { threshold: 0.0, psnr_drop: 0.0, mean_iterations: max_iters as f64 };
    for &t in &candidates {
        let (psnr, iters) = evaluate(&ExitPolicy::new(true, t, max_iters)?)?;
        let drop = base - psnr;
        if drop < max_drop_db && t > best.threshold {
            best = Tuning { threshold: t, psnr_drop: drop, mean_iterations: iters };
        }
    }
    Ok(best)
}
