//! Full-frame denoising by patch tiling.

use cascade_tensor::Tensor;

use crate::error::{Error, Result};
use crate::gate::{decide_exit, savings_from_iterations, ExitPolicy};
use crate::model::Model;
use crate::patch_match::{assemble_window, tile_starts, PatchTriplet};
use crate::synth::VideoSequence;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenoiseOptions {
    pub policy: ExitPolicy,
    /// Tile stride; `0` means the patch size (non-overlapping tiles).
    pub stride: usize,
    pub search_radius: usize,
}

impl DenoiseOptions {
    pub fn new(policy: ExitPolicy) -> Self {
        DenoiseOptions { policy, stride: 0, search_radius: 8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchRecord {
    pub frame: usize,
    /// Top-left corner `(x, y)`.
    pub origin: (usize, usize),
    pub iterations: usize,
    /// Mean σ² at the emitted iteration.
    pub mean_variance: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DenoiseReport {
    pub patches: Vec<PatchRecord>,
    pub mean_iterations: f64,
    pub savings: f64,
}

/// Every iterate of one patch, from a run without gating.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchTrace {
    pub frame: usize,
    pub origin: (usize, usize),
    pub outputs: Vec<Tensor>,
    pub log_vars: Vec<Tensor>,
}

/// Frame extents padded up to a multiple of 4 by edge replication, run through the
/// pre-denoiser, and cropped back.
fn predenoise_frame(model: &Model, frame: &Tensor) -> Result<Tensor> {
    let [c, h, w] = frame.dims3("predenoise")?;
    let (hp, wp) = (h.div_ceil(4) * 4, w.div_ceil(4) * 4);
    if (hp, wp) == (h, w) {
        return model.predenoise(frame);
    }
    let d = frame.data();
    let padded = Tensor::from_fn([c, hp, wp], |i| {
        let (ch, y, x) = (i / (hp * wp), (i / wp) % hp, i % wp);
        d[(ch * h + y.min(h - 1)) * w + x.min(w - 1)]
    });
    let out = model.predenoise(&padded)?;
    let o = out.data();
    Ok(Tensor::from_fn([c, h, w], |i| {
        let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
        o[(ch * hp + y) * wp + x]
    }))
}

fn prepare(model: &Model, noisy: &VideoSequence, opts: &DenoiseOptions) -> Result<(Vec<Tensor>, Vec<(usize, usize)>)> {
    if noisy.len() < 3 {
        return Err(Error::param(format!("need at least 3 frames, got {}", noisy.len())));
    }
    let [c, h, w] = noisy.dims();
    if c != model.cfg.channels {
        return Err(Error::param(format!("{c}-channel video for a {}-channel model", model.cfg.channels)));
    }
    opts.policy.validate()?;
    let p = model.cfg.patch;
    let stride = if opts.stride == 0 { p } else { opts.stride };
    let xs = tile_starts(w, p, stride, true)?;
    let ys = tile_starts(h, p, stride, true)?;
    let origins = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (x, y))).collect();
    let pre = noisy.frames.iter().map(|f| predenoise_frame(model, f)).collect::<Result<Vec<_>>>()?;
    Ok((pre, origins))
}

/// Triplets of frame `t`, replicating the boundary frame where a neighbour is missing.
fn frame_triplets(noisy: &VideoSequence, pre: &[Tensor], t: usize, origins: &[(usize, usize)], p: usize, radius: usize) -> Result<Vec<PatchTriplet>> {
    let n = noisy.len();
    let idx = [t.saturating_sub(1), t, (t + 1).min(n - 1)];
    let f = &noisy.frames;
    assemble_window([&f[idx[0]], &f[idx[1]], &f[idx[2]]], [&pre[idx[0]], &pre[idx[1]], &pre[idx[2]]], origins, p, radius)
}

/// Writes patches into a frame; pixels already written by an earlier tile are kept,
/// so every pixel comes from exactly one tile.
struct Stitcher {
    frame: Tensor,
    written: Vec<bool>,
}

impl Stitcher {
    fn new(c: usize, h: usize, w: usize) -> Self {
        Stitcher { frame: Tensor::zeros([c, h, w]), written: vec![false; h * w] }
    }

    fn put(&mut self, patch: &Tensor, origin: (usize, usize)) {
        let [c, h, w] = [self.frame.shape()[0], self.frame.shape()[1], self.frame.shape()[2]];
        let p = patch.shape()[1];
        let src = patch.data();
        let dst = self.frame.data_mut();
        for r in 0..p {
            for col in 0..p {
                let (y, x) = (origin.1 + r, origin.0 + col);
                if self.written[y * w + x] {
                    continue;
                }
                self.written[y * w + x] = true;
                for ch in 0..c {
                    dst[(ch * h + y) * w + x] = src[(ch * p + r) * p + col].clamp(0.0, 1.0);
                }
            }
        }
    }

    fn finish(self) -> Result<Tensor> {
        if self.written.iter().any(|&b| !b) {
            return Err(Error::param("tiling left pixels uncovered"));
        }
        Ok(self.frame)
    }
}

/// Pre-denoises every frame, matches and tiles each reference frame, and runs the
/// gated cascade on every patch.
pub fn denoise_video(model: &Model, noisy: &VideoSequence, opts: &DenoiseOptions) -> Result<(VideoSequence, DenoiseReport)> {
    let (pre, origins) = prepare(model, noisy, opts)?;
    let [c, h, w] = noisy.dims();
    let p = model.cfg.patch;
    let mut frames = Vec::with_capacity(noisy.len());
    let mut patches = Vec::new();
    for t in 0..noisy.len() {
        let mut st = Stitcher::new(c, h, w);
        for tri in frame_triplets(noisy, &pre, t, &origins, p, opts.search_radius)? {
            let (outs, decisions) = model.denoise_triplet(&tri, &opts.policy)?;
            let last = outs.last().expect("at least one iteration");
            st.put(&last.s, tri.ref_origin);
            let d = decisions.last().expect("one decision per iteration");
            patches.push(PatchRecord { frame: t, origin: tri.ref_origin, iterations: d.iteration, mean_variance: d.mean_uncertainty });
        }
        frames.push(st.finish()?);
    }
    let report = summarize(patches, opts.policy.max_iters)?;
    let mut out = VideoSequence::new(frames)?;
    out.frame_rate = noisy.frame_rate;
    Ok((out, report))
}

fn summarize(patches: Vec<PatchRecord>, max_iters: usize) -> Result<DenoiseReport> {
    let iters: Vec<usize> = patches.iter().map(|r| r.iterations).collect();
    let savings = savings_from_iterations(&iters, max_iters)?;
    let mean_iterations = iters.iter().sum::<usize>() as f64 / iters.len() as f64;
    Ok(DenoiseReport { patches, mean_iterations, savings })
}

/// All `max_iters` iterates of every patch, for replaying arbitrary exit thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoTrace {
    pub dims: [usize; 3],
    pub n_frames: usize,
    pub max_iters: usize,
    pub patches: Vec<PatchTrace>,
}

pub fn trace_video(model: &Model, noisy: &VideoSequence, max_iters: usize, search_radius: usize) -> Result<VideoTrace> {
    let opts = DenoiseOptions { policy: ExitPolicy::disabled(max_iters), stride: 0, search_radius };
    let (pre, origins) = prepare(model, noisy, &opts)?;
    let mut patches = Vec::new();
    for t in 0..noisy.len() {
        for tri in frame_triplets(noisy, &pre, t, &origins, model.cfg.patch, search_radius)? {
            let (outs, _) = model.denoise_triplet(&tri, &opts.policy)?;
            patches.push(PatchTrace {
                frame: t,
                origin: tri.ref_origin,
                outputs: outs.iter().map(|o| o.s.clone()).collect(),
                log_vars: outs.into_iter().map(|o| o.u).collect(),
            });
        }
    }
    Ok(VideoTrace { dims: noisy.dims(), n_frames: noisy.len(), max_iters, patches })
}

impl VideoTrace {
    /// The output a gated run under `policy` would produce, with its per-patch records.
    pub fn replay(&self, policy: &ExitPolicy) -> Result<(VideoSequence, DenoiseReport)> {
        if policy.max_iters > self.max_iters {
            return Err(Error::param(format!("trace holds {} iterations, policy wants {}", self.max_iters, policy.max_iters)));
        }
        let [c, h, w] = self.dims;
        let mut st: Vec<Stitcher> = (0..self.n_frames).map(|_| Stitcher::new(c, h, w)).collect();
        let mut patches = Vec::with_capacity(self.patches.len());
        for pt in &self.patches {
            let mut chosen = None;
            for k in 1..=policy.max_iters {
                let d = decide_exit(&pt.log_vars[k - 1], policy, k)?;
                if d.exit {
                    chosen = Some(d);
                    break;
                }
            }
            let d = chosen.expect("the cap always exits");
            st[pt.frame].put(&pt.outputs[d.iteration - 1], pt.origin);
            patches.push(PatchRecord { frame: pt.frame, origin: pt.origin, iterations: d.iteration, mean_variance: d.mean_uncertainty });
        }
        let frames = st.into_iter().map(Stitcher::finish).collect::<Result<Vec<_>>>()?;
        Ok((VideoSequence::new(frames)?, summarize(patches, policy.max_iters)?))
    }

    /// Mean σ² of every patch at every iteration.
    pub fn variances(&self) -> impl Iterator<Item = f64> + '_ {
        self.patches.iter().flat_map(|p| p.log_vars.iter().map(|u| u.data().iter().map(|v| v.exp()).sum::<f64>() / u.numel() as f64))
    }
}
