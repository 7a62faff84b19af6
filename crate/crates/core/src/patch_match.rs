//! Coarse alignment: normalized cross-correlation search for each reference patch in
//! the neighbouring frames, run on the channel-mean of pre-denoised frames.

use cascade_tensor::{Tensor, TensorError};

use crate::error::{Error, Result};
use crate::synth::VideoSequence;

/// Reference patch and its matches in frames t−1 (index 0) and t+1 (index 1).
#[derive(Debug, Clone, PartialEq)]
pub struct PatchTriplet {
    pub ref_noisy: Tensor,
    pub ref_pre: Tensor,
    pub sup_noisy: [Tensor; 2],
    pub sup_pre: [Tensor; 2],
    /// Top-left corner `(x, y)`.
    pub ref_origin: (usize, usize),
    pub sup_origin: [(usize, usize); 2],
}

impl PatchTriplet {
    pub fn displacement(&self, side: usize) -> (isize, isize) {
        let (s, r) = (self.sup_origin[side], self.ref_origin);
        (s.0 as isize - r.0 as isize, s.1 as isize - r.1 as isize)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchScoreMap {
    /// `[ny, nx]` scores over the clipped search window.
    pub scores: Tensor,
    /// Placement `(x, y)` of `scores[0, 0]`.
    pub window_origin: (usize, usize),
    /// Best placement `(x, y)`.
    pub argmax: (usize, usize),
    /// True when the template had no structure and the search fell back to the centre.
    pub degenerate: bool,
}

/// `Σ T·W / sqrt(Σ T² · Σ W²)`, sums running over channels and pixels.
pub fn ncc_score(template: &Tensor, window: &Tensor) -> Result<f64> {
    if template.shape() != window.shape() {
        return Err(TensorError::Dimension {
            op: "ncc_score",
            detail: format!("template {:?} vs window {:?}", template.shape(), window.shape()),
        }
        .into());
    }
    let (mut tw, mut tt, mut ww) = (0.0, 0.0, 0.0);
    for (&t, &w) in template.data().iter().zip(window.data()) {
        tw += t * w;
        tt += t * t;
        ww += w * w;
    }
    if tt == 0.0 || ww == 0.0 {
        return Err(Error::DegenerateMatch(format!("zero energy (template {tt}, window {ww})")));
    }
    Ok((tw / (tt * ww).sqrt()).clamp(-1.0, 1.0))
}

/// Channel mean `[1,H,W]` of a `[C,H,W]` frame.
pub fn grayscale(frame: &Tensor) -> Result<Tensor> {
    let [c, h, w] = frame.dims3("grayscale")?;
    let plane = h * w;
    let d = frame.data();
    Ok(Tensor::from_fn([1, h, w], |p| (0..c).map(|ch| d[ch * plane + p]).sum::<f64>() / c as f64))
}

/// `[C,p,p]` crop with top-left corner `(x, y)`.
pub fn crop(frame: &Tensor, origin: (usize, usize), p: usize) -> Result<Tensor> {
    let [c, h, w] = frame.dims3("crop")?;
    let (x, y) = origin;
    if x + p > w || y + p > h {
        return Err(Error::param(format!("{p}x{p} crop at {origin:?} leaves {w}x{h} frame")));
    }
    let d = frame.data();
    Ok(Tensor::from_fn([c, p, p], |i| {
        let (ch, r, col) = (i / (p * p), (i / p) % p, i % p);
        d[(ch * h + y + r) * w + x + col]
    }))
}

/// Exhaustive search of placements within `radius` of `center` (the reference patch's
/// top-left corner), clipped to the frame. Ties go to the smallest displacement, then
/// row-major order. A structureless template falls back to `center`.
pub fn match_patch(ref_patch: &Tensor, sup_frame: &Tensor, center: (usize, usize), radius: usize) -> Result<MatchScoreMap> {
    let [c, p, pw] = ref_patch.dims3("match_patch")?;
    let [fc, h, w] = sup_frame.dims3("match_patch")?;
    if p != pw || c != fc {
        return Err(Error::param(format!("template {:?} vs frame {:?}", ref_patch.shape(), sup_frame.shape())));
    }
    if p > h || p > w || center.0 + p > w || center.1 + p > h {
        return Err(Error::param(format!("no valid placement of {p}x{p} at {center:?} in {w}x{h}")));
    }
    let x0 = center.0.saturating_sub(radius);
    let y0 = center.1.saturating_sub(radius);
    let x1 = (center.0 + radius).min(w - p);
    let y1 = (center.1 + radius).min(h - p);
    let (nx, ny) = (x1 - x0 + 1, y1 - y0 + 1);
    let mut scores = vec![0.0; nx * ny];

    let first = ref_patch.data()[0];
    let degenerate = ref_patch.data().iter().all(|&v| v == first);
    if degenerate {
        return Ok(MatchScoreMap { scores: Tensor::new([ny, nx], scores)?, window_origin: (x0, y0), argmax: center, degenerate });
    }

    let t = ref_patch.data();
    let f = sup_frame.data();
    let tt: f64 = t.iter().map(|v| v * v).sum();
    let mut best: Option<(f64, i64, i64, i64)> = None;
    for j in 0..ny {
        for i in 0..nx {
            let (x, y) = (x0 + i, y0 + j);
            let (mut tw, mut ww) = (0.0, 0.0);
            for ch in 0..c {
                for r in 0..p {
                    let row = (ch * h + y + r) * w + x;
                    let trow = (ch * p + r) * p;
                    for col in 0..p {
                        let v = f[row + col];
                        tw += t[trow + col] * v;
                        ww += v * v;
                    }
                }
            }
            let score = if ww == 0.0 { 0.0 } else { (tw / (tt * ww).sqrt()).clamp(-1.0, 1.0) };
            scores[j * nx + i] = score;
            let (dx, dy) = (x as i64 - center.0 as i64, y as i64 - center.1 as i64);
            let d2 = dx * dx + dy * dy;
            let better = match best {
                None => true,
                Some((s, bd2, bdy, bdx)) => score > s || (score == s && (d2, dy, dx) < (bd2, bdy, bdx)),
            };
            if better {
                best = Some((score, d2, dy, dx));
            }
        }
    }
    let (_, _, dy, dx) = best.expect("window is nonempty");
    let argmax = ((center.0 as i64 + dx) as usize, (center.1 as i64 + dy) as usize);
    Ok(MatchScoreMap { scores: Tensor::new([ny, nx], scores)?, window_origin: (x0, y0), argmax, degenerate })
}

/// Tile starts along one axis. With `cover`, a final edge-aligned tile is added when
/// the stride grid leaves a remainder.
pub fn tile_starts(extent: usize, patch: usize, stride: usize, cover: bool) -> Result<Vec<usize>> {
    if patch == 0 || stride == 0 {
        return Err(Error::param("patch and stride must be ≥ 1"));
    }
    if extent < patch {
        return Err(Error::param(format!("frame extent {extent} smaller than patch {patch}")));
    }
    let mut v: Vec<usize> = (0..=extent - patch).step_by(stride).collect();
    if cover && *v.last().expect("nonempty") + patch < extent {
        v.push(extent - patch);
    }
    Ok(v)
}

/// Triplets for the given reference origins of a three-frame window `[t−1, t, t+1]`.
pub fn assemble_window(
    noisy: [&Tensor; 3],
    pre: [&Tensor; 3],
    origins: &[(usize, usize)],
    patch: usize,
    radius: usize,
) -> Result<Vec<PatchTriplet>> {
    let gray = [grayscale(pre[0])?, grayscale(pre[1])?, grayscale(pre[2])?];
    origins
        .iter()
        .map(|&o| {
            let template = crop(&gray[1], o, patch)?;
            let mut sup_origin = [o; 2];
            for (side, frame) in [(0, 0), (1, 2)] {
                sup_origin[side] = match_patch(&template, &gray[frame], o, radius)?.argmax;
            }
            Ok(PatchTriplet {
                ref_noisy: crop(noisy[1], o, patch)?,
                ref_pre: crop(pre[1], o, patch)?,
                sup_noisy: [crop(noisy[0], sup_origin[0], patch)?, crop(noisy[2], sup_origin[1], patch)?],
                sup_pre: [crop(pre[0], sup_origin[0], patch)?, crop(pre[2], sup_origin[1], patch)?],
                ref_origin: o,
                sup_origin,
            })
        })
        .collect()
}

/// Tiles frame `t` with `stride` and matches every tile in frames `t−1` and `t+1`.
pub fn assemble_triplets(
    frames_noisy: &VideoSequence,
    frames_pre: &VideoSequence,
    t: usize,
    patch_size: usize,
    stride: usize,
    search_radius: usize,
) -> Result<Vec<PatchTriplet>> {
    if t == 0 || t + 1 >= frames_noisy.len() || frames_pre.len() != frames_noisy.len() {
        return Err(Error::param(format!("frame {t} has no neighbours in a {}-frame sequence", frames_noisy.len())));
    }
    let [_, h, w] = frames_noisy.dims();
    let xs = tile_starts(w, patch_size, stride, false)?;
    let ys = tile_starts(h, patch_size, stride, false)?;
    let origins: Vec<_> = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (x, y))).collect();
    let n = &frames_noisy.frames;
    let p = &frames_pre.frames;
    assemble_window([&n[t - 1], &n[t], &n[t + 1]], [&p[t - 1], &p[t], &p[t + 1]], &origins, patch_size, search_radius)
}
