//! One reconstruction iteration: warp supporting features along the flow, align them
//! with flow-guided deformable convolution, fuse with the reference features, and
//! emit the denoised patch and its log-variance map.

use cascade_tensor::{Bound, ParamSet, Tape, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::gate::{decide_exit, ExitPolicy, GateDecision};
use crate::model::{fill, rescale, ModelConfig, WindowVars};
use crate::nn::{conv, conv_relu, identity_grid, upsample2};

pub const PREFIX: &str = "recon.";
pub const KERNEL: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct IterationOutput {
    /// Fused reference features `[F,p,p]`.
    pub r_next: Tensor,
    /// Denoised patch `[C,p,p]`.
    pub s: Tensor,
    /// log σ², `[1,p,p]`.
    pub u: Tensor,
    pub flows: [FlowField; 2],
}

impl IterationOutput {
    pub fn mean_variance(&self) -> f64 {
        self.u.data().iter().map(|v| v.exp()).sum::<f64>() / self.u.numel() as f64
    }
}

pub(crate) fn init(ps: &mut ParamSet, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    let (c, f, g) = (cfg.channels, cfg.recon_feat, cfg.groups);
    let taps = KERNEL * KERNEL;
    ps.init_conv("recon.feat1", f, 2 * c, 3, rng)?;
    ps.init_conv("recon.feat2", f, f, 3, rng)?;
    ps.init_conv("recon.off1", f, 2 * f, 3, rng)?;
    ps.init_conv("recon.off2", 2 * g * taps, f, 3, rng)?;
    ps.init_conv("recon.mask", g * taps, f, 3, rng)?;
    ps.init_conv("recon.dcn", f, f, KERNEL, rng)?;
    ps.init_conv("recon.fuse", f, 3 * f, 3, rng)?;
    for i in 0..cfg.fuse_blocks {
        ps.init_conv(&format!("recon.res{i}a"), f, f, 3, rng)?;
        ps.init_conv(&format!("recon.res{i}b"), f, f, 3, rng)?;
    }
    ps.init_conv("recon.shead1", f / 2, f, 3, rng)?;
    ps.init_conv("recon.shead2", c, f / 2, 3, rng)?;
    ps.init_conv("recon.uhead1", f / 2, f, 3, rng)?;
    ps.init_conv("recon.uhead2", 1, f / 2, 3, rng)?;
    // start close to the flow-only sampling and the pre-denoised patch, with a
    // variance near typical residual magnitudes
    rescale(ps, "recon.off2.weight", 0.1)?;
    fill(ps, "recon.off2.bias", 0.0)?;
    rescale(ps, "recon.shead2.weight", 0.1)?;
    rescale(ps, "recon.uhead2.weight", 0.1)?;
    fill(ps, "recon.uhead2.bias", -4.0)
}

/// Restoration features at patch resolution from a stacked noisy/pre-denoised patch.
pub fn extract_restoration_features(tape: &mut Tape, bound: &Bound, noisy: Var, pre: Var) -> Result<Var> {
    if tape.shape(noisy) != tape.shape(pre) {
        return Err(Error::Tensor(cascade_tensor::TensorError::Dimension {
            op: "extract_restoration_features",
            detail: format!("noisy {:?} vs pre-denoised {:?}", tape.shape(noisy), tape.shape(pre)),
        }));
    }
    let x = tape.concat(&[noisy, pre])?;
    let x = conv_relu(tape, bound, "recon.feat1", x, 1)?;
    conv(tape, bound, "recon.feat2", x, 1)
}

/// Feature-resolution flow brought to patch resolution (positions and magnitudes ×2).
pub fn upsample_flow(tape: &mut Tape, flow: Var) -> Result<Var> {
    let up = upsample2(tape, flow)?;
    Ok(tape.scale(up, 2.0)?)
}

/// Backward warp: output at `p` samples `m` at `p + flow(p)`, clamped at the border.
pub fn warp_features(tape: &mut Tape, m: Var, flow: Var) -> Result<Var> {
    let s = tape.shape(flow).to_vec();
    let grid = tape.constant(identity_grid(s[0], s[2], s[3]));
    let coords = tape.add(grid, flow)?;
    Ok(tape.bilinear_sample(m, coords)?)
}

#[derive(Debug, Clone, Copy)]
pub struct Aligned {
    pub out: Var,
    pub offsets: Var,
    pub mask: Var,
}

/// Deformable alignment of the unwarped supporting features. Offsets are the flow plus
/// a learned residual, clamped to half a patch; the mask is a learned sigmoid.
pub fn flow_guided_dcn(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    m_sup: Var,
    m_warped: Var,
    r_k: Var,
    flow: Var,
) -> Result<Aligned> {
    let cond = tape.concat(&[r_k, m_warped])?;
    let trunk = conv_relu(tape, bound, "recon.off1", cond, 1)?;
    let residual = conv(tape, bound, "recon.off2", trunk, 1)?;
    let tiled = tape.concat(&vec![flow; cfg.groups * KERNEL * KERNEL])?;
    let offsets = tape.add(tiled, residual)?;
    let limit = cfg.patch as f64 / 2.0;
    let offsets = tape.clamp(offsets, -limit, limit)?;
    let mask = conv(tape, bound, "recon.mask", trunk, 1)?;
    let mask = tape.sigmoid(mask)?;
    let w = bound.get("recon.dcn.weight")?;
    let b = bound.get("recon.dcn.bias")?;
    let out = tape.deform_conv2d(m_sup, offsets, mask, w, b, cfg.groups)?;
    Ok(Aligned { out, offsets, mask })
}

/// `r_k + Conv(concat)`, then residual blocks.
pub fn fuse(tape: &mut Tape, bound: &Bound, cfg: &ModelConfig, aligned_prev: Var, r_k: Var, aligned_next: Var) -> Result<Var> {
    let x = tape.concat(&[aligned_prev, r_k, aligned_next])?;
    let merged = conv(tape, bound, "recon.fuse", x, 1)?;
    let mut x = tape.add(r_k, merged)?;
    for i in 0..cfg.fuse_blocks {
        let y = conv_relu(tape, bound, &format!("recon.res{i}a"), x, 1)?;
        let y = conv(tape, bound, &format!("recon.res{i}b"), y, 1)?;
        x = tape.add(x, y)?;
    }
    Ok(x)
}

/// Denoised patch (residual over `ref_pre`) and log-variance map.
pub fn heads(tape: &mut Tape, bound: &Bound, r_next: Var, ref_pre: Var) -> Result<(Var, Var)> {
    let s = conv_relu(tape, bound, "recon.shead1", r_next, 1)?;
    let s = conv(tape, bound, "recon.shead2", s, 1)?;
    let s = tape.add(ref_pre, s)?;
    let u = conv_relu(tape, bound, "recon.uhead1", r_next, 1)?;
    let u = conv(tape, bound, "recon.uhead2", u, 1)?;
    Ok((s, u))
}

/// Restoration features of a whole window; `reference` is `r_0`.
#[derive(Debug, Clone, Copy)]
pub struct WindowFeatures {
    pub support: [Var; 2],
    pub reference: Var,
}

impl WindowFeatures {
    pub fn new(tape: &mut Tape, bound: &Bound, w: &WindowVars) -> Result<Self> {
        let mut m = [w.noisy[0]; 3];
        for i in 0..3 {
            m[i] = extract_restoration_features(tape, bound, w.noisy[i], w.pre[i])?;
        }
        Ok(WindowFeatures { support: [m[0], m[2]], reference: m[1] })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct IterStep {
    pub r: Var,
    pub s: Var,
    pub u: Var,
}

/// One block: consumes `r_k` and the feature-resolution flows `f_k`, returns `r_{k+1}`, `s`, `u`.
pub fn iterate(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    feats: &WindowFeatures,
    ref_pre: Var,
    r_k: Var,
    flows: [Var; 2],
) -> Result<IterStep> {
    let mut aligned = [r_k; 2];
    for side in 0..2 {
        let flow = upsample_flow(tape, flows[side])?;
        let warped = warp_features(tape, feats.support[side], flow)?;
        aligned[side] = flow_guided_dcn(tape, bound, cfg, feats.support[side], warped, r_k, flow)?.out;
    }
    let r = fuse(tape, bound, cfg, aligned[0], r_k, aligned[1])?;
    let (s, u) = heads(tape, bound, r, ref_pre)?;
    Ok(IterStep { r, s, u })
}

/// Cascade over precomputed flow iterates (`flows[k]` feeds block `k`), stopping per `policy`.
pub fn run_cascade(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    window: &WindowVars,
    flows: &[[Var; 2]],
    policy: &ExitPolicy,
) -> Result<(Vec<IterStep>, Vec<GateDecision>)> {
    if flows.len() < policy.max_iters {
        return Err(Error::param(format!("{} flow iterates for {} iterations", flows.len(), policy.max_iters)));
    }
    let feats = WindowFeatures::new(tape, bound, window)?;
    let mut r = feats.reference;
    let mut out = Vec::new();
    let mut decisions = Vec::new();
    for (k, f) in flows.iter().take(policy.max_iters).enumerate() {
        let it = iterate(tape, bound, cfg, &feats, window.pre[1], r, *f)?;
        r = it.r;
        out.push(it);
        let d = decide_exit(tape.value(it.u), policy, k + 1)?;
        let exit = d.exit;
        decisions.push(d);
        if exit {
            break;
        }
    }
    Ok((out, decisions))
}
