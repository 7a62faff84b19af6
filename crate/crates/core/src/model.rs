//! Model configuration, parameter registry and the end-to-end patch forward pass.

use std::path::{Path, PathBuf};

use cascade_tensor::{Bound, ParamSet, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::flow::{self, FlowField, FlowState};
use crate::gate::{decide_exit, ExitPolicy, GateDecision};
use crate::nn;
use crate::patch_match::PatchTriplet;
use crate::predenoise;
use crate::recon::{self, IterationOutput};

/// Architecture hyper-parameters. `Default` gives the reference widths; see
/// [`ModelConfig::small`] for the fast variant used in tests.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub channels: usize,
    pub patch: usize,
    pub pre_width: usize,
    /// Correlation feature width.
    pub feat_dim: usize,
    pub ctx_dim: usize,
    pub hidden: usize,
    /// Restoration feature width.
    pub recon_feat: usize,
    pub groups: usize,
    pub radius: usize,
    pub fuse_blocks: usize,
}

pub const PYRAMID_LEVELS: usize = 4;

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 3,
            patch: 32,
            pre_width: 8,
            feat_dim: 32,
            ctx_dim: 32,
            hidden: 48,
            recon_feat: 32,
            groups: 4,
            radius: 3,
            fuse_blocks: 2,
        }
    }
}

impl ModelConfig {
    /// Narrow single-channel network on 16-px patches; trains in minutes on one core.
    pub fn small() -> Self {
        ModelConfig {
            channels: 1,
            patch: 16,
            pre_width: 8,
            feat_dim: 16,
            ctx_dim: 16,
            hidden: 16,
            recon_feat: 16,
            groups: 4,
            radius: 2,
            fuse_blocks: 2,
        }
    }

    pub fn from_config(cfg: &Config) -> Result<Self> {
        let base = if cfg.get_or("model", String::from("default"))? == "small" { Self::small() } else { Self::default() };
        let m = ModelConfig {
            channels: cfg.get_or("channels", base.channels)?,
            patch: cfg.get_or("patch", base.patch)?,
            pre_width: cfg.get_or("pre_width", base.pre_width)?,
            feat_dim: cfg.get_or("feat_dim", base.feat_dim)?,
            ctx_dim: cfg.get_or("ctx_dim", base.ctx_dim)?,
            hidden: cfg.get_or("hidden", base.hidden)?,
            recon_feat: cfg.get_or("recon_feat", base.recon_feat)?,
            groups: cfg.get_or("groups", base.groups)?,
            radius: cfg.get_or("radius", base.radius)?,
            fuse_blocks: cfg.get_or("fuse_blocks", base.fuse_blocks)?,
        };
        m.validate()?;
        Ok(m)
    }

    /// Architecture recovered from parameter shapes; the patch size is not stored in
    /// weights and must be supplied.
    pub fn infer(params: &ParamSet, patch: usize) -> Result<Self> {
        let dim = |name: &str, axis: usize| -> Result<usize> {
            params.get(&format!("{name}.weight"))?.shape().get(axis).copied().ok_or_else(|| Error::param(format!("`{name}` is not a convolution")))
        };
        let hidden = dim("flow.hinit", 0)?;
        let ctx_dim = dim("flow.cenc3", 0)?;
        let extra = dim("flow.gru_z", 1)?
            .checked_sub(hidden + ctx_dim + 2)
            .ok_or_else(|| Error::param("GRU input narrower than its fixed parts"))?;
        let window = extra / PYRAMID_LEVELS;
        let side = (window as f64).sqrt().round() as usize;
        if side * side * PYRAMID_LEVELS != extra || side % 2 == 0 {
            return Err(Error::param(format!("GRU input width {extra} is not a lookup window")));
        }
        let m = ModelConfig {
            channels: dim("pre.enc0a", 1)?,
            patch,
            pre_width: dim("pre.enc0a", 0)?,
            feat_dim: dim("flow.fenc3", 0)?,
            ctx_dim,
            hidden,
            recon_feat: dim("recon.feat2", 0)?,
            groups: dim("recon.mask", 0)? / (crate::recon::KERNEL * crate::recon::KERNEL),
            radius: side / 2,
            fuse_blocks: params.names().filter(|n| n.starts_with("recon.res") && n.ends_with("a.weight")).count(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn to_config_text(&self) -> String {
        format!(
            "channels = {}\npatch = {}\npre_width = {}\nfeat_dim = {}\nctx_dim = {}\nhidden = {}\nrecon_feat = {}\ngroups = {}\nradius = {}\nfuse_blocks = {}\n",
            self.channels,
            self.patch,
            self.pre_width,
            self.feat_dim,
            self.ctx_dim,
            self.hidden,
            self.recon_feat,
            self.groups,
            self.radius,
            self.fuse_blocks
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::param(msg));
        if self.channels == 0 || self.pre_width == 0 || self.hidden == 0 || self.radius == 0 {
            return bad(format!("zero width in {self:?}"));
        }
        // 1/2-resolution features pooled three more times
        if self.patch == 0 || self.patch % (2 << (PYRAMID_LEVELS - 1)) != 0 {
            return bad(format!("patch {} must be a multiple of {}", self.patch, 2 << (PYRAMID_LEVELS - 1)));
        }
        if self.feat_dim < 2 || self.feat_dim % 2 != 0 || self.ctx_dim < 2 || self.ctx_dim % 2 != 0 {
            return bad(format!("feat_dim {} and ctx_dim {} must be even", self.feat_dim, self.ctx_dim));
        }
        if self.recon_feat < 2 || self.recon_feat % 2 != 0 || self.groups == 0 || self.recon_feat % self.groups != 0 {
            return bad(format!("recon_feat {} must be even and divisible by groups {}", self.recon_feat, self.groups));
        }
        Ok(())
    }

    /// Spatial extent of the flow features.
    pub fn feat_size(&self) -> usize {
        self.patch / 2
    }

    pub fn gru_input(&self) -> usize {
        PYRAMID_LEVELS * (2 * self.radius + 1).pow(2) + 2 + self.ctx_dim
    }
}

/// Fresh parameters for every sub-network.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    predenoise::init(&mut ps, cfg, &mut rng)?;
    flow::init(&mut ps, cfg, &mut rng)?;
    recon::init(&mut ps, cfg, &mut rng)?;
    Ok(ps)
}

/// Multiplies an initialised parameter in place.
pub(crate) fn rescale(ps: &mut ParamSet, name: &str, factor: f64) -> Result<()> {
    ps.get_mut(name)?.data_mut().iter_mut().for_each(|v| *v *= factor);
    Ok(())
}

pub(crate) fn fill(ps: &mut ParamSet, name: &str, value: f64) -> Result<()> {
    ps.get_mut(name)?.data_mut().iter_mut().for_each(|v| *v = value);
    Ok(())
}

/// Batched three-frame window on a tape; index 0 = t−1, 1 = t (reference), 2 = t+1.
#[derive(Debug, Clone, Copy)]
pub struct WindowVars {
    pub noisy: [Var; 3],
    pub pre: [Var; 3],
}

/// Outputs of one cascade iteration on the tape.
#[derive(Debug, Clone, Copy)]
pub struct IterVars {
    /// Flow iterate consumed by this iteration, at feature resolution, per supporting frame.
    pub flows: [Var; 2],
    pub r: Var,
    pub s: Var,
    /// log σ².
    pub u: Var,
}

/// Runs flow refinement and reconstruction interleaved, one flow iterate per
/// reconstruction block. With a policy, stops once every batch item has exited.
pub fn forward(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    window: &WindowVars,
    max_iters: usize,
    policy: Option<&ExitPolicy>,
) -> Result<(Vec<IterVars>, Vec<GateDecision>)> {
    if max_iters == 0 {
        return Err(Error::param("max_iters must be ≥ 1"));
    }
    let ctx = flow::encode_context(tape, bound, window.pre[1])?;
    let mut feat = [window.pre[0]; 3];
    for i in 0..3 {
        feat[i] = flow::encode_features(tape, bound, window.pre[i], window.noisy[i])?;
    }
    let mut states = [FlowState::new(tape, bound, ctx, feat[1], feat[0])?, FlowState::new(tape, bound, ctx, feat[1], feat[2])?];
    let feats = recon::WindowFeatures::new(tape, bound, window)?;
    let mut r = feats.reference;
    let mut out = Vec::new();
    let mut decisions = Vec::new();
    for k in 1..=max_iters {
        let flows = [states[0].step(tape, bound, cfg, ctx)?, states[1].step(tape, bound, cfg, ctx)?];
        let it = recon::iterate(tape, bound, cfg, &feats, window.pre[1], r, flows)?;
        r = it.r;
        out.push(IterVars { flows, r: it.r, s: it.s, u: it.u });
        if let Some(p) = policy {
            let d = decide_exit(tape.value(it.u), p, k)?;
            let exit = d.exit;
            decisions.push(d);
            if exit {
                break;
            }
        }
    }
    Ok((out, decisions))
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".model");
    PathBuf::from(s)
}

/// Parameters plus architecture, for tape-free inference.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamSet,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&cfg, seed)?;
        Ok(Model { cfg, params })
    }

    pub fn from_params(params: ParamSet, patch: usize) -> Result<Self> {
        let cfg = ModelConfig::infer(&params, patch)?;
        let expected = init_params(&cfg, 0)?;
        for (name, t) in expected.iter() {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::param(format!("`{name}` has shape {:?}, architecture wants {:?}", got.shape(), t.shape())));
            }
        }
        if params.len() != expected.len() {
            return Err(Error::param(format!("{} parameters, architecture has {}", params.len(), expected.len())));
        }
        Ok(Model { cfg, params })
    }

    /// Writes the parameters and a `<path>.model` architecture file beside them.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.params.save(path)?;
        let side = sidecar(path);
        std::fs::write(&side, self.cfg.to_config_text()).map_err(|e| Error::io(side, e))
    }

    /// Reads parameters; the architecture comes from the sidecar when present and is
    /// otherwise inferred with the default patch size.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let params = ParamSet::load(path)?;
        let side = sidecar(path);
        let patch = if side.is_file() { Config::load(&side)?.get_or("patch", ModelConfig::default().patch)? } else { ModelConfig::default().patch };
        Self::from_params(params, patch)
    }

    fn bind_all(&self, tape: &mut Tape) -> Bound {
        // inference: nothing needs gradients
        self.params.bind(tape, |_| true)
    }

    pub fn predenoise(&self, frame: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind_all(&mut tape);
        let x = tape.constant(nn::batched(frame)?);
        let y = predenoise::forward(&mut tape, &bound, x)?;
        nn::unstack(tape.value(y), 0)
    }

    fn window(&self, tape: &mut Tape, t: &PatchTriplet) -> Result<WindowVars> {
        let p = self.cfg.patch;
        if t.ref_noisy.shape() != [self.cfg.channels, p, p] {
            return Err(Error::param(format!(
                "patch shape {:?} does not match model [{}, {p}, {p}]",
                t.ref_noisy.shape(),
                self.cfg.channels
            )));
        }
        let noisy = [&t.sup_noisy[0], &t.ref_noisy, &t.sup_noisy[1]];
        let pre = [&t.sup_pre[0], &t.ref_pre, &t.sup_pre[1]];
        let mut vars = |ts: [&Tensor; 3]| -> Result<[Var; 3]> {
            Ok([tape.constant(nn::batched(ts[0])?), tape.constant(nn::batched(ts[1])?), tape.constant(nn::batched(ts[2])?)])
        };
        Ok(WindowVars { noisy: vars(noisy)?, pre: vars(pre)? })
    }

    /// Flow iterates `f_1..f_n` toward frame t−1 and t+1.
    pub fn refine_flow(&self, triplet: &PatchTriplet, n_iters: usize) -> Result<[Vec<FlowField>; 2]> {
        if n_iters == 0 {
            return Err(Error::param("n_iters must be ≥ 1"));
        }
        let mut tape = Tape::new();
        let bound = self.bind_all(&mut tape);
        let w = self.window(&mut tape, triplet)?;
        let ctx = flow::encode_context(&mut tape, &bound, w.pre[1])?;
        let ref_feat = flow::encode_features(&mut tape, &bound, w.pre[1], w.noisy[1])?;
        let mut out = [Vec::new(), Vec::new()];
        for (side, frame) in [(0, 0), (1, 2)] {
            let sup_feat = flow::encode_features(&mut tape, &bound, w.pre[frame], w.noisy[frame])?;
            let iterates = flow::refine_flow(&mut tape, &bound, &self.cfg, ctx, ref_feat, sup_feat, n_iters)?;
            for (k, f) in iterates.into_iter().enumerate() {
                out[side].push(FlowField { flow: nn::unstack(tape.value(f), 0)?, iteration: k + 1 });
            }
        }
        Ok(out)
    }

    /// Full cascade on one triplet. Gating follows `policy`; with `policy.enabled`
    /// false every iteration up to `policy.max_iters` runs.
    pub fn denoise_triplet(&self, triplet: &PatchTriplet, policy: &ExitPolicy) -> Result<(Vec<IterationOutput>, Vec<GateDecision>)> {
        let mut tape = Tape::new();
        let bound = self.bind_all(&mut tape);
        let w = self.window(&mut tape, triplet)?;
        let (iters, decisions) = forward(&mut tape, &bound, &self.cfg, &w, policy.max_iters, Some(policy))?;
        let outputs = iters
            .iter()
            .enumerate()
            .map(|(k, it)| {
                Ok(IterationOutput {
                    r_next: nn::unstack(tape.value(it.r), 0)?,
                    s: nn::unstack(tape.value(it.s), 0)?,
                    u: nn::unstack(tape.value(it.u), 0)?,
                    flows: [
                        FlowField { flow: nn::unstack(tape.value(it.flows[0]), 0)?, iteration: k + 1 },
                        FlowField { flow: nn::unstack(tape.value(it.flows[1]), 0)?, iteration: k + 1 },
                    ],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((outputs, decisions))
    }
}
