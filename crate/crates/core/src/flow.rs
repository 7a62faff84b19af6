//! Iterative flow refinement: feature and context encoders, the correlation pyramid,
//! windowed lookup, and the convolutional GRU update operator.

use cascade_tensor::{Bound, ParamSet, Tape, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{rescale, ModelConfig, PYRAMID_LEVELS};
use crate::nn::{conv, conv_relu};

pub const PREFIX: &str = "flow.";

/// Flow at feature resolution, `[2,h,w]` (x then y displacement). Iteration 0 is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub flow: Tensor,
    pub iteration: usize,
}

impl FlowField {
    /// Mean endpoint error against a uniform displacement, in the same units.
    pub fn endpoint_error(&self, truth: (f64, f64)) -> f64 {
        let d = self.flow.data();
        let n = d.len() / 2;
        (0..n).map(|i| ((d[i] - truth.0).powi(2) + (d[n + i] - truth.1).powi(2)).sqrt()).sum::<f64>() / n as f64
    }
}

/// Level `l` (0-based) is `[B, h·w, h/2^l, w/2^l]`.
#[derive(Debug, Clone)]
pub struct CorrelationPyramid {
    pub levels: Vec<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct GruStep {
    pub h: Var,
    pub z: Var,
    pub r: Var,
    pub delta: Var,
}

pub(crate) fn init(ps: &mut ParamSet, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    let (c, d, cc, hid) = (cfg.channels, cfg.feat_dim, cfg.ctx_dim, cfg.hidden);
    ps.init_conv("flow.fenc1", d / 2, 2 * c, 3, rng)?;
    ps.init_conv("flow.fenc2", d, d / 2, 3, rng)?;
    ps.init_conv("flow.fenc3", d, d, 3, rng)?;
    ps.init_conv("flow.cenc1", cc / 2, c, 3, rng)?;
    ps.init_conv("flow.cenc2", cc, cc / 2, 3, rng)?;
    ps.init_conv("flow.cenc3", cc, cc, 3, rng)?;
    ps.init_conv("flow.hinit", hid, cc, 1, rng)?;
    let xin = hid + cfg.gru_input();
    for gate in ["flow.gru_z", "flow.gru_r", "flow.gru_q"] {
        ps.init_conv(gate, hid, xin, 3, rng)?;
    }
    ps.init_conv("flow.head1", hid, hid, 3, rng)?;
    ps.init_conv("flow.head2", 2, hid, 3, rng)?;
    rescale(ps, "flow.head2.weight", 0.1)
}

fn check_even(tape: &Tape, op: &'static str, x: Var) -> Result<()> {
    let s = tape.shape(x);
    if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
        return Err(Error::Tensor(cascade_tensor::TensorError::Dimension {
            op,
            detail: format!("patch shape {s:?} needs even extents on axes 2,3"),
        }));
    }
    Ok(())
}

/// Correlation features at half resolution from a stacked pre-denoised/noisy patch.
pub fn encode_features(tape: &mut Tape, bound: &Bound, pre: Var, noisy: Var) -> Result<Var> {
    check_even(tape, "encode_features", pre)?;
    let x = tape.concat(&[pre, noisy])?;
    let x = conv_relu(tape, bound, "flow.fenc1", x, 1)?;
    let x = conv_relu(tape, bound, "flow.fenc2", x, 2)?;
    let x = conv(tape, bound, "flow.fenc3", x, 1)?;
    Ok(tape.instance_norm(x, 1e-5)?)
}

/// Context features of the reference patch at half resolution.
pub fn encode_context(tape: &mut Tape, bound: &Bound, reference: Var) -> Result<Var> {
    check_even(tape, "encode_context", reference)?;
    let x = conv_relu(tape, bound, "flow.cenc1", reference, 1)?;
    let x = conv_relu(tape, bound, "flow.cenc2", x, 2)?;
    conv_relu(tape, bound, "flow.cenc3", x, 1)
}

pub fn build_corr_pyramid(tape: &mut Tape, feat1: Var, feat2: Var) -> Result<CorrelationPyramid> {
    let mut levels = vec![tape.correlation(feat1, feat2)?];
    for _ in 1..PYRAMID_LEVELS {
        let last = *levels.last().expect("nonempty");
        levels.push(tape.avg_pool2(last)?);
    }
    Ok(CorrelationPyramid { levels })
}

/// `(2r+1)²` samples per level around the flow-displaced position; flow is not differentiated.
pub fn lookup(tape: &mut Tape, pyr: &CorrelationPyramid, flow: &Tensor, radius: usize) -> Result<Var> {
    Ok(tape.lookup(&pyr.levels, flow, radius)?)
}

/// One GRU step on `[h, x]`; returns the new hidden state, both gates and the flow update.
pub fn gru_update(tape: &mut Tape, bound: &Bound, h: Var, x: Var) -> Result<GruStep> {
    let hx = tape.concat(&[h, x])?;
    let z = conv(tape, bound, "flow.gru_z", hx, 1)?;
    let z = tape.sigmoid(z)?;
    let r = conv(tape, bound, "flow.gru_r", hx, 1)?;
    let r = tape.sigmoid(r)?;
    let rh = tape.mul(r, h)?;
    let rhx = tape.concat(&[rh, x])?;
    let q = conv(tape, bound, "flow.gru_q", rhx, 1)?;
    let q = tape.tanh(q)?;
    // h + z·(q − h) == (1 − z)·h + z·q
    let dq = tape.sub(q, h)?;
    let zdq = tape.mul(z, dq)?;
    let h_new = tape.add(h, zdq)?;
    let d = conv_relu(tape, bound, "flow.head1", h_new, 1)?;
    let delta = conv(tape, bound, "flow.head2", d, 1)?;
    Ok(GruStep { h: h_new, z, r, delta })
}

/// Refinement state for one supporting frame.
#[derive(Debug, Clone)]
pub struct FlowState {
    pub pyramid: CorrelationPyramid,
    pub hidden: Var,
    /// Current iterate `f_k`, `[B,2,h,w]`.
    pub flow: Var,
    pub iteration: usize,
}

impl FlowState {
    pub fn new(tape: &mut Tape, bound: &Bound, ctx: Var, ref_feat: Var, sup_feat: Var) -> Result<Self> {
        let pyramid = build_corr_pyramid(tape, ref_feat, sup_feat)?;
        let h0 = conv(tape, bound, "flow.hinit", ctx, 1)?;
        let hidden = tape.tanh(h0)?;
        let s = tape.shape(ref_feat).to_vec();
        let flow = tape.constant(Tensor::zeros([s[0], 2, s[2], s[3]]));
        Ok(FlowState { pyramid, hidden, flow, iteration: 0 })
    }

    /// Advances to `f_{k+1} = f_k + Δf_k` and returns it.
    pub fn step(&mut self, tape: &mut Tape, bound: &Bound, cfg: &ModelConfig, ctx: Var) -> Result<Var> {
        let current = tape.value(self.flow).clone();
        let corr = lookup(tape, &self.pyramid, &current, cfg.radius)?;
        let corr = tape.scale(corr, 1.0 / (cfg.feat_dim as f64).sqrt())?;
        let f_in = tape.detach(self.flow);
        let x = tape.concat(&[corr, f_in, ctx])?;
        let st = gru_update(tape, bound, self.hidden, x)?;
        self.hidden = st.h;
        self.flow = tape.add(self.flow, st.delta)?;
        self.iteration += 1;
        Ok(self.flow)
    }
}

/// `n_iters` iterates for one supporting frame, weights shared across iterations.
pub fn refine_flow(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    ctx: Var,
    ref_feat: Var,
    sup_feat: Var,
    n_iters: usize,
) -> Result<Vec<Var>> {
    if n_iters == 0 {
        return Err(Error::param("n_iters must be ≥ 1"));
    }
    let mut st = FlowState::new(tape, bound, ctx, ref_feat, sup_feat)?;
    (0..n_iters).map(|_| st.step(tape, bound, cfg, ctx)).collect()
}
