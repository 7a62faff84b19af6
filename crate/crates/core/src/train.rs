//! Two-stage toy training: the single-frame pre-denoiser on its own, then the whole
//! cascade under the iteration-weighted uncertainty objective.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use cascade_tensor::{EuForm, ParamSet, Pointwise, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::gate::total_loss_var;
use crate::model::{forward, init_params, ModelConfig, WindowVars};
use crate::nn::stack;
use crate::predenoise;
use crate::synth::{DataSpec, TextureKind, TrainSample};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    /// Joint steps during which the pre-denoiser stays fixed.
    pub freeze_steps: usize,
    pub seed: u64,
    pub gamma: f64,
    pub max_iters: usize,
    /// Exit threshold stored with the run; gating is off while training.
    pub threshold: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Stand-alone pre-denoiser steps before joint training.
    pub pre_steps: usize,
    pub pre_lr: f64,
    /// Weight of the L1 flow supervision term; 0 disables it.
    pub flow_weight: f64,
    pub loss_form: EuForm,
    pub model: ModelConfig,
    pub data: DataSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        TrainConfig {
            steps: 2000,
            lr: 2e-5,
            batch: 1,
            freeze_steps: 300,
            seed: 0,
            gamma: 0.8,
            max_iters: 12,
            threshold: 0.002,
            weight_decay: 1e-4,
            clip_norm: 1.0,
            pre_steps: 300,
            pre_lr: 1e-3,
            flow_weight: 0.1,
            loss_form: EuForm::Printed,
            data: DataSpec {
                channels: model.channels,
                patch: model.patch,
                // inference windows arrive integer-aligned by patch matching
                max_shift: 1.5,
                sigma_min: 0.01,
                sigma_max: 0.12,
                textures: vec![TextureKind::PerlinLike, TextureKind::Checker, TextureKind::Gradient],
            },
            model,
        }
    }
}

impl TrainConfig {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let d = TrainConfig::default();
        let model = ModelConfig::from_config(cfg)?;
        let textures: Vec<String> = cfg.list_or("textures", vec!["perlin".into(), "checker".into(), "gradient".into()])?;
        let textures = textures
            .iter()
            .map(|t| t.parse::<TextureKind>().map_err(Error::Param))
            .collect::<Result<Vec<_>>>()?;
        let loss_form = match cfg.get_or("loss_form", String::from("printed"))?.as_str() {
            "printed" => EuForm::Printed,
            "laplace" => EuForm::Laplace,
            other => return Err(Error::param(format!("unknown loss_form `{other}`"))),
        };
        let t = TrainConfig {
            steps: cfg.get_or("steps", d.steps)?,
            lr: cfg.get_or("lr", d.lr)?,
            batch: cfg.get_or("batch", d.batch)?,
            freeze_steps: cfg.get_or("freeze_steps", d.freeze_steps)?,
            seed: cfg.get_or("seed", d.seed)?,
            gamma: cfg.get_or("gamma", d.gamma)?,
            max_iters: cfg.get_or("max_iters", d.max_iters)?,
            threshold: cfg.get_or("threshold", d.threshold)?,
            weight_decay: cfg.get_or("weight_decay", d.weight_decay)?,
            clip_norm: cfg.get_or("clip_norm", d.clip_norm)?,
            pre_steps: cfg.get_or("pre_steps", d.pre_steps)?,
            pre_lr: cfg.get_or("pre_lr", d.pre_lr)?,
            flow_weight: cfg.get_or("flow_weight", d.flow_weight)?,
            loss_form,
            data: DataSpec {
                channels: model.channels,
                patch: model.patch,
                max_shift: cfg.get_or("max_shift", d.data.max_shift)?,
                sigma_min: cfg.get_or("sigma_min", d.data.sigma_min)?,
                sigma_max: cfg.get_or("sigma_max", d.data.sigma_max)?,
                textures,
            },
            model,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 || self.max_iters == 0 {
            return Err(Error::param("steps, batch and max_iters must be ≥ 1"));
        }
        if !(self.lr >= 0.0 && self.pre_lr >= 0.0 && self.weight_decay >= 0.0 && self.clip_norm > 0.0 && self.flow_weight >= 0.0) {
            return Err(Error::param("learning rates, weight decay and flow weight must be ≥ 0, clip norm > 0"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::param(format!("gamma {} outside (0, 1]", self.gamma)));
        }
        if self.data.channels != self.model.channels || self.data.patch != self.model.patch {
            return Err(Error::param("data and model disagree on channels or patch size"));
        }
        self.model.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay }
    }
}

/// Per-parameter moment estimates and step counts.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Moments {
    state: BTreeMap<String, (u64, Vec<f64>, Vec<f64>)>,
}

/// One AdamW update of every parameter that carries a gradient. Parameters without a
/// gradient (frozen) are left untouched, weight decay included.
pub fn adamw_step(params: &mut ParamSet, moments: &mut Moments, cfg: &AdamConfig) -> Result<()> {
    for (name, p) in params.iter() {
        if let Some(g) = p.grad() {
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::param(format!("non-finite gradient for `{name}` at {i}")));
            }
        }
    }
    for (name, p) in params.iter_mut() {
        let Some(g) = p.grad().map(<[f64]>::to_vec) else { continue };
        let n = g.len();
        let (t, m, v) = moments.state.entry(name.to_owned()).or_insert_with(|| (0, vec![0.0; n], vec![0.0; n]));
        *t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(*t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(*t as i32);
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            *w -= cfg.lr * (cfg.weight_decay * *w + mhat / (vhat.sqrt() + cfg.eps));
        }
    }
    Ok(())
}

/// Global L2 norm of all gradients, scaling them down to `max_norm` when above it.
pub fn clip_gradients(params: &mut ParamSet, max_norm: f64) -> f64 {
    let norm = params.iter().filter_map(|(_, p)| p.grad()).flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, p) in params.iter_mut() {
            if let Some(g) = p.grad().map(|g| g.iter().map(|v| v * s).collect::<Vec<_>>()) {
                p.set_grad(g).expect("same length");
            }
        }
    }
    norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    /// Uncertainty loss of every iteration, before weighting.
    pub iter_losses: Vec<f64>,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    /// Mean endpoint error (patch pixels) of the first and last flow iterate.
    pub epe_first: f64,
    pub epe_last: f64,
    /// Mean σ² of the last iteration.
    pub final_variance: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    /// Pre-denoiser MSE per warm-up step.
    pub pre_losses: Vec<f64>,
    pub steps: Vec<StepRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let n = self.steps.first().map_or(0, |r| r.iter_losses.len());
        let mut out = String::from("step,loss");
        for k in 1..=n {
            write!(out, ",iter_{k}").expect("string write");
        }
        out.push_str(",grad_norm,epe_first,epe_last,final_variance\n");
        for r in &self.steps {
            write!(out, "{},{:.17e}", r.step, r.loss).expect("string write");
            for l in &r.iter_losses {
                write!(out, ",{l:.17e}").expect("string write");
            }
            writeln!(out, ",{:.17e},{:.17e},{:.17e},{:.17e}", r.grad_norm, r.epe_first, r.epe_last, r.final_variance)
                .expect("string write");
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Mean total loss over a step range.
    pub fn mean_loss(&self, range: std::ops::Range<usize>) -> f64 {
        let s = &self.steps[range];
        s.iter().map(|r| r.loss).sum::<f64>() / s.len() as f64
    }
}

fn draw(spec: &DataSpec, rng: &mut ChaCha8Rng, batch: usize) -> Result<Vec<TrainSample>> {
    (0..batch).map(|_| spec.sample(rng)).collect()
}

fn frame_batch(samples: &[TrainSample], pick: impl Fn(&TrainSample) -> &Tensor) -> Result<Tensor> {
    stack(&samples.iter().map(pick).collect::<Vec<_>>())
}

fn mse(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq)?)
}

/// Ground-truth flow at feature resolution toward frame t−1 (side 0) or t+1 (side 1).
fn flow_target(samples: &[TrainSample], side: usize, h: usize) -> Tensor {
    let sign = if side == 0 { -1.0 } else { 1.0 };
    let plane = h * h;
    Tensor::from_fn([samples.len(), 2, h, h], |i| {
        let (b, c) = (i / (2 * plane), (i / plane) % 2);
        let d = if c == 0 { samples[b].shift.0 } else { samples[b].shift.1 };
        sign * d / 2.0
    })
}

fn epe(flow: &Tensor, samples: &[TrainSample], side: usize) -> f64 {
    let sign = if side == 0 { -1.0 } else { 1.0 };
    let per = flow.numel() / samples.len();
    samples
        .iter()
        .enumerate()
        .map(|(b, s)| {
            let f = FlowField { flow: Tensor::new(vec![per], flow.data()[b * per..(b + 1) * per].to_vec()).expect("slice"), iteration: 0 };
            // feature-resolution flow; report in patch pixels
            2.0 * f.endpoint_error((sign * s.shift.0 / 2.0, sign * s.shift.1 / 2.0))
        })
        .sum::<f64>()
        / samples.len() as f64
}

/// Trains from fresh parameters.
pub fn train(cfg: &TrainConfig) -> Result<(ParamSet, TrainLog)> {
    train_with(cfg, |_| {})
}

/// As [`train`], reporting each joint step to `progress`.
pub fn train_with(cfg: &TrainConfig, mut progress: impl FnMut(&StepRecord)) -> Result<(ParamSet, TrainLog)> {
    cfg.validate()?;
    let mut params = init_params(&cfg.model, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_DA7A);
    let mut log = TrainLog::default();
    let is_pre = |n: &str| n.starts_with(predenoise::PREFIX);

    let pre_opt = AdamConfig::new(cfg.pre_lr, cfg.weight_decay);
    let mut pre_moments = Moments::default();
    for step in 0..cfg.pre_steps {
        let samples = draw(&cfg.data, &mut rng, cfg.batch)?;
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, |n| !is_pre(n));
        let noisy = tape.constant(frame_batch(&samples, |s| &s.noisy[1])?);
        let clean = tape.constant(frame_batch(&samples, |s| &s.clean[1])?);
        let out = predenoise::forward(&mut tape, &bound, noisy)?;
        let loss = mse(&mut tape, out, clean)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Diverged { step, loss: value });
        }
        let grads = tape.backward(loss)?;
        params.zero_grad();
        params.accumulate(&bound, &grads)?;
        clip_gradients(&mut params, cfg.clip_norm);
        adamw_step(&mut params, &mut pre_moments, &pre_opt)?;
        log.pre_losses.push(value);
    }

    let opt = AdamConfig::new(cfg.lr, cfg.weight_decay);
    let mut moments = Moments::default();
    let fh = cfg.model.feat_size();
    for step in 0..cfg.steps {
        let samples = draw(&cfg.data, &mut rng, cfg.batch)?;
        let mut tape = Tape::new();
        let frozen = step < cfg.freeze_steps;
        let bound = params.bind(&mut tape, |n| frozen && is_pre(n));
        let (mut noisy, mut pre) = (Vec::with_capacity(3), Vec::with_capacity(3));
        for i in 0..3 {
            let n = tape.constant(frame_batch(&samples, |s| &s.noisy[i])?);
            noisy.push(n);
            pre.push(predenoise::forward(&mut tape, &bound, n)?);
        }
        let noisy: [Var; 3] = noisy.try_into().expect("three frames");
        let pre: [Var; 3] = pre.try_into().expect("three frames");
        let clean = tape.constant(frame_batch(&samples, |s| &s.clean[1])?);
        let window = WindowVars { noisy, pre };
        let (iters, _) = forward(&mut tape, &bound, &cfg.model, &window, cfg.max_iters, None)?;

        let mut eu = Vec::with_capacity(iters.len());
        for it in &iters {
            eu.push(tape.eu_loss(it.s, clean, it.u, cfg.loss_form)?);
        }
        let iter_losses: Vec<f64> = eu.iter().map(|&l| tape.value(l).data()[0]).collect();
        let mut loss = total_loss_var(&mut tape, &eu, cfg.gamma, cfg.max_iters)?;
        if cfg.flow_weight > 0.0 {
            let targets = [flow_target(&samples, 0, fh), flow_target(&samples, 1, fh)];
            let mut per_iter = Vec::with_capacity(iters.len());
            for it in &iters {
                let mut acc: Option<Var> = None;
                for side in 0..2 {
                    let t = tape.constant(targets[side].clone());
                    let d = tape.sub(it.flows[side], t)?;
                    let a = tape.pointwise(d, Pointwise::Abs)?;
                    let m = tape.mean(a)?;
                    acc = Some(match acc {
                        None => m,
                        Some(prev) => tape.add(prev, m)?,
                    });
                }
                per_iter.push(acc.expect("two sides"));
            }
            let flow_loss = total_loss_var(&mut tape, &per_iter, cfg.gamma, cfg.max_iters)?;
            let flow_loss = tape.scale(flow_loss, cfg.flow_weight)?;
            loss = tape.add(loss, flow_loss)?;
        }
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Diverged { step, loss: value });
        }
        let grads = tape.backward(loss)?;
        params.zero_grad();
        params.accumulate(&bound, &grads)?;
        let grad_norm = clip_gradients(&mut params, cfg.clip_norm);
        adamw_step(&mut params, &mut moments, &opt)?;

        let first = &iters[0];
        let last = iters.last().expect("max_iters ≥ 1");
        let epe_of = |it: &crate::model::IterVars| (epe(tape.value(it.flows[0]), &samples, 0) + epe(tape.value(it.flows[1]), &samples, 1)) / 2.0;
        let u = tape.value(last.u);
        let rec = StepRecord {
            step,
            loss: value,
            iter_losses,
            grad_norm,
            epe_first: epe_of(first),
            epe_last: epe_of(last),
            final_variance: u.data().iter().map(|v| v.exp()).sum::<f64>() / u.numel() as f64,
        };
        progress(&rec);
        log.steps.push(rec);
    }
    params.zero_grad();
    Ok((params, log))
}
