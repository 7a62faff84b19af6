//! Uncertainty-weighted objective and the per-patch early-exit controller.

use cascade_tensor::ops::loss::eu_forward;
use cascade_tensor::{EuForm, Tape, Tensor, TensorError, Var};

use crate::error::{Error, Result};

/// Which side of the threshold ends the cascade.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExitPolarity {
    /// Exit once mean σ² drops below the threshold.
    #[default]
    LowUncertainty,
    /// Exit once mean σ² exceeds the threshold.
    HighUncertainty,
}

impl std::str::FromStr for ExitPolarity {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "low" => Ok(ExitPolarity::LowUncertainty),
            "high" => Ok(ExitPolarity::HighUncertainty),
            _ => Err(format!("unknown polarity `{s}` (want low or high)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExitPolicy {
    pub enabled: bool,
    /// Mean-σ² threshold. `0` never exits early; `+∞` always exits after one iteration.
    pub threshold: f64,
    pub max_iters: usize,
    pub polarity: ExitPolarity,
}

impl Default for ExitPolicy {
    fn default() -> Self {
        ExitPolicy { enabled: true, threshold: 0.002, max_iters: 12, polarity: ExitPolarity::LowUncertainty }
    }
}

impl ExitPolicy {
    pub fn new(enabled: bool, threshold: f64, max_iters: usize) -> Result<Self> {
        let p = ExitPolicy { enabled, threshold, max_iters, ..Default::default() };
        p.validate()?;
        Ok(p)
    }

    pub fn disabled(max_iters: usize) -> Self {
        ExitPolicy { enabled: false, max_iters, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold >= 0.0) {
            return Err(Error::param(format!("exit threshold {} must be ≥ 0", self.threshold)));
        }
        if self.max_iters == 0 {
            return Err(Error::param("max_iters must be ≥ 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateDecision {
    pub mean_uncertainty: f64,
    pub exit: bool,
    pub iteration: usize,
}

fn as4(t: &Tensor) -> Result<[usize; 4]> {
    match t.rank() {
        3 => {
            let [c, h, w] = t.dims3("eu_loss")?;
            Ok([1, c, h, w])
        }
        _ => Ok(t.dims4("eu_loss")?),
    }
}

/// Mean over pixels of `‖s − g‖₂ / (2σ²) + ½ ln σ²` with `σ² = exp(log_var)`.
/// Accepts `[C,H,W]` or batched `[B,C,H,W]` patches; `log_var` has one channel.
pub fn eu_loss(s: &Tensor, g: &Tensor, log_var: &Tensor, form: EuForm) -> Result<f64> {
    let [b, c, h, w] = as4(s)?;
    if s.shape() != g.shape() {
        return Err(TensorError::Dimension { op: "eu_loss", detail: format!("{:?} vs {:?}", s.shape(), g.shape()) }.into());
    }
    let [lb, lc, lh, lw] = as4(log_var)?;
    if [lb, lc, lh, lw] != [b, 1, h, w] {
        return Err(TensorError::Dimension { op: "eu_loss", detail: format!("log-variance {:?} for patch {:?}", log_var.shape(), s.shape()) }.into());
    }
    if !log_var.is_finite() {
        return Err(Error::param("non-finite log-variance"));
    }
    Ok(eu_forward(form, b, c, h * w, s.data(), g.data(), log_var.data()))
}

/// Weights `γ^{N−k}` for iterations `k = 1..=len`.
pub fn loss_weights(len: usize, gamma: f64, n_max: usize) -> Result<Vec<f64>> {
    if len == 0 {
        return Err(Error::param("no per-iteration losses"));
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::param(format!("gamma {gamma} outside (0, 1]")));
    }
    if len > n_max {
        return Err(Error::param(format!("{len} losses for at most {n_max} iterations")));
    }
    Ok((1..=len).map(|k| gamma.powi((n_max - k) as i32)).collect())
}

/// `Σ_k γ^{N−k} L_k`.
pub fn total_loss(per_iter: &[f64], gamma: f64, n_max: usize) -> Result<f64> {
    let w = loss_weights(per_iter.len(), gamma, n_max)?;
    Ok(per_iter.iter().zip(&w).map(|(l, w)| l * w).sum())
}

/// [`total_loss`] recorded on a tape.
pub fn total_loss_var(tape: &mut Tape, per_iter: &[Var], gamma: f64, n_max: usize) -> Result<Var> {
    let w = loss_weights(per_iter.len(), gamma, n_max)?;
    let mut acc = tape.scale(per_iter[0], w[0])?;
    for (&l, &wk) in per_iter.iter().zip(&w).skip(1) {
        let term = tape.scale(l, wk)?;
        acc = tape.add(acc, term)?;
    }
    Ok(acc)
}

/// Exit when the gate fires (per polarity) or the iteration cap is reached.
pub fn decide_exit(u: &Tensor, policy: &ExitPolicy, iteration: usize) -> Result<GateDecision> {
    if iteration == 0 {
        return Err(Error::param("iterations are numbered from 1"));
    }
    if u.numel() == 0 {
        return Err(Error::param("empty uncertainty map"));
    }
    let mean_uncertainty = u.data().iter().map(|v| v.exp()).sum::<f64>() / u.numel() as f64;
    let fires = match policy.polarity {
        ExitPolarity::LowUncertainty => mean_uncertainty < policy.threshold,
        ExitPolarity::HighUncertainty => mean_uncertainty > policy.threshold,
    };
    let exit = (policy.enabled && fires) || iteration >= policy.max_iters;
    Ok(GateDecision { mean_uncertainty, exit, iteration })
}

/// `1 − mean exit iteration / max_iters`, one decision list per patch.
pub fn compute_savings(decisions: &[Vec<GateDecision>], max_iters: usize) -> Result<f64> {
    let exits = decisions
        .iter()
        .map(|d| d.last().map(|g| g.iteration).ok_or_else(|| Error::param("patch without decisions")))
        .collect::<Result<Vec<_>>>()?;
    savings_from_iterations(&exits, max_iters)
}

pub fn savings_from_iterations(exits: &[usize], max_iters: usize) -> Result<f64> {
    if exits.is_empty() || max_iters == 0 {
        return Err(Error::param("no patches to compute savings over"));
    }
    let mean = exits.iter().sum::<usize>() as f64 / exits.len() as f64;
    Ok(1.0 - mean / max_iters as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(v: f64) -> Tensor {
        Tensor::full([1, 2, 2], v.ln())
    }

    #[test]
    fn exits_on_low_uncertainty_or_cap() {
        let p = ExitPolicy::default();
        assert!(decide_exit(&map(0.001), &p, 1).unwrap().exit);
        assert!(!decide_exit(&map(0.01), &p, 3).unwrap().exit);
        assert!(decide_exit(&map(0.01), &p, 12).unwrap().exit);
        let off = ExitPolicy { enabled: false, ..p };
        assert!(!decide_exit(&map(0.001), &off, 11).unwrap().exit);
        let high = ExitPolicy { polarity: ExitPolarity::HighUncertainty, ..p };
        assert!(decide_exit(&map(0.01), &high, 1).unwrap().exit);
        assert!(decide_exit(&map(0.01), &p, 0).is_err());
    }

    #[test]
    fn savings_examples() {
        let d = |k| vec![GateDecision { mean_uncertainty: 0.0, exit: true, iteration: k }];
        assert_eq!(compute_savings(&[d(12), d(12)], 12).unwrap(), 0.0);
        assert!((compute_savings(&[d(1)], 12).unwrap() - 11.0 / 12.0).abs() < 1e-15);
        assert!(compute_savings(&[], 12).is_err());
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(&[1.0, 1.0], 0.8, 2).unwrap(), 1.8);
        assert_eq!(total_loss(&[2.0, 3.0, 4.0], 1.0, 3).unwrap(), 9.0);
        assert_eq!(total_loss(&[2.0], 0.5, 3).unwrap(), 0.5);
        assert!(total_loss(&[], 0.8, 3).is_err());
        assert!(total_loss(&[1.0], 0.0, 3).is_err());
    }
}
