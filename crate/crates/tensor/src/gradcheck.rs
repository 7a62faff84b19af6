//! Central-difference verification of tape adjoints.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Maximum relative error per input, with the flat index where it occurred.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: Vec<f64>,
    pub worst_index: Vec<usize>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err.iter().all(|&e| e < self.tol)
    }

    pub fn worst(&self) -> f64 {
        self.max_rel_err.iter().copied().fold(0.0, f64::max)
    }
}

/// Compares the tape gradient of a scalar reduction of `f` against central differences.
///
/// Non-scalar outputs are reduced by a dot product with fixed pseudo-random weights so
/// every output element contributes. Relative error is `|a − n| / max(|a|, |n|, floor)`.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub tol: f64,
    pub step: f64,
    pub floor: f64,
}

impl GradCheck {
    pub fn new(tol: f64) -> Self {
        GradCheck { tol, step: 1e-5, floor: 1e-6 }
    }

    pub fn step(mut self, step: f64) -> Self {
        self.step = step;
        self
    }

    pub fn floor(mut self, floor: f64) -> Self {
        self.floor = floor;
        self
    }

    pub fn run<F>(&self, f: F, inputs: &[Tensor]) -> Result<GradCheckReport>
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        for (i, t) in inputs.iter().enumerate() {
            if let Some(j) = t.data().iter().position(|v| !v.is_finite()) {
                return Err(TensorError::Domain {
                    op: "grad_check",
                    detail: format!("input {i} is non-finite at flat index {j}"),
                });
            }
        }
        let eval = |ins: &[Tensor], want_grad: bool| -> Result<(f64, Vec<Option<Vec<f64>>>)> {
            let mut tape = Tape::new();
            let vars: Vec<Var> = ins.iter().map(|t| tape.leaf(t.clone().with_requires_grad(want_grad))).collect();
            let out = f(&mut tape, &vars)?;
            let loss = reduce(&mut tape, out)?;
            let value = tape.value(loss).data()[0];
            if !want_grad {
                return Ok((value, vec![]));
            }
            let grads = tape.backward(loss)?;
            Ok((value, vars.iter().map(|&v| grads.get(v).map(<[f64]>::to_vec)).collect()))
        };

        let (_, analytic) = eval(inputs, true)?;
        let mut report = GradCheckReport {
            max_rel_err: vec![0.0; inputs.len()],
            worst_index: vec![0; inputs.len()],
            tol: self.tol,
        };
        let mut work: Vec<Tensor> = inputs.to_vec();
        for (i, input) in inputs.iter().enumerate() {
            let zeros = vec![0.0; input.numel()];
            let a = analytic[i].as_deref().unwrap_or(&zeros);
            if let Some(j) = a.iter().position(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite { op: "grad_check", index: j });
            }
            for j in 0..input.numel() {
                let x0 = input.data()[j];
                work[i].data_mut()[j] = x0 + self.step;
                let (fp, _) = eval(&work, false)?;
                work[i].data_mut()[j] = x0 - self.step;
                let (fm, _) = eval(&work, false)?;
                work[i].data_mut()[j] = x0;
                let numeric = (fp - fm) / (2.0 * self.step);
                let denom = a[j].abs().max(numeric.abs()).max(self.floor);
                let err = (a[j] - numeric).abs() / denom;
                if err > report.max_rel_err[i] || err.is_nan() {
                    report.max_rel_err[i] = err;
                    report.worst_index[i] = j;
                }
            }
        }
        Ok(report)
    }
}

fn reduce(tape: &mut Tape, out: Var) -> Result<Var> {
    if tape.value(out).numel() == 1 {
        return Ok(out);
    }
    let shape = tape.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(0x6_72AD);
    let weights = Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0));
    let w = tape.constant(weights);
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

/// Shorthand for [`GradCheck::run`] with default step and floor.
pub fn grad_check<F>(f: F, inputs: &[Tensor], tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    GradCheck::new(tol).run(f, inputs)
}
