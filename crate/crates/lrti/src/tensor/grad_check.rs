//! Finite-difference verification of tape gradients.
//!
//! The oracle is the central difference `(f(x+h) - f(x-h)) / 2h` evaluated in
//! 64-bit with no recording active, so it shares no code path with the tape's
//! reverse sweep.

use super::{Recording, Tensor};
use crate::error::{Error, Result};
use crate::rng::SplitRng;

/// Outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `(max relative error, max absolute error)` per checked input.
    pub per_input: Vec<(f64, f64)>,
    pub max_rel: f64,
    pub max_abs: f64,
}

impl GradCheckReport {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel <= rel_tol
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compare tape gradients of `f` against central differences at every
/// coordinate of every input. `f` must be a pure function producing a scalar.
pub fn grad_check<F>(f: &F, inputs: &[Tensor<f64>], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let all: Vec<Vec<usize>> = inputs
        .iter()
        .map(|t| (0..t.numel()).collect())
        .collect();
    check_coords(f, inputs, step, &all)
}

/// Like [`grad_check`] but verifying at most `coords_per_input` randomly
/// chosen coordinates of each input — the only affordable option for
/// whole-model checks.
pub fn grad_check_sampled<F>(
    f: &F,
    inputs: &[Tensor<f64>],
    step: f64,
    coords_per_input: usize,
    rng: &mut SplitRng,
) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let coords: Vec<Vec<usize>> = inputs
        .iter()
        .map(|t| {
            let n = t.numel();
            if n <= coords_per_input {
                (0..n).collect()
            } else {
                let mut picked: Vec<usize> =
                    (0..coords_per_input).map(|_| rng.below(n as u64) as usize).collect();
                picked.sort_unstable();
                picked.dedup();
                picked
            }
        })
        .collect();
    check_coords(f, inputs, step, &coords)
}

fn check_coords<F>(
    f: &F,
    inputs: &[Tensor<f64>],
    step: f64,
    coords: &[Vec<usize>],
) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    if Recording::<f64>::is_active() {
        return Err(Error::Usage(
            "grad_check cannot run inside an active recording".into(),
        ));
    }

    // Fresh gradient leaves so the caller's tensors keep their ancestry.
    let params: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|t| Tensor::param(t.shape(), t.data().to_vec()))
        .collect::<Result<_>>()?;

    let rec = Recording::<f64>::start()?;
    let loss = f(&params)?;
    if loss.numel() != 1 {
        drop(rec);
        return Err(Error::Usage(format!(
            "grad_check requires a scalar-valued function, got shape {:?}",
            loss.shape()
        )));
    }
    let grads = rec.backward(&loss)?;

    let eval = |probe: &[Tensor<f64>]| -> Result<f64> {
        let out = f(probe)?;
        Ok(out.item()?)
    };

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut max_rel = 0.0f64;
    let mut max_abs = 0.0f64;
    for (pi, param) in params.iter().enumerate() {
        let analytic = grads.get_or_zeros(param);
        let mut in_rel = 0.0f64;
        let mut in_abs = 0.0f64;
        for &ci in &coords[pi] {
            let mut probe: Vec<Tensor<f64>> = params.to_vec();
            let mut plus = param.data().to_vec();
            plus[ci] += step;
            probe[pi] = Tensor::from_vec(param.shape(), plus)?;
            let lp = eval(&probe)?;
            let mut minus = param.data().to_vec();
            minus[ci] -= step;
            probe[pi] = Tensor::from_vec(param.shape(), minus)?;
            let lm = eval(&probe)?;
            let fd = (lp - lm) / (2.0 * step);
            let a = analytic[ci];
            in_rel = in_rel.max(rel_err(a, fd));
            in_abs = in_abs.max((a - fd).abs());
        }
        max_rel = max_rel.max(in_rel);
        max_abs = max_abs.max(in_abs);
        per_input.push((in_rel, in_abs));
    }

    Ok(GradCheckReport {
        per_input,
        max_rel,
        max_abs,
    })
}
