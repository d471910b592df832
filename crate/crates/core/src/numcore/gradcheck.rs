//! Central finite-difference verification of tape gradients.
//!
//! The checker runs at `f64` with step `1e-5`, perturbing every element of
//! every input and comparing the two-sided difference quotient against the
//! analytic gradient from one backward pass. It reports the max relative
//! error per input rather than failing fast, so a report can be printed.

use super::tape::{Tape, ValueId};
use super::tensor::Tensor;
use crate::Result;

const FD_STEP: f64 = 1e-5;

/// Relative-error floor: below this magnitude the comparison degrades to an
/// absolute one, so roundoff on near-zero gradients cannot fail the check.
const REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct InputReport {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub per_input: Vec<InputReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.per_input.iter().all(|r| r.max_rel_err < self.tolerance)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.per_input
            .iter()
            .map(|r| r.max_rel_err)
            .fold(0.0, f64::max)
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for r in &self.per_input {
            writeln!(
                f,
                "{}: max rel err {:.3e} at [{}] (analytic {:.6e}, numeric {:.6e}) — {}",
                r.name,
                r.max_rel_err,
                r.worst_index,
                r.analytic,
                r.numeric,
                if r.max_rel_err < self.tolerance { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

/// Element-wise comparison of analytic vs numeric gradients; returns
/// `(max_rel_err, worst_index)`.
pub fn compare_gradients(analytic: &[f64], numeric: &[f64]) -> (f64, usize) {
    let mut worst = (0.0f64, 0usize);
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR);
        if rel > worst.0 {
            worst = (rel, i);
        }
    }
    worst
}

/// Checks the gradient of a scalar-valued tape program w.r.t. every input.
///
/// `f` must build a deterministic forward pass: it is re-invoked on a fresh
/// tape for every finite-difference probe, so any randomness inside must be
/// seeded per call.
pub fn grad_check<B>(inputs: &[(&str, Tensor<f64>)], build: B, tolerance: f64) -> Result<GradCheckReport>
where
    B: Fn(&mut Tape<f64>, &[ValueId]) -> Result<ValueId>,
{
    // Analytic gradients from one tape.
    let tracked: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|(_, t)| t.clone().with_grad())
        .collect();
    let mut tape = Tape::new();
    let ids: Vec<ValueId> = tracked.iter().map(|t| tape.leaf(t)).collect();
    let out = build(&mut tape, &ids)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(&tracked)
        .map(|(&id, t)| tape.grad(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    // Numeric gradients, one forward pair per element.
    let forward = |probe: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<ValueId> = probe.iter().map(|t| tape.leaf(t)).collect();
        let out = build(&mut tape, &ids)?;
        Ok(tape.value(out)[0])
    };

    let mut probe: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut per_input = Vec::with_capacity(inputs.len());
    for (idx, (name, _)) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; probe[idx].numel()];
        for j in 0..numeric.len() {
            let orig = probe[idx].data()[j];
            probe[idx].data_mut()[j] = orig + FD_STEP;
            let plus = forward(&probe)?;
            probe[idx].data_mut()[j] = orig - FD_STEP;
            let minus = forward(&probe)?;
            probe[idx].data_mut()[j] = orig;
            numeric[j] = (plus - minus) / (2.0 * FD_STEP);
        }
        let (max_rel_err, worst_index) = compare_gradients(&analytic[idx], &numeric);
        per_input.push(InputReport {
            name: name.to_string(),
            max_rel_err,
            worst_index,
            analytic: analytic[idx][worst_index],
            numeric: numeric[worst_index],
        });
    }

    Ok(GradCheckReport {
        tolerance,
        per_input,
    })
}
