//! Central-difference verification of input gradients.

use crate::attribution::loss_gradient;
use crate::error::{Error, Result};
use crate::model::{GradModel, GradTargets, Pass};

use super::{Reduction, Tape};

/// Relative errors are measured against `max(|numeric|, GRADCHECK_FLOOR)`.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

const PERTURBATION_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Index of the coordinate with the largest error.
    pub worst_index: Option<usize>,
    pub compared: usize,
    /// Coordinates skipped because `x +- step` changes a ReLU sign, a
    /// max-pool winner or the BCE clamp state, where the loss is not
    /// differentiable. All coordinates are skipped when the clamp is already
    /// active at `x`.
    pub excluded: usize,
}

/// Compares the autodiff input gradient of `model`'s loss at `(x, label)`
/// against central differences with the given `step`, in eval mode.
pub fn finite_diff_check(
    model: &GradModel<f64>,
    x: &[f64],
    label: usize,
    step: f64,
) -> Result<GradCheckReport> {
    if step.is_nan() || step <= 0.0 {
        return Err(Error::Config(format!(
            "finite-difference step {step} must be positive"
        )));
    }
    let analytic = loss_gradient(model, x, label)?;
    let (base_signature, clamped) = {
        let (sigs, _, clamped) = signatures_and_losses(model, x, 1, label)?;
        (sigs[0], clamped[0])
    };

    let n = x.len();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: None,
        compared: 0,
        excluded: 0,
    };
    if clamped {
        report.excluded = n;
        return Ok(report);
    }
    let coords: Vec<usize> = (0..n).collect();
    for chunk in coords.chunks(PERTURBATION_CHUNK) {
        // rows: x + step e_i, then x - step e_i, for each i in the chunk
        let mut batch = Vec::with_capacity(2 * chunk.len() * n);
        for sign in [1.0, -1.0] {
            for &i in chunk {
                let mut xi = x.to_vec();
                xi[i] += sign * step;
                batch.extend_from_slice(&xi);
            }
        }
        let (sigs, losses, _) = signatures_and_losses(model, &batch, 2 * chunk.len(), label)?;
        for (j, &i) in chunk.iter().enumerate() {
            let (plus, minus) = (j, chunk.len() + j);
            if sigs[plus] != base_signature || sigs[minus] != base_signature {
                report.excluded += 1;
                continue;
            }
            let numeric = (losses[plus] - losses[minus]) / (2.0 * step);
            let err = (analytic[i] - numeric).abs() / numeric.abs().max(GRADCHECK_FLOOR);
            report.compared += 1;
            if err > report.max_rel_error || report.worst_index.is_none() {
                report.max_rel_error = err;
                report.worst_index = Some(i);
            }
        }
    }
    Ok(report)
}

fn signatures_and_losses(
    model: &GradModel<f64>,
    xs: &[f64],
    batch: usize,
    label: usize,
) -> Result<(Vec<u64>, Vec<f64>, Vec<bool>)> {
    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, xs, batch, GradTargets::default(), Pass::Eval)?;
    let labels = vec![label; batch];
    let loss = model.loss_node(&mut tape, &fwd, &labels, Reduction::None)?;
    Ok((
        tape.kink_signatures(batch),
        tape.value(loss).data().to_vec(),
        tape.bce_clamped(batch),
    ))
}
