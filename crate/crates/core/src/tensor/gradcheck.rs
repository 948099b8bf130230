//! Central-difference verification of taped gradients.
//!
//! The same graph-building closure drives both passes: once on a tape for
//! analytic gradients, then twice per parameter element for the numeric
//! estimate. The worst relative error over all elements comes back to the
//! caller, who owns the pass/fail threshold.

use super::{Tape, Tensor, TensorError, ValueId};

/// Numeric gradient of `eval` at the current parameter values, by central
/// differences with half-width `eps`. Parameters are restored afterwards.
pub fn numeric_gradients(
    params: &mut [Tensor],
    eps: f64,
    mut eval: impl FnMut(&[Tensor]) -> Result<f64, TensorError>,
) -> Result<Vec<Vec<f64>>, TensorError> {
    let mut out = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let mut grad = vec![0.0; params[pi].numel()];
        for j in 0..grad.len() {
            let orig = params[pi].data()[j];
            params[pi].data_mut()[j] = orig + eps;
            let hi = eval(params)?;
            params[pi].data_mut()[j] = orig - eps;
            let lo = eval(params)?;
            params[pi].data_mut()[j] = orig;
            grad[j] = (hi - lo) / (2.0 * eps);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Worst relative error `|a - n| / max(|a|, |n|, 1e-8)` over all elements.
pub fn compare_gradients(analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> f64 {
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        for (&av, &nv) in a.iter().zip(n) {
            let denom = av.abs().max(nv.abs()).max(1e-8);
            worst = worst.max((av - nv).abs() / denom);
        }
    }
    worst
}

/// Checks every element of every parameter against central differences.
/// `build` must construct the scalar loss from parameter leaves in order;
/// it runs once on a tape and then repeatedly for the numeric probes.
pub fn grad_check(
    params: &mut [Tensor],
    eps: f64,
    mut build: impl FnMut(&mut Tape, &[ValueId]) -> Result<ValueId, TensorError>,
) -> Result<f64, TensorError> {
    for p in params.iter_mut() {
        p.requires_grad = true;
    }

    let mut tape = Tape::new();
    let ids: Vec<ValueId> = params.iter().map(|p| tape.leaf(p)).collect();
    let loss = build(&mut tape, &ids)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| tape.grad(id).expect("parameter leaves require grad").to_vec())
        .collect();

    let numeric = numeric_gradients(params, eps, |ps| {
        let mut tape = Tape::new();
        let ids: Vec<ValueId> = ps.iter().map(|p| tape.leaf(p)).collect();
        let loss = build(&mut tape, &ids)?;
        Ok(tape.scalar(loss))
    })?;

    Ok(compare_gradients(&analytic, &numeric))
}
