//! Adam with bias correction. One state slot per parameter tensor.

use super::{Tensor, TensorError};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct AdamState {
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// Applies one update to every parameter from its stored gradient, then
/// clears the gradients. Requires every parameter to carry a gradient.
pub fn optimizer_step(params: &mut [Tensor], state: &mut AdamState, lr: f64) -> Result<(), TensorError> {
    if state.m.len() != params.len() {
        return Err(TensorError::OptimizerShape { expected: state.m.len(), actual: params.len() });
    }
    for (index, p) in params.iter().enumerate() {
        match p.grad() {
            None => return Err(TensorError::MissingGradient { index }),
            Some(g) if g.len() != p.numel() => {
                return Err(TensorError::ShapeMismatch {
                    op: "optimizer_step",
                    details: format!("parameter {index} has {} elements but gradient has {}", p.numel(), g.len()),
                })
            }
            Some(_) => {}
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    for (index, p) in params.iter_mut().enumerate() {
        let grad = p.take_grad().expect("checked above");
        let m = &mut state.m[index];
        let v = &mut state.v[index];
        let data = p.data_mut();
        for j in 0..grad.len() {
            let g = grad[j];
            m[j] = BETA1 * m[j] + (1.0 - BETA1) * g;
            v[j] = BETA2 * v[j] + (1.0 - BETA2) * g * g;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            data[j] -= lr * mhat / (vhat.sqrt() + EPS);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(values: &[f64]) -> Tensor {
        Tensor::from_vec(&[values.len()], values.to_vec()).unwrap().with_grad()
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = param(&[1.0, -2.0, 3.0]);
        p.accumulate_grad(&[0.0, 0.0, 0.0]);
        let mut state = AdamState::new(std::slice::from_ref(&p));
        let mut params = [p];
        optimizer_step(&mut params, &mut state, 1e-3).unwrap();
        assert_eq!(params[0].data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn first_step_moves_against_gradient_sign_by_lr() {
        let mut p = param(&[0.0, 0.0]);
        p.accumulate_grad(&[0.004, -9.0]);
        let mut state = AdamState::new(std::slice::from_ref(&p));
        let mut params = [p];
        optimizer_step(&mut params, &mut state, 1e-3).unwrap();
        // With bias correction the first update is lr * g / (|g| + eps),
        // which is -lr * sign(g) up to the epsilon.
        assert!((params[0].data()[0] + 1e-3).abs() < 1e-6);
        assert!((params[0].data()[1] - 1e-3).abs() < 1e-6);
        assert!(params[0].grad().is_none(), "gradients are cleared after the step");
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let p = param(&[1.0]);
        let mut state = AdamState::new(std::slice::from_ref(&p));
        let mut params = [p];
        let err = optimizer_step(&mut params, &mut state, 1e-3).unwrap_err();
        assert!(matches!(err, TensorError::MissingGradient { index: 0 }));
    }

    #[test]
    fn converges_on_a_quadratic() {
        let mut params = [param(&[10.0])];
        let mut state = AdamState::new(&params);
        for _ in 0..4000 {
            let x = params[0].data()[0];
            params[0].accumulate_grad(&[2.0 * (x - 3.0)]);
            optimizer_step(&mut params, &mut state, 0.05).unwrap();
        }
        assert!((params[0].data()[0] - 3.0).abs() < 1e-3);
    }
}
