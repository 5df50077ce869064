//! The two update rules used in this crate: bias-corrected Adam for training
//! and attacks, and the signed step for the iterative sign-gradient attack.

use super::GraphError;

/// Bias-corrected first/second moment state for one parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step_count: u64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }
}

/// One Adam update: `params ← params − lr·m̂/(√v̂ + ε)`.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
) -> Result<(), GraphError> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(GraphError::ShapeMismatch {
            op: "adam_step",
            detail: format!(
                "params {}, grads {}, state {}",
                params.len(),
                grads.len(),
                state.first_moment.len()
            ),
        });
    }
    if lr <= 0.0 {
        return Err(GraphError::InvalidArgument(format!(
            "learning rate must be positive, got {lr}"
        )));
    }
    state.step_count += 1;
    let t = state.step_count as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    for i in 0..params.len() {
        let g = grads[i];
        let m = state.beta1 * state.first_moment[i] + (1.0 - state.beta1) * g;
        let v = state.beta2 * state.second_moment[i] + (1.0 - state.beta2) * g * g;
        state.first_moment[i] = m;
        state.second_moment[i] = v;
        params[i] -= lr * (m / bc1) / ((v / bc2).sqrt() + state.epsilon);
    }
    Ok(())
}

/// `δ ← δ − β·sign(grad)`, with sign(0) = 0.
pub fn sign_step(delta: &mut [f64], grad: &[f64], beta: f64) -> Result<(), GraphError> {
    if delta.len() != grad.len() {
        return Err(GraphError::ShapeMismatch {
            op: "sign_step",
            detail: format!("delta {}, grad {}", delta.len(), grad.len()),
        });
    }
    if beta <= 0.0 {
        return Err(GraphError::InvalidArgument(format!(
            "step size must be positive, got {beta}"
        )));
    }
    for (d, &g) in delta.iter_mut().zip(grad) {
        if g > 0.0 {
            *d -= beta;
        } else if g < 0.0 {
            *d += beta;
        }
    }
    Ok(())
}
