use serde::{Deserialize, Serialize};

use super::PolicyError;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<(), PolicyError> {
    let n = params.len();
    for len in [grads.len(), state.m.len(), state.v.len()] {
        if len != n {
            return Err(PolicyError::ShapeMismatch { expected: n, got: len });
        }
    }
    state.t += 1;
    let c1 = 1.0 - BETA1.powi(state.t as i32);
    let c2 = 1.0 - BETA2.powi(state.t as i32);
    for i in 0..n {
        let g = grads[i];
        state.m[i] = BETA1 * state.m[i] + (1.0 - BETA1) * g;
        state.v[i] = BETA2 * state.v[i] + (1.0 - BETA2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + EPSILON);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = vec![1.0, -2.0];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut s, 0.1).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn first_step_by_hand() {
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
        let mut p = vec![0.0, 0.0];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[3.0, -0.5], &mut s, 1e-3).unwrap();
        assert!((p[0] + 1e-3 * 3.0 / (3.0 + EPSILON)).abs() < 1e-15);
        assert!((p[1] - 1e-3 * 0.5 / (0.5 + EPSILON)).abs() < 1e-15);
    }

    #[test]
    fn state_carries_over() {
        let mut a = vec![0.0];
        let mut sa = AdamState::new(1);
        adam_step(&mut a, &[1.0], &mut sa, 0.1).unwrap();
        adam_step(&mut a, &[-1.0], &mut sa, 0.1).unwrap();
        let mut b = vec![0.0];
        let mut sb = AdamState::new(1);
        adam_step(&mut b, &[0.0], &mut sb, 0.1).unwrap();
        assert_eq!(sa.t, 2);
        assert_ne!(a, b);
        // The second step is not the negation of the first.
        assert!(a[0].abs() > 1e-6);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = vec![0.0; 3];
        assert!(adam_step(&mut p, &[0.0; 2], &mut AdamState::new(3), 0.1).is_err());
        assert!(adam_step(&mut p, &[0.0; 3], &mut AdamState::new(2), 0.1).is_err());
    }
}
