//! Bias-corrected Adam over one flat parameter vector.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub params: AdamParams,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize, params: AdamParams) -> Self {
        Self {
            params,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One Adam update. Non-finite gradients leave everything untouched.
pub fn adam_step(params: &mut [f32], grads: &[f32], state: &mut AdamState, lr: f32) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::LengthMismatch {
            left: params.len(),
            right: grads.len(),
        });
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradients".into()));
    }
    state.t += 1;
    let AdamParams { beta1, beta2, eps } = state.params;
    let bc1 = 1.0 - (beta1 as f64).powi(state.t as i32);
    let bc2 = 1.0 - (beta2 as f64).powi(state.t as i32);
    let step = (lr as f64 / bc1) as f32;
    let bc2_sqrt = bc2.sqrt() as f32;
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        *p -= step * *m / (v.sqrt() / bc2_sqrt + eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = vec![0.5, -2.0];
        let mut s = AdamState::new(2, AdamParams::default());
        adam_step(&mut p, &[0.0, 0.0], &mut s, 0.1).unwrap();
        assert_eq!(p, vec![0.5, -2.0]);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![1.0f32];
        let mut s = AdamState::new(1, AdamParams::default());
        adam_step(&mut p, &[1.0], &mut s, 0.01).unwrap();
        // m_hat / sqrt(v_hat) = 1 after bias correction
        assert!((p[0] - (1.0 - 0.01)).abs() < 1e-6);
    }

    #[test]
    fn rejects_non_finite() {
        let mut p = vec![1.0f32];
        let mut s = AdamState::new(1, AdamParams::default());
        assert!(adam_step(&mut p, &[f32::NAN], &mut s, 0.01).is_err());
        assert_eq!(s.t, 0);
    }

    #[test]
    fn identical_runs_agree() {
        let run = || {
            let mut p = vec![0.3f32, -0.7, 1.2];
            let mut s = AdamState::new(3, AdamParams::default());
            for i in 0..50 {
                let g: Vec<f32> = p.iter().map(|x| x * 0.5 + i as f32 * 0.01).collect();
                adam_step(&mut p, &g, &mut s, 1e-2).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }
}
