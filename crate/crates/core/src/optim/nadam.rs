use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Moment estimates for Nadam, one entry per multiplier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NadamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl NadamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Nadam ascent step: `λ ← λ + α · direction(g)`.
///
/// With bias-corrected moments `m̂ = m/(1−β₁ᵗ)` and `v̂ = v/(1−β₂ᵗ)` the
/// direction is `(β₁ m̂ + (1−β₁) g) / (√v̂ + ε)`, so a fresh state with a
/// unit gradient moves by `α`.
pub fn nadam_step(lambda: &mut [f64], g: &[f64], state: &mut NadamState, alpha: f64) -> Result<()> {
    if g.len() != lambda.len() || state.m.len() != lambda.len() {
        return Err(Error::Shape {
            context: "nadam step",
            expected: lambda.len(),
            got: g.len(),
        });
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalFailure("non-finite dual gradient".into()));
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powf(state.t as f64);
    let c2 = 1.0 - b2.powf(state.t as f64);
    for i in 0..lambda.len() {
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g[i];
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g[i] * g[i];
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        let dir = (b1 * m_hat + (1.0 - b1) * g[i]) / (v_hat.sqrt() + state.eps);
        lambda[i] += alpha * dir;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_keeps_lambda() {
        let mut l = vec![0.3, -0.2];
        let mut s = NadamState::new(2);
        nadam_step(&mut l, &[0.0, 0.0], &mut s, 0.01).unwrap();
        assert_eq!(l, vec![0.3, -0.2]);
    }

    #[test]
    fn first_step_is_about_alpha() {
        let mut l = vec![0.0];
        let mut s = NadamState::new(1);
        nadam_step(&mut l, &[1.0], &mut s, 0.01).unwrap();
        assert!(l[0] > 0.0);
        assert!((l[0] / 0.01 - 1.0).abs() < 0.1, "{}", l[0]);
    }

    #[test]
    fn second_step_is_bounded() {
        let mut l = vec![0.0];
        let mut s = NadamState::new(1);
        nadam_step(&mut l, &[1.0], &mut s, 0.01).unwrap();
        let first = l[0];
        nadam_step(&mut l, &[1.0], &mut s, 0.01).unwrap();
        let second = l[0] - first;
        assert!(second > 0.005 && second < 0.02, "{second}");
    }

    #[test]
    fn non_finite_rejected() {
        let mut l = vec![0.0];
        let mut s = NadamState::new(1);
        assert!(nadam_step(&mut l, &[f64::NAN], &mut s, 0.01).is_err());
        assert!(nadam_step(&mut l, &[1.0, 2.0], &mut s, 0.01).is_err());
    }
}
