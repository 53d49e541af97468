use serde::{Deserialize, Serialize};

use crate::error::{Result, VfmError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(VfmError::Config(format!("invalid AdamW settings {self:?}")))
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamWState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected AdamW update with decoupled weight decay. On a
/// non-finite gradient nothing is modified and an error is returned.
pub fn adamw_step(state: &mut AdamWState, params: &mut [f64], grads: &[f64], cfg: &AdamWConfig) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(VfmError::ShapeMismatch(format!(
            "{} params, {} grads, state for {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(k) = grads.iter().position(|g| !g.is_finite()) {
        return Err(VfmError::Optimization(format!("non-finite gradient at coordinate {k}")));
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    let decay = 1.0 - cfg.lr * cfg.weight_decay;
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *p *= decay;
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let denom = (*v / bc2).sqrt() + cfg.eps;
        *p -= cfg.lr * (*m / bc1) / denom;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut p = vec![1.0, -2.0, 3.5];
        let mut s = AdamWState::new(3);
        for _ in 0..5 {
            adamw_step(&mut s, &mut p, &[0.0; 3], &cfg).unwrap();
        }
        assert_eq!(p, vec![1.0, -2.0, 3.5]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut x = vec![1.0];
        let mut s = AdamWState::new(1);
        let g = [2.0 * x[0]];
        adamw_step(&mut s, &mut x, &g, &cfg).unwrap();
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
        let expected = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
        assert!((x[0] - expected).abs() < 1e-15);
        assert!((x[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn decay_alone_shrinks_geometrically() {
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        };
        let mut p = vec![2.0, -4.0];
        let mut s = AdamWState::new(2);
        adamw_step(&mut s, &mut p, &[0.0, 0.0], &cfg).unwrap();
        assert_eq!(p, vec![2.0 * 0.95, -4.0 * 0.95]);
    }

    #[test]
    fn nan_gradient_aborts_without_side_effects() {
        let cfg = AdamWConfig::default();
        let mut p = vec![1.0, 1.0];
        let mut s = AdamWState::new(2);
        assert!(adamw_step(&mut s, &mut p, &[0.1, f64::NAN], &cfg).is_err());
        assert_eq!((p, s.t), (vec![1.0, 1.0], 0));
    }

    #[test]
    fn config_invariants() {
        assert!(AdamWConfig::default().validate().is_ok());
        assert!(AdamWConfig { beta1: 1.0, ..Default::default() }.validate().is_err());
        assert!(AdamWConfig { lr: 0.0, ..Default::default() }.validate().is_err());
    }
}
