//! Adam optimizer with bias correction.

use crate::error::{Error, Result};

use super::TensorValue;

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[(String, TensorValue)]) -> Self {
        AdamState {
            m: params.iter().map(|(_, p)| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|(_, p)| vec![0.0; p.len()]).collect(),
            step: 0,
        }
    }
}

/// One Adam update over all parameters. Gradients align with `params` by
/// position; `None` means the parameter did not participate in the step.
pub fn adam_step(
    params: &mut [(String, TensorValue)],
    grads: &[Option<TensorValue>],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    for (i, (name, p)) in params.iter().enumerate() {
        if let Some(g) = &grads[i] {
            if g.data.len() != p.len() {
                return Err(Error::shape(
                    "adam_step",
                    format!("gradient shape mismatch for {name}"),
                ));
            }
            if g.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient for {name}")));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, (_, p)) in params.iter_mut().enumerate() {
        let Some(g) = &grads[i] else { continue };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..p.data.len() {
            let gj = g.data[j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            p.data[j] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64) -> Vec<(String, TensorValue)> {
        vec![("p".to_string(), TensorValue::scalar(v))]
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = single(0.7);
        let mut state = AdamState::new(&params);
        let grads = vec![Some(TensorValue::scalar(0.0))];
        adam_step(&mut params, &grads, &mut state, &AdamConfig::default()).unwrap();
        assert_eq!(params[0].1.data[0], 0.7);
    }

    #[test]
    fn first_step_magnitude_matches_hand_computation() {
        let mut params = single(0.0);
        let mut state = AdamState::new(&params);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let grads = vec![Some(TensorValue::scalar(1.0))];
        adam_step(&mut params, &grads, &mut state, &cfg).unwrap();
        // bias correction makes the first step exactly -lr (up to eps)
        assert!((params[0].1.data[0] + 0.1).abs() < 1e-7, "{}", params[0].1.data[0]);
    }

    #[test]
    fn constant_gradient_moves_against_its_sign() {
        let mut params = single(0.0);
        let mut state = AdamState::new(&params);
        let cfg = AdamConfig::default();
        for _ in 0..50 {
            let grads = vec![Some(TensorValue::scalar(2.5))];
            adam_step(&mut params, &grads, &mut state, &cfg).unwrap();
        }
        assert!(params[0].1.data[0] < -0.01);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut params = single(0.0);
        let mut state = AdamState::new(&params);
        let grads = vec![Some(TensorValue::scalar(f64::NAN))];
        let err = adam_step(&mut params, &grads, &mut state, &AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains('p'), "{err}");
    }
}
