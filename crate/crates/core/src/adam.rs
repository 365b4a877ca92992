//! Adam over a flat parameter vector.
//!
//! Classic L2 regularization: the decay term is folded into the gradient
//! before the moment update. Bias correction follows the standard
//! `m_hat = m / (1 - beta1^t)`, `v_hat = v / (1 - beta2^t)` form.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moment estimates, one entry per parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamMoments {
    pub m: Array1<f64>,
    pub v: Array1<f64>,
}

impl AdamMoments {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: Array1::zeros(len),
            v: Array1::zeros(len),
        }
    }
}

/// One bias-corrected update in place. `t` is the 1-based step count.
pub fn adam_step(
    params: &mut Array1<f64>,
    grads: &Array1<f64>,
    moments: &mut AdamMoments,
    t: u64,
    config: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() || moments.m.len() != params.len() {
        return Err(Error::ShapeMismatch {
            context: "adam step",
            dimension: "parameter count",
            expected: params.len().to_string(),
            actual: format!("grads {}, moments {}", grads.len(), moments.m.len()),
        });
    }
    if t == 0 {
        return Err(Error::InvalidConfig("adam step count must be >= 1".into()));
    }

    let bc1 = 1.0 - config.beta1.powi(t as i32);
    let bc2 = 1.0 - config.beta2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i] + config.weight_decay * params[i];
        moments.m[i] = config.beta1 * moments.m[i] + (1.0 - config.beta1) * g;
        moments.v[i] = config.beta2 * moments.v[i] + (1.0 - config.beta2) * g * g;
        let m_hat = moments.m[i] / bc1;
        let v_hat = moments.v[i] / bc2;
        params[i] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;
    use rand::Rng;

    #[test]
    fn zero_gradient_without_decay_changes_nothing() {
        let mut params = array![1.0, -2.0, 0.5];
        let mut moments = AdamMoments::zeros(3);
        let config = AdamConfig::default();
        adam_step(&mut params, &Array1::zeros(3), &mut moments, 1, &config).unwrap();
        assert_eq!(params, array![1.0, -2.0, 0.5]);
        assert!(moments.m.iter().all(|&x| x == 0.0));
        assert!(moments.v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn first_step_moves_by_roughly_the_learning_rate() {
        let mut params = array![0.3];
        let mut moments = AdamMoments::zeros(1);
        let config = AdamConfig::default();
        let g = 0.7;
        adam_step(&mut params, &array![g], &mut moments, 1, &config).unwrap();
        // After bias correction the first update is -lr * g / (|g| + eps).
        let expected = 0.3 - config.learning_rate * g / (g.abs() + config.epsilon);
        assert_relative_eq!(params[0], expected, max_relative = 1e-12);
    }

    #[test]
    fn step_zero_is_rejected() {
        let mut params = array![0.0];
        let mut moments = AdamMoments::zeros(1);
        assert!(adam_step(
            &mut params,
            &array![1.0],
            &mut moments,
            0,
            &AdamConfig::default()
        )
        .is_err());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut params = array![0.0, 1.0];
        let mut moments = AdamMoments::zeros(2);
        assert!(adam_step(
            &mut params,
            &array![1.0],
            &mut moments,
            1,
            &AdamConfig::default()
        )
        .is_err());
    }

    /// 100 random steps against an independent scalar-by-scalar recomputation.
    #[test]
    fn matches_straight_line_reference_over_100_steps() {
        let mut rng = crate::rng::substream(99, "adam-oracle");
        let n = 7;
        let config = AdamConfig {
            learning_rate: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-4,
        };

        let start: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let grads_per_step: Vec<Vec<f64>> = (0..100)
            .map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();

        let mut params = Array1::from_vec(start.clone());
        let mut moments = AdamMoments::zeros(n);
        for (t, g) in grads_per_step.iter().enumerate() {
            adam_step(
                &mut params,
                &Array1::from_vec(g.clone()),
                &mut moments,
                (t + 1) as u64,
                &config,
            )
            .unwrap();
        }

        // Reference: plain loops, no ndarray.
        let mut p = start;
        let mut m = vec![0.0; n];
        let mut v = vec![0.0; n];
        for (t, gs) in grads_per_step.iter().enumerate() {
            let t = (t + 1) as i32;
            for i in 0..n {
                let g = gs[i] + config.weight_decay * p[i];
                m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g;
                v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g * g;
                let m_hat = m[i] / (1.0 - config.beta1.powi(t));
                let v_hat = v[i] / (1.0 - config.beta2.powi(t));
                p[i] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
            }
        }

        for i in 0..n {
            assert!((params[i] - p[i]).abs() < 1e-12);
        }
    }
}
