//! Adam with bias correction.

use indexmap::IndexMap;
use thiserror::Error;

use super::params::ParamSet;
use super::tensor::Tensor;

#[derive(Debug, Error)]
pub enum AdamError {
    #[error("missing gradient for parameter {0:?}")]
    MissingGradient(String),
    #[error("gradient shape {got:?} does not match parameter {name:?} shape {want:?}")]
    ShapeMismatch {
        name: String,
        want: Vec<usize>,
        got: Vec<usize>,
    },
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn new(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Per-parameter first/second moment estimates plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    config: AdamConfig,
    step: u64,
    first_moment: IndexMap<String, Tensor>,
    second_moment: IndexMap<String, Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            first_moment: IndexMap::new(),
            second_moment: IndexMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// One Adam update over every parameter in `params`. `grads` must carry
    /// an entry for each parameter name; moments are created lazily as zeros.
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &IndexMap<String, Tensor>,
    ) -> Result<(), AdamError> {
        let names: Vec<String> = params.names().cloned().collect();
        for name in &names {
            let p = params.get(name).expect("name from iteration");
            let g = grads
                .get(name)
                .ok_or_else(|| AdamError::MissingGradient(name.clone()))?;
            if g.shape() != p.shape() {
                return Err(AdamError::ShapeMismatch {
                    name: name.clone(),
                    want: p.shape().to_vec(),
                    got: g.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);

        for name in &names {
            let g = &grads[name];
            let m = self
                .first_moment
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            for (mi, &gi) in m.data_mut().iter_mut().zip(g.data()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
            }
            let v = self
                .second_moment
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            for (vi, &gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            }
            let p = params.get_mut(name).expect("name from iteration");
            let m = &self.first_moment[name];
            let v = &self.second_moment[name];
            for ((pi, &mi), &vi) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                *pi -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut IndexMap<String, Tensor>, max_norm: f64) {
    let sq: f64 = grads
        .values()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let factor = max_norm / norm;
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(value: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::scalar(value)).unwrap();
        p
    }

    fn grad_of(value: f64) -> IndexMap<String, Tensor> {
        let mut g = IndexMap::new();
        g.insert("w".to_string(), Tensor::scalar(value));
        g
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut params = one_param(1.5);
        let mut adam = AdamState::new(AdamConfig::new(0.001));
        for _ in 0..3 {
            adam.step(&mut params, &grad_of(0.0)).unwrap();
        }
        assert_eq!(params.get("w").unwrap().item(), 1.5);
        assert_eq!(adam.step_count(), 3);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // Bias-corrected first step is lr * g / (|g| + eps).
        let mut params = one_param(0.0);
        let mut adam = AdamState::new(AdamConfig::new(0.001));
        adam.step(&mut params, &grad_of(1.0)).unwrap();
        let w = params.get("w").unwrap().item();
        assert!((w + 0.001).abs() < 1e-9, "{w}");
    }

    #[test]
    fn two_identical_steps_accumulate() {
        let mut params = one_param(0.0);
        let mut adam = AdamState::new(AdamConfig::new(0.001));
        adam.step(&mut params, &grad_of(1.0)).unwrap();
        adam.step(&mut params, &grad_of(1.0)).unwrap();
        let w = params.get("w").unwrap().item();
        assert!((w + 0.002).abs() < 1e-8, "{w}");
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut params = one_param(0.0);
        let mut adam = AdamState::new(AdamConfig::new(0.001));
        let empty = IndexMap::new();
        assert!(matches!(
            adam.step(&mut params, &empty),
            Err(AdamError::MissingGradient(_))
        ));
    }

    #[test]
    fn clip_rescales_to_max_norm() {
        let mut grads = IndexMap::new();
        grads.insert("a".to_string(), Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        clip_global_norm(&mut grads, 1.0);
        let g = &grads["a"];
        let norm: f64 = g.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }
}
