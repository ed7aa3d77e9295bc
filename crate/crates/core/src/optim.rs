use serde::{Deserialize, Serialize};

/// Adam hyperparameters; defaults match the common reference settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub steps: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, len: usize) -> Self {
        Adam {
            config,
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            steps: 0,
        }
    }

    /// One descent step on `params` given `grad`. Entries where `mask` is
    /// false are left untouched.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], mask: Option<&[bool]>) {
        debug_assert_eq!(params.len(), grad.len());
        self.steps += 1;
        let c = self.config;
        let t = self.steps as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for i in 0..params.len() {
            if mask.is_some_and(|m| !m[i]) {
                continue;
            }
            let g = grad[i];
            self.first_moment[i] = c.beta1 * self.first_moment[i] + (1.0 - c.beta1) * g;
            self.second_moment[i] = c.beta2 * self.second_moment[i] + (1.0 - c.beta2) * g * g;
            let m_hat = self.first_moment[i] / bias1;
            let v_hat = self.second_moment[i] / bias2;
            params[i] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_quadratic() {
        let mut x = vec![3.0, -2.0];
        let mut adam = Adam::new(AdamConfig::with_learning_rate(0.1), 2);
        for _ in 0..500 {
            let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
            adam.step(&mut x, &g, None);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn mask_freezes_coordinates() {
        let mut x = vec![1.0, 1.0];
        let mut adam = Adam::new(AdamConfig::default(), 2);
        adam.step(&mut x, &[1.0, 1.0], Some(&[true, false]));
        assert!(x[0] < 1.0);
        assert_eq!(x[1], 1.0);
    }
}
