use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{PclError, Result};
use crate::tensor::ParameterGroup;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected Adam with per-parameter moment buffers.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState { config, step: 0, moments: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every trainable parameter in `params`, then clears
    /// their gradients. Frozen parameters are not touched.
    pub fn step(&mut self, params: &mut ParameterGroup) -> Result<()> {
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        self.step += 1;
        let bc1 = 1.0 - (beta1 as f64).powi(self.step as i32);
        let bc2 = 1.0 - (beta2 as f64).powi(self.step as i32);
        for (name, t) in params.trainable_mut() {
            let grad = t
                .grad()
                .ok_or_else(|| PclError::Contract(format!("parameter `{name}` is trainable but has no gradient")))?
                .to_vec();
            let (m, v) =
                self.moments.entry(name.clone()).or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            for (i, theta) in t.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = (m[i] as f64 / bc1) as f32;
                let v_hat = (v[i] as f64 / bc2) as f32;
                *theta -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            t.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{GradientMap, Tensor};

    #[test]
    fn single_step_from_unit_gradient() {
        let mut p = ParameterGroup::new();
        p.insert("theta", Tensor::zeros(&[1]));
        let mut g = GradientMap::new();
        g.insert("theta".into(), vec![1.0]);
        p.accumulate(&g);
        let mut adam = AdamState::new(AdamConfig::default());
        adam.step(&mut p).unwrap();
        let theta = p.get("theta").unwrap().data()[0];
        assert!((theta + 0.001).abs() < 1e-6, "{theta}");
        assert_eq!(p.get("theta").unwrap().grad().unwrap(), &[0.0]);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = ParameterGroup::new();
        p.insert("w", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let before = p.clone();
        let mut adam = AdamState::new(AdamConfig::default());
        for _ in 0..10 {
            adam.step(&mut p).unwrap();
        }
        assert!(p.bit_eq(&before));
        assert_eq!(adam.steps(), 10);
    }

    #[test]
    fn frozen_bit_identical_after_many_steps() {
        let mut p = ParameterGroup::new();
        p.insert("live", Tensor::new(vec![2], vec![0.3, 0.4]).unwrap());
        p.insert("frozen", Tensor::new(vec![2], vec![0.1, 0.2]).unwrap());
        p.freeze("frozen");
        let before = p.get("frozen").unwrap().to_bytes();
        let mut adam = AdamState::new(AdamConfig::default());
        let mut g = GradientMap::new();
        g.insert("live".into(), vec![1.0, 1.0]);
        g.insert("frozen".into(), vec![5.0, -5.0]);
        for _ in 0..100 {
            p.accumulate(&g);
            adam.step(&mut p).unwrap();
        }
        assert_eq!(p.get("frozen").unwrap().to_bytes(), before);
        assert_ne!(p.get("live").unwrap().data(), &[0.3, 0.4]);
    }

    #[test]
    fn missing_gradient_is_contract_error() {
        let mut p = ParameterGroup::new();
        p.insert_raw("w", Tensor::zeros(&[2]));
        let mut adam = AdamState::new(AdamConfig::default());
        assert!(matches!(adam.step(&mut p), Err(PclError::Contract(_))));
    }
}
