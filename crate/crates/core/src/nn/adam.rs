//! First-order adaptive-moment optimizer with bias correction.

use std::collections::HashMap;

use candle_core::{backprop::GradStore, Tensor};
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Result, StampError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 2e-4, beta1: 0.5, beta2: 0.99, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Tensor,
    v: Tensor,
    steps: u64,
}

/// Adam state for the variables of one [`ParamStore`]. Variables without a
/// gradient in a given step are left untouched, moments included.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    moments: HashMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, moments: HashMap::new() }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn step(&mut self, params: &ParamStore, grads: &GradStore) -> Result<()> {
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        for (name, var) in params.vars() {
            // gradients carry their op graph; storing them in the moments
            // would keep every earlier step's graph alive
            let Some(g) = grads.get(var.as_tensor()).map(Tensor::detach) else { continue };
            let entry = match self.moments.get_mut(name) {
                Some(e) => e,
                None => {
                    let zeros = var.as_tensor().zeros_like()?;
                    self.moments
                        .entry(name.clone())
                        .or_insert(Moments { m: zeros.clone(), v: zeros, steps: 0 })
                }
            };
            entry.steps += 1;
            entry.m = ((&entry.m * beta1)? + (&g * (1.0 - beta1))?)?;
            entry.v = ((&entry.v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let m_hat = (&entry.m / (1.0 - beta1.powi(entry.steps as i32)))?;
            let v_hat = (&entry.v / (1.0 - beta2.powi(entry.steps as i32)))?;
            let update = (m_hat / (v_hat.sqrt()? + eps)?)?;
            var.set(&(var.as_tensor().detach() - (update * lr)?)?)?;
        }
        Ok(())
    }

    /// Flattened state for checkpointing: `{name}.m`, `{name}.v` tensors and
    /// per-variable step counts.
    pub fn state(&self) -> (HashMap<String, Tensor>, HashMap<String, u64>) {
        let mut tensors = HashMap::new();
        let mut steps = HashMap::new();
        for (name, mo) in &self.moments {
            tensors.insert(format!("{name}.m"), mo.m.clone());
            tensors.insert(format!("{name}.v"), mo.v.clone());
            steps.insert(name.clone(), mo.steps);
        }
        (tensors, steps)
    }

    pub fn restore(
        config: AdamConfig,
        tensors: &HashMap<String, Tensor>,
        steps: &HashMap<String, u64>,
    ) -> Result<Self> {
        let mut moments = HashMap::new();
        for (name, &count) in steps {
            let get = |suffix: &str| {
                tensors
                    .get(&format!("{name}.{suffix}"))
                    .cloned()
                    .ok_or_else(|| StampError::Checkpoint(format!("missing optimizer moment {name}.{suffix}")))
            };
            moments.insert(name.clone(), Moments { m: get("m")?, v: get("v")?, steps: count });
        }
        Ok(Self { config, moments })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::Init;
    use candle_core::{DType, Device};

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut store = ParamStore::new(0, DType::F64, &Device::Cpu);
        let x = store.root().param("x", &[2], Init::Const(1.0)).unwrap();
        let loss = (x.sqr().unwrap().sum_all().unwrap() * 0.5).unwrap();
        let grads = loss.backward().unwrap();
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..Default::default() });
        opt.step(&store, &grads).unwrap();
        let v = store.get("x").unwrap().to_vec1::<f64>().unwrap();
        for val in v {
            assert!((val - 0.9).abs() < 1e-6);
        }
    }

    #[test]
    fn untouched_without_gradient() {
        let mut store = ParamStore::new(0, DType::F64, &Device::Cpu);
        let a = store.root().param("a", &[3], Init::Normal(1.0)).unwrap();
        store.root().param("b", &[3], Init::Normal(1.0)).unwrap();
        let before = store.get("b").unwrap().to_vec1::<f64>().unwrap();
        let grads = a.sum_all().unwrap().backward().unwrap();
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&store, &grads).unwrap();
        assert_eq!(store.get("b").unwrap().to_vec1::<f64>().unwrap(), before);
        assert!(opt.state().1.get("b").is_none());
    }
}
