use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, TensorError};
use crate::nn::params::ParamStore;

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
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moment estimates and the step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamWState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub state: AdamWState,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            state: AdamWState::default(),
        }
    }

    /// Applies one update. Refuses to touch a frozen store.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Vec<f64>>) -> Result<()> {
        if store.is_frozen() {
            return Err(invalid("AdamW::step", "parameter store is frozen"));
        }
        let c = self.config;
        self.state.step += 1;
        let t = self.state.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, g) in grads {
            let p = store.values_mut(name)?;
            if p.len() != g.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "AdamW::step",
                    lhs: vec![p.len()],
                    rhs: vec![g.len()],
                });
            }
            let m = self.state.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.state.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for i in 0..g.len() {
                p[i] -= c.lr * c.weight_decay * p[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new(0);
        store.init_const("x", &[2], 3.0).unwrap();
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        });
        for _ in 0..500 {
            let x = store.get("x").unwrap().data.to_vec();
            let g: BTreeMap<_, _> = [("x".to_string(), x.iter().map(|v| 2.0 * (v - 1.0)).collect())].into();
            opt.step(&mut store, &g).unwrap();
        }
        for v in store.get("x").unwrap().data.iter() {
            assert!((v - 1.0).abs() < 1e-3, "{v}");
        }
    }

    #[test]
    fn frozen_store_is_rejected() {
        let mut store = ParamStore::new(0);
        store.init_const("x", &[1], 1.0).unwrap();
        store.set_frozen(true);
        let before = store.clone();
        let mut opt = AdamW::new(AdamWConfig::default());
        let g: BTreeMap<_, _> = [("x".to_string(), vec![1.0])].into();
        assert!(opt.step(&mut store, &g).is_err());
        assert_eq!(store, before);
    }
}
