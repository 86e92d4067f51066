use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::DEVICE;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay. Moments live on the host and are updated
/// in place; parameters without a gradient are left untouched.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    /// Number of updates applied so far.
    pub step: u64,
    pub m: BTreeMap<String, Vec<f32>>,
    pub v: BTreeMap<String, Vec<f32>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn apply(&mut self, store: &ParamStore, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        let decay = (1.0 - c.lr * c.weight_decay) as f32;
        let step_size = (c.lr / bias1) as f32;
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let sqrt_bias2 = bias2.sqrt() as f32;
        let eps = c.eps as f32;
        for (name, var) in store.params() {
            let Some(g) = grads.get(var) else { continue };
            let g = g.flatten_all()?.to_vec1::<f32>()?;
            let mut p = var.as_tensor().flatten_all()?.to_vec1::<f32>()?;
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; p.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; p.len()]);
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let denom = v[i].sqrt() / sqrt_bias2 + eps;
                p[i] = p[i] * decay - step_size * m[i] / denom;
            }
            var.set(&Tensor::from_vec(p, var.shape(), &DEVICE)?)?;
        }
        Ok(())
    }

    /// Restores moment buffers, checking each against its parameter's size.
    pub fn restore(&mut self, store: &ParamStore, step: u64, m: BTreeMap<String, Vec<f32>>, v: BTreeMap<String, Vec<f32>>) -> Result<()> {
        for (name, buf) in m.iter().chain(v.iter()) {
            let var = store
                .param(name)
                .ok_or_else(|| Error::Checkpoint(format!("optimizer state for unknown parameter {name}")))?;
            if var.elem_count() != buf.len() {
                return Err(Error::Checkpoint(format!("optimizer state for {name} has the wrong size")));
            }
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;
    use candle_core::Var;

    #[test]
    fn matches_reference_update() {
        let mut store = ParamStore::new();
        store.builder(0).param("w", &[3], Init::Const(0.5)).unwrap();
        let var = store.param("w").unwrap().clone();
        let cfg = AdamWConfig {
            lr: 0.1,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg);
        let (mut m, mut v, mut p) = ([0f64; 3], [0f64; 3], [0.5f64; 3]);
        for t in 1..=3 {
            let target = Tensor::new(&[1f32, -1.0, 2.0], &DEVICE).unwrap();
            let loss = (var.as_tensor() - &target).unwrap().sqr().unwrap().sum_all().unwrap();
            let grads = loss.backward().unwrap();
            opt.apply(&store, &grads).unwrap();
            for i in 0..3 {
                let g = 2.0 * (p[i] - [1.0, -1.0, 2.0][i]);
                m[i] = 0.9 * m[i] + 0.1 * g;
                v[i] = 0.999 * v[i] + 0.001 * g * g;
                let mh = m[i] / (1.0 - 0.9f64.powi(t));
                let vh = v[i] / (1.0 - 0.999f64.powi(t));
                p[i] = p[i] * (1.0 - 0.1 * 0.01) - 0.1 * mh / (vh.sqrt() + 1e-8);
            }
        }
        let got = var.as_tensor().to_vec1::<f32>().unwrap();
        for i in 0..3 {
            assert!((got[i] as f64 - p[i]).abs() < 1e-5, "{got:?} vs {p:?}");
        }
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut store = ParamStore::new();
        store.builder(1).param("w", &[4], Init::Normal(1.0)).unwrap();
        let var: &Var = store.param("w").unwrap();
        let before = var.as_tensor().to_vec1::<f32>().unwrap();
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.0,
            ..AdamWConfig::default()
        });
        let grads = var.as_tensor().sqr().unwrap().sum_all().unwrap().backward().unwrap();
        opt.apply(&store, &grads).unwrap();
        assert_eq!(var.as_tensor().to_vec1::<f32>().unwrap(), before);
    }
}
