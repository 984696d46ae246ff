//! Adam with decoupled weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// Moment estimates keyed by parameter name. Each parameter keeps its own
/// step count so parameters that join late (stage-2 heads) start unbiased.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub t: BTreeMap<String, u64>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self { cfg, ..Self::default() }
    }

    /// One update of every parameter that has a gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) {
        let c = &self.cfg;
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let t = self.t.entry(name.clone()).or_insert(0);
            *t += 1;
            let bc1 = 1.0 - c.beta1.powi(*t as i32);
            let bc2 = 1.0 - c.beta2.powi(*t as i32);
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let gi = g.data()[i];
                md[i] = c.beta1 * md[i] + (1.0 - c.beta1) * gi;
                vd[i] = c.beta2 * vd[i] + (1.0 - c.beta2) * gi * gi;
                let mh = md[i] / bc1;
                let vh = vd[i] / bc2;
                pd[i] -= lr * (mh / (vh.sqrt() + c.eps) + c.weight_decay * pd[i]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::from_parts(vec![2], vec![1.0, -1.0]));
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() });
        let grads = BTreeMap::from([("w".to_string(), Tensor::from_parts(vec![2], vec![0.5, -3.0]))]);
        opt.step(&mut p, &grads, 0.01);
        let w = p.get("w").unwrap().data();
        assert!((w[0] - 0.99).abs() < 1e-6 && (w[1] + 0.99).abs() < 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::from_parts(vec![3], vec![2.0, -1.0, 0.5]));
        let mut opt = AdamW::new(AdamWConfig::default());
        for _ in 0..2000 {
            let g = p.get("w").unwrap().map(|x| 2.0 * x);
            opt.step(&mut p, &BTreeMap::from([("w".to_string(), g)]), 0.01);
        }
        assert!(p.get("w").unwrap().data().iter().all(|v| v.abs() < 1e-2));
    }
}
