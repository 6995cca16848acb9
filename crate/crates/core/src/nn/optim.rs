//! Adam with an optional cosine-annealed learning rate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Bound, Gradients, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    /// `lr·½(1 + cos(π·t/T))`, reaching 0 at `t = T`.
    Cosine,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub lr: f64,
    pub eps: f64,
    pub schedule: Schedule,
    pub total_iters: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.99,
            lr: 1e-4,
            eps: 1e-8,
            schedule: Schedule::Cosine,
            total_iters: 2000,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.lr >= 0.0
            && self.eps > 0.0
            && self.total_iters >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings: {self:?}")))
        }
    }

    /// Learning rate for zero-based step `t`.
    pub fn lr_at(&self, t: u64) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine => {
                if t >= self.total_iters {
                    0.0
                } else {
                    let frac = t as f64 / self.total_iters as f64;
                    self.lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
                }
            }
        }
    }
}

/// Adam state for one [`ParamStore`]; moments are aligned with store order.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    cfg: OptimizerConfig,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    step: u64,
}

impl Adam {
    pub fn new(cfg: OptimizerConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f32>> = store.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            cfg,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Pull the gradient of every bound parameter out of `grads`.
    pub fn collect(bound: &Bound, grads: &mut Gradients) -> Vec<Option<Vec<f32>>> {
        bound.vars().map(|(_, v)| grads.take(v)).collect()
    }

    /// One update; missing gradients count as zero.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f32>>]) {
        let lr = self.cfg.lr_at(self.step);
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let step_size = (lr / c1) as f32;
        let c2_sqrt = c2.sqrt() as f32;
        let eps = self.cfg.eps as f32;
        let (b1, b2) = (b1 as f32, b2 as f32);
        for (i, (_, param)) in store.tensors_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = param.data_mut();
            match grads.get(i).and_then(|g| g.as_deref()) {
                Some(g) => {
                    for j in 0..p.len() {
                        m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                        v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                        p[j] -= step_size * m[j] / (v[j].sqrt() / c2_sqrt + eps);
                    }
                }
                None => {
                    for j in 0..p.len() {
                        m[j] *= b1;
                        v[j] *= b2;
                        p[j] -= step_size * m[j] / (v[j].sqrt() / c2_sqrt + eps);
                    }
                }
            }
        }
    }

    /// First and second moments as tensors shaped like the parameters.
    pub fn moments(&self, store: &ParamStore) -> Vec<(String, Tensor, Tensor)> {
        store
            .iter()
            .enumerate()
            .map(|(i, (name, t))| {
                let shape = t.shape().to_vec();
                (
                    name.to_string(),
                    Tensor::new(shape.clone(), self.m[i].clone()).expect("aligned"),
                    Tensor::new(shape, self.v[i].clone()).expect("aligned"),
                )
            })
            .collect()
    }

    /// Rebuild state from saved moments and step count.
    pub fn restore(
        cfg: OptimizerConfig,
        store: &ParamStore,
        moments: &[(String, Tensor, Tensor)],
        step: u64,
    ) -> Result<Self> {
        let mut adam = Self::new(cfg, store);
        for (i, (name, t)) in store.iter().enumerate() {
            let (_, m, v) = moments
                .iter()
                .find(|(n, _, _)| n == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state for `{name}`")))?;
            if m.shape() != t.shape() || v.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "optimizer state shape mismatch for `{name}`"
                )));
            }
            adam.m[i] = m.data().to_vec();
            adam.v[i] = v.data().to_vec();
        }
        adam.step = step;
        Ok(adam)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ParamMeta, Tape};

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = OptimizerConfig::default();
        assert_eq!(cfg.lr_at(0), 1e-4);
        assert!((cfg.lr_at(1000) - 0.5e-4).abs() < 1e-12);
        assert_eq!(cfg.lr_at(2000), 0.0);
        assert!(cfg.lr_at(1999) > 0.0);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::new(ParamMeta::default());
        store
            .insert("x", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap())
            .unwrap();
        let cfg = OptimizerConfig {
            lr: 0.05,
            schedule: Schedule::Constant,
            ..Default::default()
        };
        let mut adam = Adam::new(cfg, &store);
        for _ in 0..500 {
            let grads = {
                let mut tape = Tape::new();
                let bound = store.bind(&mut tape, true);
                let x = bound.var("x").unwrap();
                let n = tape.l2_norm(x);
                let mut g = tape.backward(n);
                Adam::collect(&bound, &mut g)
            };
            adam.step(&mut store, &grads);
        }
        assert!(store.get("x").unwrap().data().iter().all(|v| v.abs() < 0.1));
        assert_eq!(adam.steps(), 500);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new(ParamMeta::default());
        store
            .insert("w", Tensor::new(vec![2], vec![0.0, 0.0]).unwrap())
            .unwrap();
        let cfg = OptimizerConfig {
            lr: 0.01,
            schedule: Schedule::Constant,
            ..Default::default()
        };
        let mut adam = Adam::new(cfg, &store);
        adam.step(&mut store, &[Some(vec![3.0, -0.5])]);
        let w = store.get("w").unwrap().data();
        assert!((w[0] + 0.01).abs() < 1e-6 && (w[1] - 0.01).abs() < 1e-6);
    }
}
