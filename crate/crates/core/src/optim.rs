//! Adam with optional global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::graph::Gradients;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the whole gradient when its L2 norm exceeds this.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Self {
            cfg,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update from `grads`; returns the pre-clipping gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<f64> {
        let ids: Vec<ParamId> = store.ids().filter(|&id| !store.is_frozen(id)).collect();
        let gs: Vec<(ParamId, Vec<f64>)> = ids.iter().filter_map(|&id| grads.param(id).map(|g| (id, g))).collect();
        let norm = gs.iter().flat_map(|(_, g)| g.iter()).map(|x| x * x).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(crate::Error::NonFinite(format!("gradient norm {norm}")));
        }
        let scale = match self.cfg.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (id, g) in gs {
            let i = id.index();
            let p = store.tensor_mut(id);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, g), m), v) in p.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g * scale;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= self.cfg.lr * (*m / bc1) / ((*v / bc2).sqrt() + self.cfg.eps);
            }
        }
        Ok(norm)
    }

    /// First and second moments as tensors shaped like their parameters.
    pub fn moments(&self, store: &ParamStore) -> Vec<(String, Tensor, Tensor)> {
        store
            .iter()
            .map(|(id, name, t)| {
                let m = Tensor::new(t.shape(), self.m[id.index()].clone()).expect("moment shape");
                let v = Tensor::new(t.shape(), self.v[id.index()].clone()).expect("moment shape");
                (name.to_string(), m, v)
            })
            .collect()
    }

    pub fn set_moments(&mut self, store: &ParamStore, name: &str, m: &Tensor, v: &Tensor) -> Result<()> {
        let id = store.id(name).ok_or_else(|| invalid!("optimizer state for unknown parameter {name}"))?;
        let n = store.get(id).numel();
        if m.numel() != n || v.numel() != n {
            return Err(invalid!("optimizer state for {name} has wrong size"));
        }
        self.m[id.index()] = m.data().to_vec();
        self.v[id.index()] = v.data().to_vec();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::params::Init;

    #[test]
    fn minimizes_a_quadratic() {
        let mut s = ParamStore::new(0);
        let w = s.add("w", &[3], Init::Constant(5.0));
        let mut opt = Adam::new(AdamConfig { lr: 0.1, clip_norm: None, ..Default::default() }, &s);
        let target = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        for _ in 0..500 {
            let g = Graph::new();
            let loss = g.mse(&g.param(&s, w), &g.constant(target.clone())).unwrap();
            let grads = g.backward(&loss).unwrap();
            opt.step(&mut s, &grads).unwrap();
        }
        assert!(s.get(w).max_abs_diff(&target) < 1e-3);
    }

    #[test]
    fn first_step_moves_each_weight_by_lr() {
        let mut s = ParamStore::new(0);
        let w = s.add("w", &[2], Init::Constant(1.0));
        let mut opt = Adam::new(AdamConfig { lr: 0.01, clip_norm: None, ..Default::default() }, &s);
        let g = Graph::new();
        let p = g.param(&s, w);
        let loss = g.sum(&g.mul(&p, &g.constant(Tensor::new(&[2], vec![3.0, -0.2]).unwrap())).unwrap()).unwrap();
        let grads = g.backward(&loss).unwrap();
        opt.step(&mut s, &grads).unwrap();
        let d = s.get(w).data();
        assert!((d[0] - 0.99).abs() < 1e-6 && (d[1] - 1.01).abs() < 1e-6, "{d:?}");
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut s = ParamStore::new(0);
        let a = s.add("a", &[1], Init::Constant(1.0));
        let b = s.add("b", &[1], Init::Constant(1.0));
        s.set_frozen(b, true);
        let mut opt = Adam::new(AdamConfig::default(), &s);
        let g = Graph::new();
        let loss = g.sum(&g.add(&g.param(&s, a), &g.param(&s, b)).unwrap()).unwrap();
        let grads = g.backward(&loss).unwrap();
        opt.step(&mut s, &grads).unwrap();
        assert_ne!(s.get(a).data()[0], 1.0);
        assert_eq!(s.get(b).data()[0], 1.0);
    }
}
