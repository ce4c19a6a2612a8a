//! Multi-head softmax self-attention, the quadratic baseline mixer.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::graph::{Graph, Var};
use crate::mamba::default_heads;
use crate::nn::Linear;
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxAttentionConfig {
    pub d_model: usize,
    pub n_heads: usize,
}

impl SoftmaxAttentionConfig {
    pub fn new(d_model: usize) -> Self {
        Self {
            d_model,
            n_heads: default_heads(d_model),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(invalid!("d_model {} not divisible by {} heads", self.d_model, self.n_heads));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        Linear::param_count(self.d_model, 3 * self.d_model, true) + Linear::param_count(self.d_model, self.d_model, true)
    }
}

#[derive(Debug, Clone)]
pub struct SoftmaxAttention {
    pub cfg: SoftmaxAttentionConfig,
    qkv: Linear,
    out: Linear,
}

impl SoftmaxAttention {
    pub fn new(store: &mut ParamStore, name: &str, cfg: SoftmaxAttentionConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            qkv: Linear::new(store, &format!("{name}.qkv"), cfg.d_model, 3 * cfg.d_model, true),
            out: Linear::new(store, &format!("{name}.out"), cfg.d_model, cfg.d_model, true),
        })
    }

    /// Full (bidirectional) attention; every head materializes a T×T score matrix.
    pub fn forward(&self, g: &Graph, store: &ParamStore, x: &Var) -> Result<Var> {
        let d = self.cfg.d_model;
        let h = self.cfg.n_heads;
        let dh = d / h;
        let qkv = self.qkv.forward(g, store, x)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(h);
        for i in 0..h {
            let q = g.slice_cols(&qkv, i * dh, dh)?;
            let k = g.slice_cols(&qkv, d + i * dh, dh)?;
            let v = g.slice_cols(&qkv, 2 * d + i * dh, dh)?;
            let scores = g.scale(&g.matmul(&q, &g.transpose(&k)?)?, scale)?;
            let attn = g.softmax_rows(&scores)?;
            heads.push(g.matmul(&attn, &v)?);
        }
        let merged = g.concat_cols(&heads)?;
        self.out.forward(g, store, &merged)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::tensor::Tensor;

    #[test]
    fn attention_gradients() {
        let mut s = ParamStore::new(1);
        let att = SoftmaxAttention::new(&mut s, "a", SoftmaxAttentionConfig { d_model: 4, n_heads: 2 }).unwrap();
        let x = Tensor::new(&[5, 4], (0..20).map(|i| (i as f64 * 0.3).sin()).collect()).unwrap();
        let ids: Vec<_> = s.ids().collect();
        let errs = gradcheck::check_params(
            &s,
            &ids,
            |g, st| {
                let y = att.forward(g, st, &g.constant(x.clone()))?;
                gradcheck::probe_loss(g, &y, 3)
            },
            gradcheck::DEFAULT_STEP,
        )
        .unwrap();
        for (n, e) in errs {
            assert!(e < 1e-4, "{n}: {e}");
        }
    }

    #[test]
    fn uniform_keys_average_values() {
        let mut s = ParamStore::new(2);
        let att = SoftmaxAttention::new(&mut s, "a", SoftmaxAttentionConfig { d_model: 2, n_heads: 1 }).unwrap();
        let g = Graph::inference();
        let x = g.constant(Tensor::filled(&[3, 2], 0.5));
        let y = att.forward(&g, &s, &x).unwrap();
        assert_eq!(y.value().row(0), y.value().row(2));
    }
}
