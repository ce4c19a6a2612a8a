//! Condition-modulated residual stacks.
//!
//! Each block regresses six per-token modulation tensors from the condition
//! sequence and applies two gated residual sublayers to one running stream:
//!
//! ```text
//! γ1 β1 α1 γ2 β2 α2 = MLP(C).chunk(6)
//! x ← x + α1 ⊙ Mamba2(LN(x) ⊙ (1 + γ1) + β1)
//! x ← x + α2 ⊙ MLP(LN(x) ⊙ (1 + γ2) + β2)
//! ```
//!
//! The stack ends with `LN(x) ⊙ (1 + γ3) + β3`, where `γ3 β3 = MLP(C).chunk(2)`.
//! Modulation MLPs start with a zero output layer, so a fresh stack is
//! exactly `LN(x)` whatever the condition.

use serde::{Deserialize, Serialize};

use crate::attention::{SoftmaxAttention, SoftmaxAttentionConfig};
use crate::error::{invalid, Result};
use crate::graph::{Graph, Var};
use crate::mamba::{Mamba2Block, Mamba2BlockConfig};
use crate::nn::Mlp;
use crate::params::ParamStore;

pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaLNStackConfig {
    /// Number of blocks.
    pub m: usize,
    pub d_model: usize,
    /// Width of the condition sequence.
    pub d_cond: usize,
    /// Hidden width of the per-block feed-forward MLP, as a multiple of d_model.
    pub mlp_ratio: usize,
    pub block: Mamba2BlockConfig,
}

impl AdaLNStackConfig {
    pub fn new(m: usize, d_model: usize) -> Self {
        Self {
            m,
            d_model,
            d_cond: d_model,
            mlp_ratio: 4,
            block: Mamba2BlockConfig::new(d_model),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(invalid!("stack needs at least one block"));
        }
        if self.block.d_model != self.d_model {
            return Err(invalid!(
                "block width {} differs from stack width {}",
                self.block.d_model,
                self.d_model
            ));
        }
        if self.d_cond == 0 || self.mlp_ratio == 0 {
            return Err(invalid!("d_cond and mlp_ratio must be positive"));
        }
        self.block.validate()
    }

    fn block_extra(&self) -> usize {
        let d = self.d_model;
        Mlp::param_count(self.d_cond, self.d_cond, 6 * d) + Mlp::param_count(d, self.mlp_ratio * d, d)
    }

    fn final_count(&self) -> usize {
        Mlp::param_count(self.d_cond, self.d_cond, 2 * self.d_model)
    }

    /// Parameters of the stack, computed from shapes alone.
    pub fn param_count(&self) -> usize {
        self.m * (self.block.param_count() + self.block_extra()) + self.final_count()
    }
}

fn modulate(g: &Graph, x: &Var, scale: &Var, shift: &Var) -> Result<Var> {
    let ln = g.layer_norm(x, LN_EPS)?;
    let one_plus = g.add_scalar(scale, 1.0)?;
    g.add(&g.mul(&ln, &one_plus)?, shift)
}

fn check_rows(x: &Var, c: &Var) -> Result<()> {
    if x.rows() != c.rows() {
        return Err(invalid!(
            "sequence has {} tokens but condition has {}",
            x.rows(),
            c.rows()
        ));
    }
    Ok(())
}

/// Token mixer used in the first sublayer of a block.
#[derive(Debug, Clone)]
pub enum Mixer {
    Mamba2(Mamba2Block),
    Attention(SoftmaxAttention),
}

impl Mixer {
    fn forward(&self, g: &Graph, store: &ParamStore, x: &Var) -> Result<Var> {
        match self {
            Mixer::Mamba2(m) => m.forward(g, store, x),
            Mixer::Attention(a) => a.forward(g, store, x),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdaLNBlock {
    pub modulation: Mlp,
    pub mixer: Mixer,
    pub mlp: Mlp,
}

impl AdaLNBlock {
    fn with_mixer(store: &mut ParamStore, name: &str, d: usize, d_cond: usize, mlp_ratio: usize, mixer: Mixer) -> Self {
        Self {
            modulation: Mlp::zero_output(store, &format!("{name}.modulation"), d_cond, d_cond, 6 * d),
            mixer,
            mlp: Mlp::new(store, &format!("{name}.mlp"), d, mlp_ratio * d, d),
        }
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: &Var, cond: &Var) -> Result<Var> {
        check_rows(x, cond)?;
        let mods = self.modulation.forward(g, store, cond)?;
        let m = g.chunk_cols(&mods, 6)?;
        let (gamma1, beta1, alpha1, gamma2, beta2, alpha2) = (&m[0], &m[1], &m[2], &m[3], &m[4], &m[5]);

        let h = modulate(g, x, gamma1, beta1)?;
        let h = self.mixer.forward(g, store, &h)?;
        let x = g.add(x, &g.mul(alpha1, &h)?)?;

        let h = modulate(g, &x, gamma2, beta2)?;
        let h = self.mlp.forward(g, store, &h)?;
        g.add(&x, &g.mul(alpha2, &h)?)
    }
}

#[derive(Debug, Clone)]
pub struct FinalLayer {
    pub modulation: Mlp,
}

impl FinalLayer {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, d_cond: usize) -> Self {
        Self {
            modulation: Mlp::zero_output(store, &format!("{name}.modulation"), d_cond, d_cond, 2 * d),
        }
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: &Var, cond: &Var) -> Result<Var> {
        check_rows(x, cond)?;
        let mods = self.modulation.forward(g, store, cond)?;
        let m = g.chunk_cols(&mods, 2)?;
        modulate(g, x, &m[0], &m[1])
    }
}

/// A stack of modulated blocks followed by the modulated final layer.
#[derive(Debug, Clone)]
pub struct AdaLNStack {
    pub blocks: Vec<AdaLNBlock>,
    pub final_layer: FinalLayer,
    pub d_model: usize,
}

impl AdaLNStack {
    /// `m` AdaLN Mamba-2 blocks, each with its own parameters and modulation MLP.
    pub fn mamba(store: &mut ParamStore, name: &str, cfg: &AdaLNStackConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..cfg.m)
            .map(|i| {
                let bname = format!("{name}.blocks.{i}");
                let mixer = Mixer::Mamba2(Mamba2Block::new(
                    store,
                    &format!("{bname}.mamba"),
                    cfg.block,
                    seed.wrapping_add(i as u64),
                )?);
                Ok(AdaLNBlock::with_mixer(store, &bname, cfg.d_model, cfg.d_cond, cfg.mlp_ratio, mixer))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            blocks,
            final_layer: FinalLayer::new(store, &format!("{name}.final"), cfg.d_model, cfg.d_cond),
            d_model: cfg.d_model,
        })
    }

    /// Softmax-attention blocks with the same modulation scheme.
    pub fn attention(store: &mut ParamStore, name: &str, cfg: &AttentionStackConfig) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..cfg.m)
            .map(|i| {
                let bname = format!("{name}.blocks.{i}");
                let mixer = Mixer::Attention(SoftmaxAttention::new(store, &format!("{bname}.attn"), cfg.attention)?);
                Ok(AdaLNBlock::with_mixer(store, &bname, cfg.d_model, cfg.d_cond, cfg.mlp_ratio, mixer))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            blocks,
            final_layer: FinalLayer::new(store, &format!("{name}.final"), cfg.d_model, cfg.d_cond),
            d_model: cfg.d_model,
        })
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: &Var, cond: &Var) -> Result<Var> {
        let mut h = x.clone();
        for blk in &self.blocks {
            h = blk.forward(g, store, &h, cond)?;
        }
        self.final_layer.forward(g, store, &h, cond)
    }
}

/// The attention baseline: `m` blocks of pre-norm multi-head softmax attention.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionStackConfig {
    pub m: usize,
    pub d_model: usize,
    pub d_cond: usize,
    pub mlp_ratio: usize,
    pub attention: SoftmaxAttentionConfig,
}

impl AttentionStackConfig {
    /// Same width, condition size and MLP ratio as `mamba`, with `depth_factor`× the blocks.
    pub fn matching(mamba: &AdaLNStackConfig, depth_factor: usize) -> Self {
        Self {
            m: mamba.m * depth_factor,
            d_model: mamba.d_model,
            d_cond: mamba.d_cond,
            mlp_ratio: mamba.mlp_ratio,
            attention: SoftmaxAttentionConfig::new(mamba.d_model),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(invalid!("stack needs at least one block"));
        }
        if self.attention.d_model != self.d_model {
            return Err(invalid!("attention width differs from stack width"));
        }
        self.attention.validate()
    }

    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let block = self.attention.param_count()
            + Mlp::param_count(self.d_cond, self.d_cond, 6 * d)
            + Mlp::param_count(d, self.mlp_ratio * d, d);
        self.m * block + Mlp::param_count(self.d_cond, self.d_cond, 2 * d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::layer_norm;
    use crate::params::Init;
    use crate::tensor::Tensor;

    fn cfg(m: usize) -> AdaLNStackConfig {
        let mut c = AdaLNStackConfig::new(m, 8);
        c.d_cond = 6;
        c.mlp_ratio = 2;
        c.block = Mamba2BlockConfig::with(8, 2, 4, 3);
        c
    }

    fn seq(t: usize, d: usize, phase: f64) -> Tensor {
        Tensor::new(&[t, d], (0..t * d).map(|i| (i as f64 * 0.53 + phase).cos() * 2.0).collect()).unwrap()
    }

    /// Replaces every zero-initialized modulation output layer with random weights.
    fn randomize_modulation(store: &mut ParamStore) {
        let ids: Vec<_> = store
            .iter()
            .filter(|(_, n, _)| n.contains("modulation.fc2"))
            .map(|(id, _, t)| (id, t.shape().to_vec()))
            .collect();
        let mut scratch = ParamStore::new(99);
        for (id, shape) in ids {
            let fresh = scratch.add(format!("{}", id.index()), &shape, Init::FanIn(4));
            let t = scratch.get(fresh).clone();
            store.set(id, t).unwrap();
        }
    }

    #[test]
    fn zero_init_stack_is_layer_norm() {
        let mut s = ParamStore::new(1);
        let stack = AdaLNStack::mamba(&mut s, "s", &cfg(3), 1).unwrap();
        let g = Graph::inference();
        let x = seq(9, 8, 0.0);
        for phase in [0.0, 1.0, 2.5] {
            let c = g.constant(seq(9, 6, phase));
            let y = stack.forward(&g, &s, &g.constant(x.clone()), &c).unwrap();
            assert!(y.value().max_abs_diff(&layer_norm(&x, LN_EPS)) < 1e-12);
        }
    }

    #[test]
    fn zero_init_block_is_identity() {
        let mut s = ParamStore::new(2);
        let stack = AdaLNStack::mamba(&mut s, "s", &cfg(1), 2).unwrap();
        let g = Graph::inference();
        let x = seq(5, 8, 0.3);
        let y = stack.blocks[0]
            .forward(&g, &s, &g.constant(x.clone()), &g.constant(seq(5, 6, 0.1)))
            .unwrap();
        assert_eq!(y.value(), &x);
    }

    #[test]
    fn token_mismatch_is_rejected() {
        let mut s = ParamStore::new(3);
        let stack = AdaLNStack::mamba(&mut s, "s", &cfg(1), 3).unwrap();
        let g = Graph::inference();
        let r = stack.forward(&g, &s, &g.constant(seq(5, 8, 0.0)), &g.constant(seq(4, 6, 0.0)));
        assert!(r.is_err());
    }

    #[test]
    fn final_layer_on_constant_rows_gives_shift() {
        let mut s = ParamStore::new(4);
        let fl = FinalLayer::new(&mut s, "f", 8, 6);
        randomize_modulation(&mut s);
        let g = Graph::inference();
        let c = g.constant(seq(4, 6, 0.7));
        let x = g.constant(Tensor::filled(&[4, 8], 3.0));
        let y = fl.forward(&g, &s, &x, &c).unwrap();
        let mods = fl.modulation.forward(&g, &s, &c).unwrap();
        let beta = g.chunk_cols(&mods, 2).unwrap()[1].clone();
        assert!(y.value().max_abs_diff(beta.value()) < 1e-12);
    }

    #[test]
    fn single_block_with_constant_modulated_input() {
        // γ1 = −1 collapses the modulated input to β1; verify against direct composition.
        let mut s = ParamStore::new(5);
        let stack = AdaLNStack::mamba(&mut s, "s", &cfg(1), 5).unwrap();
        let blk = &stack.blocks[0];
        let d = 8;
        let fc2 = &blk.modulation.fc2;
        let mut bias = vec![0.0; 6 * d];
        for j in 0..d {
            bias[j] = -1.0; // γ1
            bias[d + j] = 0.1 * j as f64; // β1
            bias[2 * d + j] = 0.5; // α1
            bias[5 * d + j] = 0.25; // α2
        }
        s.set(fc2.bias.unwrap(), Tensor::new(&[6 * d], bias.clone()).unwrap()).unwrap();
        let g = Graph::inference();
        let t = 6;
        let x = seq(t, d, 0.2);
        let c = g.constant(seq(t, 6, 0.9));
        let y = blk.forward(&g, &s, &g.constant(x.clone()), &c).unwrap();

        let beta1 = Tensor::new(&[t, d], (0..t).flat_map(|_| bias[d..2 * d].to_vec()).collect()).unwrap();
        let Mixer::Mamba2(mamba) = &blk.mixer else { unreachable!() };
        let h = mamba.forward(&g, &s, &g.constant(beta1)).unwrap();
        let x1: Vec<f64> = x.data().iter().zip(h.data()).map(|(a, b)| a + 0.5 * b).collect();
        let x1 = Tensor::new(&[t, d], x1).unwrap();
        let ff = blk.mlp.forward(&g, &s, &g.constant(layer_norm(&x1, LN_EPS))).unwrap();
        let expect: Vec<f64> = x1.data().iter().zip(ff.data()).map(|(a, b)| a + 0.25 * b).collect();
        let expect = Tensor::new(&[t, d], expect).unwrap();
        assert!(y.value().max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn condition_reaches_its_token() {
        let mut s = ParamStore::new(6);
        let stack = AdaLNStack::mamba(&mut s, "s", &cfg(2), 6).unwrap();
        randomize_modulation(&mut s);
        let g = Graph::inference();
        let x = g.constant(seq(7, 8, 0.0));
        let c = seq(7, 6, 0.4);
        let base = stack.forward(&g, &s, &x, &g.constant(c.clone())).unwrap();
        for t in 0..7 {
            let mut cp = c.clone();
            cp.data_mut()[t * 6 + 2] += 0.3;
            let y = stack.forward(&g, &s, &x, &g.constant(cp)).unwrap();
            assert_ne!(y.value().row(t), base.value().row(t));
        }
    }

    #[test]
    fn stack_is_causal_in_tokens() {
        let mut s = ParamStore::new(7);
        let stack = AdaLNStack::mamba(&mut s, "s", &cfg(2), 7).unwrap();
        randomize_modulation(&mut s);
        let g = Graph::inference();
        let x = seq(8, 8, 0.0);
        let c = g.constant(seq(8, 6, 0.4));
        let base = stack.forward(&g, &s, &g.constant(x.clone()), &c).unwrap();
        for t in 1..8 {
            let mut xp = x.clone();
            xp.data_mut()[t * 8] += 0.3;
            let y = stack.forward(&g, &s, &g.constant(xp), &c).unwrap();
            for tp in 0..t {
                assert_eq!(y.value().row(tp), base.value().row(tp));
            }
        }
    }

    #[test]
    fn m1_stack_is_block_then_final() {
        let mut s = ParamStore::new(8);
        let stack = AdaLNStack::mamba(&mut s, "s", &cfg(1), 8).unwrap();
        randomize_modulation(&mut s);
        let g = Graph::inference();
        let x = g.constant(seq(5, 8, 0.1));
        let c = g.constant(seq(5, 6, 0.2));
        let y = stack.forward(&g, &s, &x, &c).unwrap();
        let h = stack.blocks[0].forward(&g, &s, &x, &c).unwrap();
        let z = stack.final_layer.forward(&g, &s, &h, &c).unwrap();
        assert_eq!(y.value(), z.value());
    }

    #[test]
    fn analytic_counts_match_instantiated() {
        let c = cfg(2);
        let mut s = ParamStore::new(9);
        AdaLNStack::mamba(&mut s, "s", &c, 9).unwrap();
        assert_eq!(s.count(), c.param_count());
        let a = AttentionStackConfig::matching(&c, 2);
        let mut s = ParamStore::new(9);
        AdaLNStack::attention(&mut s, "a", &a).unwrap();
        assert_eq!(s.count(), a.param_count());
    }

    #[test]
    fn condition_gradient_matches_finite_differences() {
        let mut s = ParamStore::new(10);
        let stack = AdaLNStack::mamba(&mut s, "s", &cfg(2), 10).unwrap();
        randomize_modulation(&mut s);
        let x = seq(6, 8, 0.3);
        let errs = crate::gradcheck::check_inputs(
            &[seq(6, 6, 1.1)],
            |g, v| {
                let y = stack.forward(g, &s, &g.constant(x.clone()), &v[0])?;
                crate::gradcheck::probe_loss(g, &y, 4)
            },
            crate::gradcheck::DEFAULT_STEP,
        )
        .unwrap();
        assert!(errs[0] < 1e-4, "{errs:?}");
    }
}
