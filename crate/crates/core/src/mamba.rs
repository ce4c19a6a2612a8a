//! Mamba-2 block: input projection, causal depthwise convolution, a
//! multi-head scalar-decay SSM scan and a SiLU output gate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::graph::{Graph, Var};
use crate::nn::Linear;
use crate::params::{Init, ParamId, ParamStore};
use crate::ssd::ScanForm;
use crate::tensor::Tensor;

pub const DEFAULT_HEAD_DIM: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mamba2BlockConfig {
    pub d_model: usize,
    pub expand: usize,
    pub d_state: usize,
    pub conv_width: usize,
    pub n_heads: usize,
    #[serde(default)]
    pub scan: ScanForm,
}

impl Mamba2BlockConfig {
    /// Expansion 2, state 256, conv width 4, heads sized to 64 channels where possible.
    pub fn new(d_model: usize) -> Self {
        Self::with(d_model, 2, 256, 4)
    }

    pub fn with(d_model: usize, expand: usize, d_state: usize, conv_width: usize) -> Self {
        Self {
            d_model,
            expand,
            d_state,
            conv_width,
            n_heads: default_heads(expand * d_model),
            scan: ScanForm::Linear,
        }
    }

    pub fn d_inner(&self) -> usize {
        self.expand * self.d_model
    }

    pub fn d_head(&self) -> usize {
        self.d_inner() / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.expand == 0 || self.d_state == 0 {
            return Err(invalid!("mamba2 dims must be positive: {self:?}"));
        }
        if self.conv_width == 0 {
            return Err(invalid!("conv_width must be ≥ 1"));
        }
        if self.n_heads == 0 || self.d_inner() % self.n_heads != 0 {
            return Err(invalid!(
                "expand·d_model = {} not divisible by n_heads = {}",
                self.d_inner(),
                self.n_heads
            ));
        }
        Ok(())
    }

    fn conv_channels(&self) -> usize {
        self.d_inner() + 2 * self.d_state
    }

    fn in_width(&self) -> usize {
        2 * self.d_inner() + 2 * self.d_state + self.n_heads
    }

    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        d * self.in_width()
            + self.conv_width * self.conv_channels()
            + self.conv_channels()
            + 3 * self.n_heads
            + self.d_inner() * d
    }
}

/// Smallest head count giving heads of at most 64 channels that divide `d_inner` evenly.
pub fn default_heads(d_inner: usize) -> usize {
    (1..=d_inner)
        .find(|h| d_inner % h == 0 && d_inner / h <= DEFAULT_HEAD_DIM)
        .unwrap_or(1)
}

#[derive(Debug, Clone)]
pub struct Mamba2Block {
    pub cfg: Mamba2BlockConfig,
    in_proj: Linear,
    conv_weight: ParamId,
    conv_bias: ParamId,
    dt_bias: ParamId,
    a_log: ParamId,
    d_skip: ParamId,
    out_proj: Linear,
}

/// Block output together with the per-token, per-head decays it used.
pub struct Mamba2Trace {
    pub out: Var,
    pub decays: Var,
}

impl Mamba2Block {
    pub fn new(store: &mut ParamStore, name: &str, cfg: Mamba2BlockConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.n_heads;
        let in_proj = Linear::new(store, &format!("{name}.in_proj"), cfg.d_model, cfg.in_width(), false);
        let conv_weight = store.add(
            format!("{name}.conv.weight"),
            &[cfg.conv_width, cfg.conv_channels()],
            Init::FanIn(cfg.conv_width),
        );
        let conv_bias = store.add(format!("{name}.conv.bias"), &[cfg.conv_channels()], Init::FanIn(cfg.conv_width));

        // Δ starts log-uniform in [1e-3, 1e-1]; A uniform in [1, 16].
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dt_init: Vec<f64> = (0..h)
            .map(|_| {
                let dt = (rng.random_range(1e-3f64.ln()..1e-1f64.ln())).exp();
                dt + (-(-dt).exp_m1()).ln()
            })
            .collect();
        let a_init: Vec<f64> = (0..h).map(|_| rng.random_range(1.0f64..16.0).ln()).collect();
        let dt_bias = store.add_tensor(format!("{name}.dt_bias"), Tensor::new(&[h], dt_init)?);
        let a_log = store.add_tensor(format!("{name}.a_log"), Tensor::new(&[h], a_init)?);
        let d_skip = store.add(format!("{name}.d_skip"), &[h], Init::Constant(1.0));
        let out_proj = Linear::new(store, &format!("{name}.out_proj"), cfg.d_inner(), cfg.d_model, false);
        Ok(Self {
            cfg,
            in_proj,
            conv_weight,
            conv_bias,
            dt_bias,
            a_log,
            d_skip,
            out_proj,
        })
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: &Var) -> Result<Var> {
        Ok(self.forward_traced(g, store, x)?.out)
    }

    pub fn forward_traced(&self, g: &Graph, store: &ParamStore, x: &Var) -> Result<Mamba2Trace> {
        let cfg = &self.cfg;
        if x.cols() != cfg.d_model {
            return Err(invalid!("mamba2 expects {} channels, got {}", cfg.d_model, x.cols()));
        }
        x.value().ensure_finite("mamba2 input")?;
        let (di, s, h) = (cfg.d_inner(), cfg.d_state, cfg.n_heads);

        let proj = self.in_proj.forward(g, store, x)?;
        let z = g.slice_cols(&proj, 0, di)?;
        let xbc = g.slice_cols(&proj, di, di + 2 * s)?;
        let dt_raw = g.slice_cols(&proj, 2 * di + 2 * s, h)?;

        let xbc = g.depthwise_causal_conv(&xbc, &g.param(store, self.conv_weight))?;
        let xbc = g.add_row(&xbc, &g.param(store, self.conv_bias))?;
        let xbc = g.silu(&xbc)?;
        let xs = g.slice_cols(&xbc, 0, di)?;
        let b = g.slice_cols(&xbc, di, s)?;
        let c = g.slice_cols(&xbc, di + s, s)?;

        let dt = g.add_row(&dt_raw, &g.param(store, self.dt_bias))?;
        let dt = g.softplus(&dt)?;
        let a_pos = g.exp(&g.param(store, self.a_log))?;
        let decays = g.exp(&g.scale(&g.mul_row(&dt, &a_pos)?, -1.0)?)?;

        let p = cfg.d_head();
        let v = g.mul(&xs, &g.repeat_cols(&dt, p)?)?;
        let y = g.ssd_scan(&v, &decays, &b, &c, cfg.scan)?;
        let skip = g.repeat_cols(&g.param(store, self.d_skip), p)?;
        let y = g.add(&y, &g.mul_row(&xs, &skip)?)?;
        let y = g.mul(&y, &g.silu(&z)?)?;
        let out = self.out_proj.forward(g, store, &y)?;
        Ok(Mamba2Trace { out, decays })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;

    fn small_cfg() -> Mamba2BlockConfig {
        Mamba2BlockConfig {
            d_model: 4,
            expand: 2,
            d_state: 3,
            conv_width: 3,
            n_heads: 2,
            scan: ScanForm::Linear,
        }
    }

    fn input(t: usize, d: usize, phase: f64) -> Tensor {
        Tensor::new(&[t, d], (0..t * d).map(|i| (i as f64 * 0.71 + phase).sin()).collect()).unwrap()
    }

    #[test]
    fn shape_is_preserved() {
        let mut s = ParamStore::new(1);
        let blk = Mamba2Block::new(&mut s, "m", small_cfg(), 1).unwrap();
        let g = Graph::inference();
        for t in [1, 2, 9] {
            let y = blk.forward(&g, &s, &g.constant(input(t, 4, 0.0))).unwrap();
            assert_eq!(y.shape(), &[t, 4]);
        }
    }

    #[test]
    fn decays_lie_in_unit_interval() {
        let mut s = ParamStore::new(2);
        let blk = Mamba2Block::new(&mut s, "m", small_cfg(), 2).unwrap();
        let g = Graph::inference();
        let tr = blk.forward_traced(&g, &s, &g.constant(input(16, 4, 0.3).map(|v| 5.0 * v))).unwrap();
        assert!(tr.decays.data().iter().all(|&a| a > 0.0 && a <= 1.0));
    }

    #[test]
    fn causal_under_perturbation() {
        let mut s = ParamStore::new(3);
        let blk = Mamba2Block::new(&mut s, "m", small_cfg(), 3).unwrap();
        let g = Graph::inference();
        let x = input(10, 4, 0.1);
        let base = blk.forward(&g, &s, &g.constant(x.clone())).unwrap();
        for t in 0..10 {
            let mut xp = x.clone();
            xp.data_mut()[t * 4 + 1] += 0.5;
            let y = blk.forward(&g, &s, &g.constant(xp)).unwrap();
            for tp in 0..10 {
                let same = base.value().row(tp) == y.value().row(tp);
                if tp < t {
                    assert!(same, "output {tp} moved when input {t} changed");
                }
                if tp == t {
                    assert!(!same, "output {t} ignored its own input");
                }
            }
        }
    }

    #[test]
    fn scan_forms_agree_inside_block() {
        let mut s = ParamStore::new(4);
        let mut cfg = small_cfg();
        let blk = Mamba2Block::new(&mut s, "m", cfg, 4).unwrap();
        let g = Graph::inference();
        let x = g.constant(input(13, 4, 0.2));
        let lin = blk.forward(&g, &s, &x).unwrap();
        for form in [ScanForm::Quadratic, ScanForm::Chunked(4)] {
            cfg.scan = form;
            let mut other = blk.clone();
            other.cfg = cfg;
            let y = other.forward(&g, &s, &x).unwrap();
            assert!(y.value().max_abs_diff(lin.value()) < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut s = ParamStore::new(5);
        let blk = Mamba2Block::new(&mut s, "m", small_cfg(), 5).unwrap();
        let x = input(7, 4, 0.4);
        let ids: Vec<_> = s.ids().collect();
        let errs = gradcheck::check_params(
            &s,
            &ids,
            |g, st| {
                let y = blk.forward(g, st, &g.constant(x.clone()))?;
                gradcheck::probe_loss(g, &y, 1)
            },
            gradcheck::DEFAULT_STEP,
        )
        .unwrap();
        for (name, e) in errs {
            assert!(e < 1e-4, "{name}: {e}");
        }
        let errs = gradcheck::check_inputs(
            &[x],
            |g, v| {
                let y = blk.forward(g, &s, &v[0])?;
                gradcheck::probe_loss(g, &y, 1)
            },
            gradcheck::DEFAULT_STEP,
        )
        .unwrap();
        assert!(errs[0] < 1e-4, "{errs:?}");
    }

    #[test]
    fn config_validation_and_counts() {
        let mut cfg = small_cfg();
        cfg.n_heads = 3;
        assert!(cfg.validate().is_err());
        let mut s = ParamStore::new(0);
        Mamba2Block::new(&mut s, "m", small_cfg(), 0).unwrap();
        assert_eq!(s.count(), small_cfg().param_count());
        assert_eq!(Mamba2BlockConfig::new(1280).n_heads, 40);
        assert_eq!(Mamba2BlockConfig::new(80).d_head(), 40);
    }
}
