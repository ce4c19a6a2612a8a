//! The full speech-to-gesture denoiser: condition extractor, gesture codec,
//! AdaLN Mamba-2 stack and DDPM schedule, plus seeded training steps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adaln::{AdaLNStack, AdaLNStackConfig};
use crate::clip::gesture_channels;
use crate::codec::{CodecConfig, GestureCodec};
use crate::condition::{ConditionConfig, ConditionExtractor, LocalFeatures, DOWNSAMPLE_KERNEL};
use crate::diffusion::{self, gaussian, Schedule};
use crate::error::{invalid, Error, Result};
use crate::graph::{Graph, Var};
use crate::mamba::{default_heads, Mamba2BlockConfig};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::ssd::ScanForm;
use crate::tensor::Tensor;

fn default_joints() -> usize {
    59
}
fn default_d_a() -> usize {
    80
}
fn default_style_d_state() -> usize {
    16
}
fn default_kernel() -> usize {
    DOWNSAMPLE_KERNEL
}
fn default_mlp_ratio() -> usize {
    4
}

/// Model and schedule hyperparameters, as read from the JSON config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(rename = "N")]
    pub n_steps: usize,
    pub beta1: f64,
    #[serde(rename = "betaN")]
    pub beta_n: f64,
    #[serde(rename = "M")]
    pub m: usize,
    pub d_model: usize,
    pub d_state: usize,
    pub conv_width: usize,
    pub expand: usize,
    pub seed: u64,
    #[serde(default = "default_joints")]
    pub joints: usize,
    /// Local speech feature width.
    #[serde(default = "default_d_a")]
    pub d_a: usize,
    /// Condition width; defaults to `d_model`.
    #[serde(default)]
    pub d_c: Option<usize>,
    #[serde(default)]
    pub n_heads: Option<usize>,
    #[serde(default = "default_style_d_state")]
    pub style_d_state: usize,
    #[serde(default = "default_kernel")]
    pub cond_kernel: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default)]
    pub scan: ScanForm,
}

impl Default for ModelConfig {
    /// Full-size settings: 6 blocks of width 1280, state 256, conv 4, expansion 2.
    fn default() -> Self {
        Self {
            n_steps: diffusion::DEFAULT_STEPS,
            beta1: diffusion::DEFAULT_BETA1,
            beta_n: diffusion::DEFAULT_BETA_N,
            m: 6,
            d_model: 1280,
            d_state: 256,
            conv_width: 4,
            expand: 2,
            seed: 0,
            joints: default_joints(),
            d_a: default_d_a(),
            d_c: None,
            n_heads: None,
            style_d_state: default_style_d_state(),
            cond_kernel: default_kernel(),
            mlp_ratio: default_mlp_ratio(),
            scan: ScanForm::Linear,
        }
    }
}

impl ModelConfig {
    /// A desk-sized configuration for tests and toy runs.
    pub fn small(joints: usize) -> Self {
        Self {
            m: 2,
            d_model: 32,
            d_state: 8,
            joints,
            style_d_state: 4,
            mlp_ratio: 2,
            ..Self::default()
        }
    }

    pub fn channels(&self) -> usize {
        gesture_channels(self.joints)
    }

    pub fn d_c(&self) -> usize {
        self.d_c.unwrap_or(self.d_model)
    }

    pub fn block(&self) -> Mamba2BlockConfig {
        let mut b = Mamba2BlockConfig::with(self.d_model, self.expand, self.d_state, self.conv_width);
        b.n_heads = self.n_heads.unwrap_or_else(|| default_heads(self.expand * self.d_model));
        b.scan = self.scan;
        b
    }

    pub fn stack(&self) -> AdaLNStackConfig {
        AdaLNStackConfig {
            m: self.m,
            d_model: self.d_model,
            d_cond: self.d_c(),
            mlp_ratio: self.mlp_ratio,
            block: self.block(),
        }
    }

    pub fn condition(&self) -> ConditionConfig {
        let mut c = ConditionConfig::new(self.d_a, self.d_c(), self.n_steps);
        c.style = Mamba2BlockConfig::with(self.d_a, self.expand, self.style_d_state, self.conv_width);
        c.style.scan = self.scan;
        c.kernel = self.cond_kernel;
        c
    }

    pub fn codec(&self) -> CodecConfig {
        CodecConfig {
            channels: self.channels(),
            d_model: self.d_model,
            decoder_bias: false,
        }
    }

    pub fn schedule(&self) -> Result<Schedule> {
        Schedule::linear(self.n_steps, self.beta1, self.beta_n)
    }

    pub fn validate(&self) -> Result<()> {
        if self.joints == 0 {
            return Err(invalid!("joints must be positive"));
        }
        self.schedule()?;
        self.stack().validate()?;
        self.condition().validate()
    }

    pub fn param_count(&self) -> usize {
        self.codec().param_count() + self.condition().param_count() + self.stack().param_count()
    }
}

/// One normalized gesture clip with its speech features.
#[derive(Debug, Clone)]
pub struct TrainingClip {
    pub y0: Tensor,
    pub feats: LocalFeatures,
}

#[derive(Debug, Clone)]
pub struct GestureModel {
    pub cfg: ModelConfig,
    pub codec: GestureCodec,
    pub cond: ConditionExtractor,
    pub stack: AdaLNStack,
    pub schedule: Schedule,
}

impl GestureModel {
    pub fn new(store: &mut ParamStore, cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let codec = GestureCodec::new(store, "codec", cfg.codec())?;
        let cond = ConditionExtractor::new(store, "cond", cfg.condition(), cfg.seed ^ 0x5157)?;
        let stack = AdaLNStack::mamba(store, "stack", &cfg.stack(), cfg.seed)?;
        let schedule = cfg.schedule()?;
        Ok(Self {
            cfg,
            codec,
            cond,
            stack,
            schedule,
        })
    }

    /// Builds the parameter store and the model from one config.
    pub fn init(cfg: ModelConfig) -> Result<(ParamStore, Self)> {
        let mut store = ParamStore::new(cfg.seed);
        let model = Self::new(&mut store, cfg)?;
        Ok((store, model))
    }

    /// ε̂ = decode(stack(encode(yⁿ), C(n))) given the step-independent condition.
    pub fn predict_noise(&self, g: &Graph, store: &ParamStore, yn: &Var, base: &Var, n: usize) -> Result<Var> {
        let c = self.cond.fuse_timestep(g, store, base, n)?;
        let h = self.codec.encode(g, store, yn)?;
        let h = self.stack.forward(g, store, &h, &c)?;
        self.codec.decode(g, store, &h)
    }

    /// Mean noise-prediction error over `clips`, with a step and noise draw per clip.
    pub fn training_loss<R: Rng + ?Sized>(
        &self,
        g: &Graph,
        store: &ParamStore,
        clips: &[TrainingClip],
        rng: &mut R,
    ) -> Result<Var> {
        if clips.is_empty() {
            return Err(invalid!("empty batch"));
        }
        let mut total: Option<Var> = None;
        for clip in clips {
            if clip.y0.cols() != self.cfg.channels() {
                return Err(invalid!("clip has {} channels, model expects {}", clip.y0.cols(), self.cfg.channels()));
            }
            let n = rng.random_range(1..=self.schedule.steps());
            let eps = gaussian(rng, clip.y0.shape());
            let yn = self.schedule.forward_noise(&clip.y0, n, &eps)?;
            let base = self.cond.condition_base(g, store, &clip.feats, clip.y0.rows())?;
            let eps_hat = self.predict_noise(g, store, &g.constant(yn), &base, n)?;
            let l = g.mse(&eps_hat, &g.constant(eps))?;
            total = Some(match total {
                Some(t) => g.add(&t, &l)?,
                None => l,
            });
        }
        g.scale(&total.expect("non-empty batch"), 1.0 / clips.len() as f64)
    }

    /// Ancestral sampling of `frames` normalized gesture frames.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        store: &ParamStore,
        feats: &LocalFeatures,
        frames: usize,
        rng: &mut R,
    ) -> Result<Tensor> {
        let g = Graph::inference();
        let base = self.cond.condition_base(&g, store, feats, frames)?.to_tensor();
        let mut pred = |y: &Tensor, n: usize| {
            let g = Graph::inference();
            let out = self.predict_noise(&g, store, &g.constant(y.clone()), &g.constant(base.clone()), n)?;
            Ok(out.to_tensor())
        };
        diffusion::sample(&self.schedule, &mut pred, &[frames, self.cfg.channels()], rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub adam: AdamConfig,
    /// Smoothing of the logged loss.
    pub ema_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch: 4,
            adam: AdamConfig::default(),
            ema_decay: 0.9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    pub ema: f64,
    pub grad_norm: f64,
}

/// Holds optimizer state; step `k` draws from RNG stream `k`, so a resumed run
/// replays exactly the trajectory of an uninterrupted one.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub adam: Adam,
    pub step: u64,
    pub ema: Option<f64>,
    pub seed: u64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, store: &ParamStore, seed: u64) -> Self {
        Self {
            cfg,
            adam: Adam::new(cfg.adam, store),
            step: 0,
            ema: None,
            seed,
        }
    }

    pub fn step_rng(&self, step: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(step);
        rng
    }

    pub fn train_step(&mut self, model: &GestureModel, store: &mut ParamStore, clips: &[TrainingClip]) -> Result<StepLog> {
        if clips.is_empty() {
            return Err(invalid!("no training clips"));
        }
        let mut rng = self.step_rng(self.step);
        let batch: Vec<TrainingClip> = if clips.len() <= self.cfg.batch {
            clips.to_vec()
        } else {
            (0..self.cfg.batch)
                .map(|_| clips[rng.random_range(0..clips.len())].clone())
                .collect()
        };
        let g = Graph::new();
        let loss = model.training_loss(&g, store, &batch, &mut rng)?;
        let value = loss.data()[0];
        // Reject before the update so the caller still holds the last good state.
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss {value} at step {}", self.step + 1)));
        }
        let grads = g.backward(&loss)?;
        drop(g);
        let grad_norm = self.adam.step(store, &grads)?;
        self.step += 1;
        let d = self.cfg.ema_decay;
        let ema = match self.ema {
            Some(e) => d * e + (1.0 - d) * value,
            None => value,
        };
        self.ema = Some(ema);
        Ok(StepLog {
            step: self.step,
            loss: value,
            ema,
            grad_norm,
        })
    }
}
