//! Speech conditioning: frame-level features, a global style token from a
//! Mamba-2 scan, downsampling to the gesture rate and diffusion-step fusion.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::adaln::LN_EPS;
use crate::clip::{AudioClip, AUDIO_RATE, GESTURE_FPS};
use crate::error::{invalid, Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::Padding;
use crate::mamba::{Mamba2Block, Mamba2BlockConfig};
use crate::nn::{Conv1d, Linear, Mlp};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const LOG_FLOOR: f64 = 1e-10;
pub const DOWNSAMPLE_KERNEL: usize = 201;

/// Frame-level speech features and their rate.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalFeatures {
    pub zx: Tensor,
    pub rate_hz: f64,
}

impl LocalFeatures {
    pub fn new(zx: Tensor, rate_hz: f64) -> Result<Self> {
        if !(rate_hz > 0.0) {
            return Err(invalid!("feature rate must be positive"));
        }
        if zx.rank() != 2 {
            return Err(invalid!("features must be T×d"));
        }
        Ok(Self { zx, rate_hz })
    }

    pub fn frames(&self) -> usize {
        self.zx.rows()
    }

    pub fn dim(&self) -> usize {
        self.zx.cols()
    }
}

pub trait FeatureProvider {
    fn dim(&self) -> usize;
    fn extract(&self, audio: &AudioClip) -> Result<LocalFeatures>;
}

fn check_audio(audio: &AudioClip) -> Result<()> {
    if audio.samples.is_empty() {
        return Err(invalid!("empty audio"));
    }
    if audio.rate != AUDIO_RATE {
        return Err(invalid!("expected {AUDIO_RATE} Hz audio, got {}", audio.rate));
    }
    Ok(())
}

/// Log mel-band energies of a Hann-windowed short-time spectrum.
pub struct LogMel {
    pub n_mels: usize,
    pub win: usize,
    pub hop: usize,
    n_fft: usize,
    window: Vec<f64>,
    filters: Vec<Vec<(usize, f64)>>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for LogMel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LogMel")
            .field("n_mels", &self.n_mels)
            .field("win", &self.win)
            .field("hop", &self.hop)
            .finish()
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

impl Default for LogMel {
    /// 80 bands, 25 ms window, 20 ms hop at 16 kHz.
    fn default() -> Self {
        Self::new(80, 400, 320)
    }
}

impl LogMel {
    pub fn new(n_mels: usize, win: usize, hop: usize) -> Self {
        let n_fft = win.next_power_of_two();
        let window = (0..win)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / win as f64).cos())
            .collect();
        let n_bins = n_fft / 2 + 1;
        let sr = AUDIO_RATE as f64;
        let (lo, hi) = (hz_to_mel(0.0), hz_to_mel(sr / 2.0));
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let filters = (0..n_mels)
            .map(|m| {
                let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
                (0..n_bins)
                    .filter_map(|k| {
                        let f = k as f64 * sr / n_fft as f64;
                        let w = if f > l && f <= c {
                            (f - l) / (c - l)
                        } else if f > c && f < r {
                            (r - f) / (r - c)
                        } else {
                            0.0
                        };
                        (w > 0.0).then_some((k, w))
                    })
                    .collect()
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(n_fft);
        Self {
            n_mels,
            win,
            hop,
            n_fft,
            window,
            filters,
            fft,
        }
    }

    pub fn rate_hz(&self) -> f64 {
        AUDIO_RATE as f64 / self.hop as f64
    }

    /// Frame count for `len` samples: ⌊len / hop⌋, at least one.
    pub fn frames_for(&self, len: usize) -> usize {
        (len / self.hop).max(1)
    }
}

impl FeatureProvider for LogMel {
    fn dim(&self) -> usize {
        self.n_mels
    }

    fn extract(&self, audio: &AudioClip) -> Result<LocalFeatures> {
        check_audio(audio)?;
        let x = &audio.samples;
        let frames = self.frames_for(x.len());
        let mut out = Vec::with_capacity(frames * self.n_mels);
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        let mut power = vec![0.0; self.n_fft / 2 + 1];
        for f in 0..frames {
            let start = f * self.hop;
            for (i, z) in buf.iter_mut().enumerate() {
                let s = if i < self.win { x.get(start + i).copied().unwrap_or(0.0) as f64 } else { 0.0 };
                *z = Complex::new(s * self.window.get(i).copied().unwrap_or(0.0), 0.0);
            }
            self.fft.process(&mut buf);
            for (p, z) in power.iter_mut().zip(&buf) {
                *p = z.norm_sqr();
            }
            for filt in &self.filters {
                let e: f64 = filt.iter().map(|&(k, w)| w * power[k]).sum();
                out.push(e.max(LOG_FLOOR).ln());
            }
        }
        LocalFeatures::new(Tensor::new(&[frames, self.n_mels], out)?, self.rate_hz())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureSidecar {
    pub rate_hz: f64,
    pub d_a: usize,
    pub source: String,
}

/// Precomputed features stored as a tensor file plus a `.json` sidecar.
#[derive(Debug, Clone)]
pub struct FileFeatures {
    pub path: PathBuf,
}

impl FileFeatures {
    pub fn sidecar_path(path: &Path) -> PathBuf {
        let mut p = path.as_os_str().to_owned();
        p.push(".json");
        PathBuf::from(p)
    }

    pub fn save(path: &Path, feats: &LocalFeatures, source: &str) -> Result<()> {
        feats.zx.save(path)?;
        let side = FeatureSidecar {
            rate_hz: feats.rate_hz,
            d_a: feats.dim(),
            source: source.to_string(),
        };
        std::fs::write(Self::sidecar_path(path), serde_json::to_string_pretty(&side)?)?;
        Ok(())
    }

    pub fn load(&self) -> Result<LocalFeatures> {
        let side: FeatureSidecar = serde_json::from_str(&std::fs::read_to_string(Self::sidecar_path(&self.path))?)?;
        let zx = Tensor::load(&self.path)?;
        if zx.rank() != 2 || zx.cols() != side.d_a {
            return Err(Error::Format(format!(
                "feature file has shape {:?} but sidecar declares d_a = {}",
                zx.shape(),
                side.d_a
            )));
        }
        LocalFeatures::new(zx, side.rate_hz)
    }
}

impl FeatureProvider for FileFeatures {
    fn dim(&self) -> usize {
        self.load().map(|f| f.dim()).unwrap_or(0)
    }

    /// Loads the stored features and checks they span the audio within one frame.
    fn extract(&self, audio: &AudioClip) -> Result<LocalFeatures> {
        check_audio(audio)?;
        let f = self.load()?;
        let expect = audio.seconds() * f.rate_hz;
        if (f.frames() as f64 - expect).abs() > 1.0 {
            return Err(invalid!(
                "feature file has {} frames, audio implies {expect:.1}",
                f.frames()
            ));
        }
        Ok(f)
    }
}

/// Sinusoidal embedding of a diffusion step: `[sin(n·ω_k) ‖ cos(n·ω_k)]`, ω_k = 10000^(−k/half).
pub fn timestep_embedding(n: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut e = vec![0.0; dim];
    for k in 0..half {
        let w = 10000f64.powf(-(k as f64) / half.max(1) as f64);
        e[k] = (n as f64 * w).sin();
        e[half + k] = (n as f64 * w).cos();
    }
    if dim % 2 == 1 {
        e[dim - 1] = (n as f64).sin();
    }
    Tensor::new(&[1, dim], e).expect("dim ≥ 1")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionConfig {
    /// Local feature width.
    pub d_a: usize,
    /// Condition width.
    pub d_c: usize,
    pub style: Mamba2BlockConfig,
    pub kernel: usize,
    /// Diffusion steps accepted by the timestep embedding.
    pub n_steps: usize,
}

impl ConditionConfig {
    pub fn new(d_a: usize, d_c: usize, n_steps: usize) -> Self {
        Self {
            d_a,
            d_c,
            style: Mamba2BlockConfig::with(d_a, 2, 16, 4),
            kernel: DOWNSAMPLE_KERNEL,
            n_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_a == 0 || self.d_c == 0 {
            return Err(invalid!("condition widths must be positive"));
        }
        if self.style.d_model != self.d_a {
            return Err(invalid!("style block width {} ≠ d_a {}", self.style.d_model, self.d_a));
        }
        if self.kernel % 2 == 0 {
            return Err(invalid!("downsampling kernel must be odd, got {}", self.kernel));
        }
        self.style.validate()
    }

    pub fn param_count(&self) -> usize {
        self.style.param_count()
            + Linear::param_count(2 * self.d_a, self.d_c, true)
            + Conv1d::param_count(self.kernel, self.d_c, self.d_c, true)
            + Mlp::param_count(self.d_c, self.d_c, self.d_c)
    }
}

#[derive(Debug, Clone)]
pub struct ConditionExtractor {
    pub cfg: ConditionConfig,
    pub style: Mamba2Block,
    pub fuse: Linear,
    pub downsample: Conv1d,
    pub step_mlp: Mlp,
}

impl ConditionExtractor {
    /// The downsampling kernel starts as a centred identity tap (unit gain,
    /// so constant streams stay constant); everything else is randomly initialized.
    pub fn new(store: &mut ParamStore, name: &str, cfg: ConditionConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let style = Mamba2Block::new(store, &format!("{name}.style"), cfg.style, seed)?;
        let fuse = Linear::new(store, &format!("{name}.fuse"), 2 * cfg.d_a, cfg.d_c, true);
        let downsample = Conv1d::new(
            store,
            &format!("{name}.downsample"),
            cfg.kernel,
            cfg.d_c,
            cfg.d_c,
            Padding::Reflect(cfg.kernel / 2),
            true,
        );
        downsample.set_center_tap(store, &Tensor::eye(cfg.d_c))?;
        let step_mlp = Mlp::new(store, &format!("{name}.step"), cfg.d_c, cfg.d_c, cfg.d_c);
        Ok(Self {
            cfg,
            style,
            fuse,
            downsample,
            step_mlp,
        })
    }

    fn check_features(&self, zx: &Var) -> Result<()> {
        if zx.rows() == 0 || zx.cols() != self.cfg.d_a {
            return Err(invalid!("expected T_a×{} features, got {:?}", self.cfg.d_a, zx.shape()));
        }
        Ok(())
    }

    /// Last output token of the style scan over the (row-normalized) features.
    pub fn global_style(&self, g: &Graph, store: &ParamStore, zx: &Var) -> Result<Var> {
        self.check_features(zx)?;
        let y = self.style.forward(g, store, zx)?;
        g.select_row(&y, y.rows() - 1)
    }

    /// `[Z_x ‖ z_s]` per frame, projected to the condition width.
    pub fn broadcast_and_fuse(&self, g: &Graph, store: &ParamStore, zx: &Var, zs: &Var) -> Result<Var> {
        self.check_features(zx)?;
        let rep = g.repeat_rows(zs, zx.rows())?;
        let cat = g.concat_cols(&[zx.clone(), rep])?;
        self.fuse.forward(g, store, &cat)
    }

    pub fn downsample_to_gesture_rate(&self, g: &Graph, store: &ParamStore, fused: &Var, t: usize) -> Result<Var> {
        if t == 0 {
            return Err(invalid!("target length must be ≥ 1"));
        }
        let r = g.resample_rows(fused, t)?;
        self.downsample.forward(g, store, &r)
    }

    /// Everything that does not depend on the diffusion step.
    pub fn condition_base(&self, g: &Graph, store: &ParamStore, feats: &LocalFeatures, t: usize) -> Result<Var> {
        let zx = g.constant(feats.zx.clone());
        self.check_features(&zx)?;
        let zx = g.layer_norm(&zx, LN_EPS)?;
        let zs = self.global_style(g, store, &zx)?;
        let fused = self.broadcast_and_fuse(g, store, &zx, &zs)?;
        self.downsample_to_gesture_rate(g, store, &fused, t)
    }

    pub fn fuse_timestep(&self, g: &Graph, store: &ParamStore, c: &Var, n: usize) -> Result<Var> {
        if n == 0 || n > self.cfg.n_steps {
            return Err(invalid!("diffusion step {n} outside 1..={}", self.cfg.n_steps));
        }
        let emb = g.constant(timestep_embedding(n, self.cfg.d_c));
        let e = self.step_mlp.forward(g, store, &emb)?;
        g.add_row(c, &e)
    }

    /// Full pipeline: `round(20·L)` condition rows for `L` seconds of audio.
    pub fn condition(
        &self,
        g: &Graph,
        store: &ParamStore,
        provider: &dyn FeatureProvider,
        audio: &AudioClip,
        n: usize,
    ) -> Result<Var> {
        let feats = provider.extract(audio)?;
        let t = audio.gesture_frames().max(1);
        let base = self.condition_base(g, store, &feats, t)?;
        self.fuse_timestep(g, store, &base, n)
    }
}

/// Gesture frames for `seconds` of audio.
pub fn frames_for_seconds(seconds: f64) -> usize {
    (GESTURE_FPS * seconds).round() as usize
}
