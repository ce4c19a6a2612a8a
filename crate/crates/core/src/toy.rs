//! Seeded synthetic speech/gesture pairs for smoke runs. Poses are a fixed
//! low-rank mixture of oscillators, so channels are strongly correlated and a
//! model that learns nothing scores visibly worse than one that does.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::clip::{gesture_channels, GESTURE_FPS};
use crate::condition::LocalFeatures;
use crate::error::Result;
use crate::tensor::Tensor;

pub const FEATURE_RATE: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyConfig {
    pub clips: usize,
    pub frames: usize,
    pub joints: usize,
    pub d_a: usize,
    pub rank: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            clips: 4,
            frames: 40,
            joints: 3,
            d_a: 16,
            rank: 2,
            seed: 0,
        }
    }
}

/// One raw (un-normalized) gesture clip with features at 50 Hz.
#[derive(Debug, Clone)]
pub struct ToyClip {
    pub y: Tensor,
    pub feats: LocalFeatures,
}

pub fn toy_clips(cfg: &ToyConfig) -> Result<Vec<ToyClip>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let c = gesture_channels(cfg.joints);
    let mix: Vec<f64> = (0..2 * cfg.rank * c).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let offset: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
    let feat_frames = ((cfg.frames as f64 / GESTURE_FPS) * FEATURE_RATE).round() as usize;
    let mut out = Vec::with_capacity(cfg.clips);
    for _ in 0..cfg.clips {
        let freqs: Vec<f64> = (0..cfg.rank).map(|_| rng.random_range(0.5..1.5)).collect();
        let phases: Vec<f64> = (0..cfg.rank).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
        let basis = |t: f64| -> Vec<f64> {
            let mut b = Vec::with_capacity(2 * cfg.rank);
            for k in 0..cfg.rank {
                let w = std::f64::consts::TAU * freqs[k] * t + phases[k];
                b.push(w.sin());
                b.push(w.cos());
            }
            b
        };
        let mut y = Vec::with_capacity(cfg.frames * c);
        for t in 0..cfg.frames {
            let b = basis(t as f64 / GESTURE_FPS);
            for ch in 0..c {
                let v: f64 = b.iter().enumerate().map(|(k, bk)| bk * mix[k * c + ch]).sum();
                y.push(v + offset[ch]);
            }
        }
        let mut zx = Vec::with_capacity(feat_frames * cfg.d_a);
        for t in 0..feat_frames {
            let b = basis(t as f64 / FEATURE_RATE);
            for i in 0..cfg.d_a {
                zx.push(b[i % b.len()] * (1.0 + (i / b.len()) as f64));
            }
        }
        out.push(ToyClip {
            y: Tensor::new(&[cfg.frames, c], y)?,
            feats: LocalFeatures::new(Tensor::new(&[feat_frames, cfg.d_a], zx)?, FEATURE_RATE)?,
        });
    }
    Ok(out)
}

/// Unit-Gaussian clips of the given shape, the "knows nothing" baseline.
pub fn noise_clips(n: usize, frames: usize, channels: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| crate::diffusion::gaussian(&mut rng, &[frames, channels]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_and_determinism() {
        let cfg = ToyConfig::default();
        let a = toy_clips(&cfg).unwrap();
        let b = toy_clips(&cfg).unwrap();
        assert_eq!(a.len(), 4);
        assert_eq!(a[0].y.shape(), &[40, 15]);
        assert_eq!(a[0].feats.frames(), 100);
        assert_eq!(a[0].y, b[0].y);
        assert_ne!(a[0].y, a[1].y);
    }

    #[test]
    fn poses_are_low_rank() {
        // Centered rows lie in a span of at most 2·rank directions: check via
        // the Gram determinant of 5 random centered rows being ~0.
        let cfg = ToyConfig { rank: 1, ..Default::default() };
        let y = &toy_clips(&cfg).unwrap()[0].y;
        let r0 = y.row(0).to_vec();
        let d: Vec<Vec<f64>> = (1..4).map(|r| y.row(r * 7).iter().zip(&r0).map(|(a, b)| a - b).collect()).collect();
        // Three difference vectors in a 2-D affine span are linearly dependent.
        let g = |i: usize, j: usize| d[i].iter().zip(&d[j]).map(|(a, b)| a * b).sum::<f64>();
        let det = g(0, 0) * (g(1, 1) * g(2, 2) - g(1, 2) * g(2, 1)) - g(0, 1) * (g(1, 0) * g(2, 2) - g(1, 2) * g(2, 0))
            + g(0, 2) * (g(1, 0) * g(2, 1) - g(1, 1) * g(2, 0));
        assert!(det.abs() < 1e-8 * g(0, 0).powi(3).max(1.0), "{det}");
    }
}
