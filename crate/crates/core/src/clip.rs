//! Audio and gesture containers shared by the model, data and metrics code.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

pub const GESTURE_FPS: f64 = 20.0;
pub const AUDIO_RATE: u32 = 16_000;
/// Root channels appended after the joint exponential maps: 3 translational, 3 rotational velocities.
pub const ROOT_CHANNELS: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, rate: u32) -> Result<Self> {
        if rate == 0 {
            return Err(invalid!("sample rate must be positive"));
        }
        Ok(Self { samples, rate })
    }

    pub fn seconds(&self) -> f64 {
        self.samples.len() as f64 / self.rate as f64
    }

    /// Gesture frames matching this clip's duration.
    pub fn gesture_frames(&self) -> usize {
        (GESTURE_FPS * self.seconds()).round() as usize
    }

    /// Rescales so the largest magnitude is at most 1.
    pub fn normalize_peak(&mut self) {
        let peak = self.samples.iter().fold(0.0f32, |m, s| m.max(s.abs()));
        if peak > 1.0 {
            self.samples.iter_mut().for_each(|s| *s /= peak);
        }
    }
}

/// T×(3J+6) gesture frames: joint exponential maps then root velocities.
#[derive(Debug, Clone, PartialEq)]
pub struct GestureSequence {
    pub y: Tensor,
    pub fps: f64,
}

impl GestureSequence {
    pub fn new(y: Tensor, fps: f64) -> Result<Self> {
        if y.rank() != 2 {
            return Err(invalid!("gesture tensor must be T×channels, got {:?}", y.shape()));
        }
        if fps <= 0.0 {
            return Err(invalid!("fps must be positive"));
        }
        Ok(Self { y, fps })
    }

    pub fn frames(&self) -> usize {
        self.y.rows()
    }

    pub fn channels(&self) -> usize {
        self.y.cols()
    }

    pub fn joints(&self) -> usize {
        self.channels().saturating_sub(ROOT_CHANNELS) / 3
    }
}

pub fn gesture_channels(joints: usize) -> usize {
    3 * joints + ROOT_CHANNELS
}

/// Per-channel z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Floor on the standard deviation so constant channels stay finite.
    pub const MIN_STD: f64 = 1e-6;

    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn fit<'a>(clips: impl IntoIterator<Item = &'a Tensor>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut n = 0usize;
        for t in clips {
            let c = t.cols();
            if sum.is_empty() {
                sum = vec![0.0; c];
                sq = vec![0.0; c];
            } else if sum.len() != c {
                return Err(invalid!("channel count changes between clips"));
            }
            for r in 0..t.rows() {
                for (j, &v) in t.row(r).iter().enumerate() {
                    sum[j] += v;
                    sq[j] += v * v;
                }
            }
            n += t.rows();
        }
        if n == 0 {
            return Err(invalid!("no frames to fit normalization"));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n as f64 - m * m).max(0.0).sqrt().max(Self::MIN_STD))
            .collect();
        Ok(Self { mean, std })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, t: &Tensor) -> Result<()> {
        if t.cols() != self.channels() {
            return Err(invalid!("stats cover {} channels, tensor has {}", self.channels(), t.cols()));
        }
        Ok(())
    }

    pub fn normalize(&self, t: &Tensor) -> Result<Tensor> {
        self.check(t)?;
        let c = t.cols();
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i % c]) / self.std[i % c])
            .collect();
        Tensor::new(t.shape(), data)
    }

    pub fn denormalize(&self, t: &Tensor) -> Result<Tensor> {
        self.check(t)?;
        let c = t.cols();
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * self.std[i % c] + self.mean[i % c])
            .collect();
        Tensor::new(t.shape(), data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_arithmetic() {
        let a = AudioClip::new(vec![0.0; 320_000], AUDIO_RATE).unwrap();
        assert_eq!(a.gesture_frames(), 400);
        assert_eq!(gesture_channels(59), 183);
    }

    #[test]
    fn normalization_round_trip() {
        let t = Tensor::new(&[4, 2], vec![1., 10., 2., 10., 3., 10., 4., 10.]).unwrap();
        let s = NormStats::fit([&t]).unwrap();
        let z = s.normalize(&t).unwrap();
        let col0: f64 = (0..4).map(|r| z.get2(r, 0)).sum();
        assert!(col0.abs() < 1e-12);
        assert!(z.data().iter().all(|v| v.is_finite()));
        assert!(s.denormalize(&z).unwrap().max_abs_diff(&t) < 1e-12);
    }
}
