//! Audio onsets from spectral flux, gesture beats from velocity minima, and
//! the one-sided Gaussian-kernel alignment score between them.

use gestor_core::clip::{AudioClip, GestureSequence, AUDIO_RATE, ROOT_CHANNELS};
use gestor_core::Error as CoreError;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::{MetricsError, Result};

pub const DEFAULT_SIGMA: f64 = 0.1;
/// Onset-envelope hop: 10 ms at 16 kHz.
pub const FLUX_HOP: usize = 160;
const FLUX_WIN: usize = 512;
/// Minimum spacing between gesture beats, seconds.
pub const GESTURE_MIN_GAP: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BeatSet {
    times: Vec<f64>,
}

impl BeatSet {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.iter().any(|t| !t.is_finite()) || times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(MetricsError::UnsortedBeats);
        }
        Ok(Self { times })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    fn nearest_gap(&self, t: f64) -> f64 {
        let i = self.times.partition_point(|&b| b < t);
        let mut best = f64::INFINITY;
        if i < self.times.len() {
            best = best.min(self.times[i] - t);
        }
        if i > 0 {
            best = best.min(t - self.times[i - 1]);
        }
        best
    }
}

/// Half-wave rectified spectral flux of a Hann-windowed STFT, one value per 10 ms hop.
pub fn onset_envelope(audio: &AudioClip) -> Result<Vec<f64>> {
    if audio.rate != AUDIO_RATE {
        return Err(CoreError::Invalid(format!("beat detection expects {AUDIO_RATE} Hz audio, got {}", audio.rate)).into());
    }
    let x = &audio.samples;
    let frames = x.len().div_ceil(FLUX_HOP);
    let fft = FftPlanner::new().plan_fft_forward(FLUX_WIN);
    let window: Vec<f64> = (0..FLUX_WIN)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / FLUX_WIN as f64).cos())
        .collect();
    let mut prev = vec![0.0; FLUX_WIN / 2 + 1];
    let mut buf = vec![Complex::new(0.0, 0.0); FLUX_WIN];
    let mut env = Vec::with_capacity(frames);
    for f in 0..frames {
        // Window centred on the hop position.
        let centre = (f * FLUX_HOP) as isize;
        for (i, z) in buf.iter_mut().enumerate() {
            let idx = centre + i as isize - (FLUX_WIN / 2) as isize;
            let s = if idx >= 0 { x.get(idx as usize).copied().unwrap_or(0.0) as f64 } else { 0.0 };
            *z = Complex::new(s * window[i], 0.0);
        }
        fft.process(&mut buf);
        let mut flux = 0.0;
        for (p, z) in prev.iter_mut().zip(&buf) {
            let m = z.norm();
            flux += (m - *p).max(0.0);
            *p = m;
        }
        env.push(flux);
    }
    Ok(env)
}

/// Peaks of the onset envelope above an adaptive threshold.
///
/// The envelope is divided by its maximum, so the picked times do not depend
/// on overall gain. A frame is an onset if it is the maximum within ±50 ms and
/// exceeds the local mean over ±100 ms by 0.1 of the peak.
pub fn detect_audio_beats(audio: &AudioClip) -> Result<BeatSet> {
    let env = onset_envelope(audio)?;
    let peak = env.iter().cloned().fold(0.0, f64::max);
    if peak <= 0.0 {
        return Ok(BeatSet::default());
    }
    let env: Vec<f64> = env.iter().map(|v| v / peak).collect();
    let (w_max, w_mean) = (5usize, 10usize);
    let hop_s = FLUX_HOP as f64 / AUDIO_RATE as f64;
    let mut times: Vec<f64> = Vec::new();
    for i in 0..env.len() {
        let lo = i.saturating_sub(w_max);
        let hi = (i + w_max + 1).min(env.len());
        let local_max = env[lo..hi].iter().cloned().fold(f64::MIN, f64::max);
        if env[i] < local_max {
            continue;
        }
        let lo = i.saturating_sub(w_mean);
        let hi = (i + w_mean + 1).min(env.len());
        let mean = env[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
        if env[i] < mean + 0.1 {
            continue;
        }
        let t = i as f64 * hop_s;
        // Flat-topped peaks: keep the first frame only.
        if times.last().is_some_and(|&p| t - p <= w_max as f64 * hop_s) {
            continue;
        }
        times.push(t);
    }
    BeatSet::new(times)
}

/// Local minima of the smoothed joint-speed curve, at least 0.1 s apart.
pub fn detect_gesture_beats(y: &GestureSequence) -> Result<BeatSet> {
    let t = y.frames();
    if t < 3 {
        return Ok(BeatSet::default());
    }
    let c = y.channels();
    let joint_ch = if c > ROOT_CHANNELS { c - ROOT_CHANNELS } else { c };
    // Central-difference speed at frames 1..T−1.
    let speed: Vec<f64> = (1..t - 1)
        .map(|i| {
            let (a, b) = (y.y.row(i - 1), y.y.row(i + 1));
            (0..joint_ch).map(|j| (b[j] - a[j]).powi(2)).sum::<f64>().sqrt() * 0.5 * y.fps
        })
        .collect();
    let smooth: Vec<f64> = (0..speed.len())
        .map(|i| {
            let lo = i.saturating_sub(1);
            let hi = (i + 2).min(speed.len());
            speed[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect();
    let tol = 1e-12 * smooth.iter().cloned().fold(0.0, f64::max).max(1e-300);
    let min_gap = GESTURE_MIN_GAP - 1e-9;
    let mut times: Vec<f64> = Vec::new();
    for i in 1..smooth.len().saturating_sub(1) {
        let falls = smooth[i - 1] - smooth[i] > tol;
        // Walk across a flat bottom before deciding whether the curve rises again.
        let mut j = i;
        while j + 1 < smooth.len() && (smooth[j + 1] - smooth[i]).abs() <= tol {
            j += 1;
        }
        let rises = j + 1 < smooth.len() && smooth[j + 1] - smooth[i] > tol;
        if falls && rises {
            let time = (i + 1) as f64 / y.fps;
            if times.last().is_none_or(|&p| time - p >= min_gap) {
                times.push(time);
            }
        }
    }
    BeatSet::new(times)
}

/// Mean over gesture beats of exp(−d²/2σ²), d the distance to the nearest audio beat.
pub fn beat_align(gesture: &BeatSet, audio: &BeatSet, sigma: f64) -> f64 {
    if gesture.is_empty() || audio.is_empty() || sigma <= 0.0 {
        return 0.0;
    }
    let s: f64 = gesture
        .times()
        .iter()
        .map(|&t| {
            let d = audio.nearest_gap(t);
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .sum();
    s / gesture.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use gestor_core::Tensor;
    use proptest::prelude::*;

    fn clicks(seconds: f64, period: f64, amp: f32) -> AudioClip {
        let n = (seconds * AUDIO_RATE as f64) as usize;
        let mut s = vec![0.0f32; n];
        let mut k = 0.5;
        while k < seconds {
            let at = (k * AUDIO_RATE as f64) as usize;
            for j in 0..80.min(n - at) {
                // Short decaying 2 kHz burst.
                let ph = 2.0 * std::f64::consts::PI * 2000.0 * j as f64 / AUDIO_RATE as f64;
                s[at + j] = amp * (ph.sin() * (-(j as f64) / 20.0).exp()) as f32;
            }
            k += period;
        }
        AudioClip::new(s, AUDIO_RATE).unwrap()
    }

    #[test]
    fn metronome_beats_one_second_apart() {
        let b = detect_audio_beats(&clicks(6.0, 1.0, 0.5)).unwrap();
        assert_eq!(b.len(), 6, "{:?}", b.times());
        for (i, t) in b.times().iter().enumerate() {
            assert!((t - (0.5 + i as f64)).abs() <= 0.02, "{t}");
        }
    }

    #[test]
    fn silence_has_no_beats() {
        let a = AudioClip::new(vec![0.0; 32_000], AUDIO_RATE).unwrap();
        assert!(detect_audio_beats(&a).unwrap().is_empty());
    }

    #[test]
    fn gain_does_not_move_beats() {
        let a = detect_audio_beats(&clicks(4.0, 0.7, 0.2)).unwrap();
        let b = detect_audio_beats(&clicks(4.0, 0.7, 0.4)).unwrap();
        assert_eq!(a, b);
    }

    fn motion(frames: usize, f: impl Fn(f64) -> f64) -> GestureSequence {
        // One joint (3 channels) plus root channels held at zero.
        let mut d = Vec::new();
        for i in 0..frames {
            let v = f(i as f64 / 20.0);
            d.extend([v, 0.5 * v, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        }
        GestureSequence::new(Tensor::new(&[frames, 9], d).unwrap(), 20.0).unwrap()
    }

    #[test]
    fn constant_velocity_has_no_beats() {
        assert!(detect_gesture_beats(&motion(60, |t| 0.3 * t)).unwrap().is_empty());
        assert!(detect_gesture_beats(&motion(60, |_| 1.0)).unwrap().is_empty());
    }

    #[test]
    fn one_hertz_oscillation_gives_two_beats_per_second() {
        let b = detect_gesture_beats(&motion(200, |t| (2.0 * std::f64::consts::PI * t).sin())).unwrap();
        let rate = b.len() as f64 / 10.0;
        assert!((rate - 2.0).abs() <= 1.0, "{rate}");
        assert!(b.len() >= 18, "{:?}", b.times());
    }

    #[test]
    fn shifting_motion_shifts_beats() {
        let f = |t: f64| (2.0 * std::f64::consts::PI * 0.8 * t).sin();
        let a = detect_gesture_beats(&motion(120, f)).unwrap();
        let shift = 7usize;
        let b = detect_gesture_beats(&motion(120, |t| f(t + shift as f64 / 20.0))).unwrap();
        let dt = shift as f64 / 20.0;
        let moved: Vec<f64> = b.times().iter().map(|t| t + dt).collect();
        for t in &moved {
            assert!(a.times().iter().any(|s| (s - t).abs() < 1e-9) || *t > 5.8, "{t}");
        }
    }

    #[test]
    fn align_closed_forms() {
        let a = BeatSet::new(vec![0.5, 1.5, 2.5]).unwrap();
        assert!((beat_align(&a, &a, DEFAULT_SIGMA) - 1.0).abs() < 1e-9);
        let off = BeatSet::new(vec![0.6, 1.4, 2.6]).unwrap();
        assert!((beat_align(&off, &a, DEFAULT_SIGMA) - (-0.5f64).exp()).abs() < 1e-9);
        assert_eq!(beat_align(&BeatSet::default(), &a, DEFAULT_SIGMA), 0.0);
        assert_eq!(beat_align(&a, &BeatSet::default(), DEFAULT_SIGMA), 0.0);
    }

    #[test]
    fn unsorted_beats_rejected() {
        assert!(BeatSet::new(vec![1.0, 1.0]).is_err());
        assert!(BeatSet::new(vec![2.0, 1.0]).is_err());
    }

    proptest! {
        #[test]
        fn align_in_unit_interval_and_non_increasing_in_jitter(
            base in proptest::collection::vec(0.0f64..0.9, 1..20),
            dir in proptest::collection::vec(-1.0f64..1.0, 20),
        ) {
            let mut t = 0.0;
            let audio: Vec<f64> = base.iter().map(|d| { t += 0.2 + d; t }).collect();
            let audio = BeatSet::new(audio).unwrap();
            let mut last = 1.0 + 1e-12;
            for k in 0..6 {
                let amp = k as f64 * 0.01;
                let g: Vec<f64> = audio.times().iter().zip(&dir).map(|(t, d)| t + amp * d).collect();
                let s = beat_align(&BeatSet::new(g).unwrap(), &audio, DEFAULT_SIGMA);
                prop_assert!((0.0..=1.0).contains(&s));
                prop_assert!(s <= last + 1e-12);
                last = s;
            }
        }
    }
}
