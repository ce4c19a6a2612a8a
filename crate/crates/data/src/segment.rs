//! Cutting synchronized gesture/audio streams into fixed-length windows.

use gestor_core::clip::{AudioClip, GestureSequence};
use gestor_core::Tensor;

use crate::{DataError, Result};

pub const CLIP_SECONDS: f64 = 20.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub gesture: GestureSequence,
    pub audio: AudioClip,
    pub offset_seconds: f64,
    /// Row index of the window's first frame in the source stream.
    pub first_frame: usize,
}

fn exact_count(seconds: f64, rate: f64, what: &str) -> Result<usize> {
    let n = seconds * rate;
    if (n - n.round()).abs() > 1e-9 || n < 1.0 {
        return Err(DataError::Layout(format!("{seconds} s is not a whole number of {what}")));
    }
    Ok(n.round() as usize)
}

/// Non-overlapping windows by default; `stride_seconds` < `seconds` overlaps
/// them. The trailing remainder is dropped.
pub fn segment_clips(
    gesture: &GestureSequence,
    audio: &AudioClip,
    seconds: f64,
    stride_seconds: Option<f64>,
) -> Result<Vec<Segment>> {
    let g_secs = gesture.frames() as f64 / gesture.fps;
    let a_secs = audio.seconds();
    if (g_secs - a_secs).abs() > 0.5 / gesture.fps {
        return Err(DataError::Desync {
            motion: g_secs,
            audio: a_secs,
        });
    }
    let stride = stride_seconds.unwrap_or(seconds);
    if stride <= 0.0 {
        return Err(DataError::Layout("stride must be positive".into()));
    }
    let win_f = exact_count(seconds, gesture.fps, "frames")?;
    let win_a = exact_count(seconds, audio.rate as f64, "samples")?;
    let step_f = exact_count(stride, gesture.fps, "frames")?;
    let step_a = exact_count(stride, audio.rate as f64, "samples")?;
    let mut out = Vec::new();
    let (mut f0, mut a0) = (0, 0);
    while f0 + win_f <= gesture.frames() && a0 + win_a <= audio.samples.len() {
        let c = gesture.channels();
        let y = Tensor::new(&[win_f, c], gesture.y.data()[f0 * c..(f0 + win_f) * c].to_vec())?;
        out.push(Segment {
            gesture: GestureSequence::new(y, gesture.fps)?,
            audio: AudioClip::new(audio.samples[a0..a0 + win_a].to_vec(), audio.rate)?,
            offset_seconds: f0 as f64 / gesture.fps,
            first_frame: f0,
        });
        f0 += step_f;
        a0 += step_a;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use gestor_core::clip::AUDIO_RATE;

    fn streams(seconds: f64) -> (GestureSequence, AudioClip) {
        let frames = (seconds * 20.0).round() as usize;
        let y = Tensor::new(&[frames, 9], (0..frames * 9).map(|i| (i / 9) as f64).collect()).unwrap();
        let n = (seconds * AUDIO_RATE as f64).round() as usize;
        let a = AudioClip::new((0..n).map(|i| (i % 100) as f32 / 100.0).collect(), AUDIO_RATE).unwrap();
        (GestureSequence::new(y, 20.0).unwrap(), a)
    }

    #[test]
    fn sixty_one_seconds_gives_three_windows() {
        let (g, a) = streams(61.0);
        let s = segment_clips(&g, &a, CLIP_SECONDS, None).unwrap();
        assert_eq!(s.len(), 3);
        for (k, seg) in s.iter().enumerate() {
            assert_eq!(seg.gesture.frames(), 400);
            assert_eq!(seg.audio.samples.len(), 320_000);
            assert_eq!(seg.gesture.frames() as f64 / 20.0, seg.audio.samples.len() as f64 / 16_000.0);
            assert_eq!(seg.offset_seconds, 20.0 * k as f64);
            assert_eq!(seg.gesture.y.get2(0, 0), (400 * k) as f64);
        }
    }

    #[test]
    fn short_input_gives_none() {
        let (g, a) = streams(19.0);
        assert!(segment_clips(&g, &a, CLIP_SECONDS, None).unwrap().is_empty());
    }

    #[test]
    fn stride_overlaps_windows() {
        let (g, a) = streams(40.0);
        let s = segment_clips(&g, &a, CLIP_SECONDS, Some(10.0)).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s[1].offset_seconds, 10.0);
    }

    #[test]
    fn desync_beyond_half_frame_is_rejected() {
        let (g, _) = streams(30.0);
        let (_, a) = streams(30.1);
        assert!(matches!(segment_clips(&g, &a, CLIP_SECONDS, None), Err(DataError::Desync { .. })));
        // Within half a frame (25 ms) is accepted.
        let (_, a) = streams(30.02);
        assert_eq!(segment_clips(&g, &a, CLIP_SECONDS, None).unwrap().len(), 1);
    }
}
