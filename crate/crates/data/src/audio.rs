//! WAV input/output and rational-ratio audio downsampling.

use std::path::Path;

use gestor_core::clip::AudioClip;

use crate::{DataError, Result};

/// Reads PCM (8–32 bit) or float WAV, mixing channels down to mono in [−1, 1].
pub fn read_wav(path: &Path) -> Result<AudioClip> {
    let mut r = hound::WavReader::open(path)?;
    let spec = r.spec();
    let ch = spec.channels as usize;
    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => r.samples::<f32>().collect::<Result<_, _>>()?,
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f32;
            r.samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<Result<_, _>>()?
        }
    };
    let mono = interleaved
        .chunks(ch)
        .map(|f| f.iter().sum::<f32>() / ch as f32)
        .map(|v| v.clamp(-1.0, 1.0))
        .collect();
    Ok(AudioClip::new(mono, spec.sample_rate)?)
}

/// 16-bit PCM mono.
pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for &s in &clip.samples {
        w.write_sample((s.clamp(-1.0, 1.0) * i16::MAX as f32).round() as i16)?;
    }
    w.finalize()?;
    Ok(())
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Zero crossings of the low-pass kernel on each side, at the output rate.
const SINC_HALF_ZEROS: f64 = 24.0;
/// Cutoff as a fraction of the output Nyquist frequency.
const CUTOFF: f64 = 0.94;

fn kaiser(x: f64, beta: f64) -> f64 {
    // x in [−1, 1]; I0 by its power series.
    let i0 = |z: f64| {
        let (mut sum, mut term, mut k) = (1.0, 1.0, 1.0);
        while term > 1e-12 * sum {
            term *= (z / (2.0 * k)).powi(2);
            sum += term;
            k += 1.0;
        }
        sum
    };
    i0(beta * (1.0 - x * x).max(0.0).sqrt()) / i0(beta)
}

/// Windowed-sinc polyphase downsampler: the `up` filter phases are built once
/// and reused; each is normalized to unit DC gain. Output length is
/// `round(len · target / source)`.
pub fn resample_audio(a: &AudioClip, target: u32) -> Result<AudioClip> {
    if target > a.rate {
        return Err(DataError::Upsample {
            from: a.rate as f64,
            to: target as f64,
        });
    }
    if target == a.rate {
        return Ok(a.clone());
    }
    let g = gcd(a.rate as u64, target as u64);
    let (up, down) = (target as u64 / g, a.rate as u64 / g);
    let out_len = ((a.samples.len() as f64 * target as f64 / a.rate as f64).round()) as usize;
    // Low-pass at CUTOFF · target/2, expressed in input samples.
    let fc = CUTOFF * target as f64 / a.rate as f64;
    let half = (SINC_HALF_ZEROS / fc).ceil() as i64;
    let phases: Vec<Vec<f64>> = (0..up)
        .map(|p| {
            let frac = p as f64 / up as f64;
            let mut h: Vec<f64> = (-half + 1..=half)
                .map(|k| {
                    let x = k as f64 - frac;
                    let sinc = if x == 0.0 { 1.0 } else { (std::f64::consts::PI * fc * x).sin() / (std::f64::consts::PI * fc * x) };
                    fc * sinc * kaiser(x / half as f64, 8.0)
                })
                .collect();
            let s: f64 = h.iter().sum();
            h.iter_mut().for_each(|v| *v /= s);
            h
        })
        .collect();
    let len = a.samples.len() as i64;
    let mut out = Vec::with_capacity(out_len);
    for n in 0..out_len as u64 {
        let pos = n * down;
        let base = (pos / up) as i64;
        let h = &phases[(pos % up) as usize];
        let mut acc = 0.0;
        for (i, w) in h.iter().enumerate() {
            // Tap i sits at input index base + (i − half + 1); edges clamp.
            let idx = (base + i as i64 - half + 1).clamp(0, len - 1);
            acc += w * a.samples[idx as usize] as f64;
        }
        out.push(acc as f32);
    }
    Ok(AudioClip::new(out, target)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Bin with the largest DFT magnitude in lo..hi, by direct summation.
    fn peak_bin(x: &[f32], lo: usize, hi: usize) -> usize {
        let n = x.len() as f64;
        (lo..hi)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (t, &v) in x.iter().enumerate() {
                    let ph = 2.0 * std::f64::consts::PI * k as f64 * t as f64 / n;
                    re += v as f64 * ph.cos();
                    im -= v as f64 * ph.sin();
                }
                (k, re * re + im * im)
            })
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap()
            .0
    }

    fn tone(hz: f64, rate: u32, n: usize) -> AudioClip {
        let s = (0..n).map(|i| (0.5 * (2.0 * std::f64::consts::PI * hz * i as f64 / rate as f64).sin()) as f32).collect();
        AudioClip::new(s, rate).unwrap()
    }

    #[test]
    fn one_second_keeps_its_duration() {
        let a = tone(440.0, 44_100, 44_100);
        assert_eq!(resample_audio(&a, 16_000).unwrap().samples.len(), 16_000);
        let b = tone(440.0, 48_000, 48_001);
        assert_eq!(resample_audio(&b, 16_000).unwrap().samples.len(), 16_000);
    }

    #[test]
    fn tone_peak_stays_at_one_khz() {
        let a = tone(1000.0, 44_100, 44_100);
        let r = resample_audio(&a, 16_000).unwrap();
        // 1 s at 16 kHz: bin spacing is 1 Hz.
        let k = peak_bin(&r.samples[..16_000], 990, 1011);
        assert!((k as i64 - 1000).abs() <= 1, "{k}");
        // Amplitude preserved well inside the passband.
        let rms = (r.samples[1000..15_000].iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / 14_000.0).sqrt();
        assert!((rms - 0.5 / 2f64.sqrt()).abs() < 1e-3, "{rms}");
    }

    #[test]
    fn dc_passes_unchanged() {
        let a = AudioClip::new(vec![0.25; 44_100], 44_100).unwrap();
        let r = resample_audio(&a, 16_000).unwrap();
        assert!(r.samples.iter().all(|v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn aliasing_tone_is_suppressed() {
        // 12 kHz is above the new Nyquist (8 kHz): it must not fold back loudly.
        let a = tone(12_000.0, 44_100, 44_100);
        let r = resample_audio(&a, 16_000).unwrap();
        let rms = (r.samples[1000..15_000].iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / 14_000.0).sqrt();
        assert!(rms < 1e-3, "{rms}");
    }

    #[test]
    fn upsampling_is_rejected() {
        let a = tone(100.0, 8_000, 800);
        assert!(matches!(resample_audio(&a, 16_000), Err(DataError::Upsample { .. })));
        assert_eq!(resample_audio(&a, 8_000).unwrap(), a);
    }

    #[test]
    fn wav_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.wav");
        let a = tone(300.0, 16_000, 1600);
        write_wav(&p, &a).unwrap();
        let b = read_wav(&p).unwrap();
        assert_eq!(b.rate, 16_000);
        assert_eq!(b.samples.len(), 1600);
        assert!(a.samples.iter().zip(&b.samples).all(|(x, y)| (x - y).abs() < 1e-4));
    }

    #[test]
    fn reads_24_bit_stereo_and_float() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        let spec = hound::WavSpec { channels: 2, sample_rate: 44_100, bits_per_sample: 24, sample_format: hound::SampleFormat::Int };
        let mut w = hound::WavWriter::create(&p, spec).unwrap();
        for _ in 0..10 {
            w.write_sample(1 << 22).unwrap();
            w.write_sample(0).unwrap();
        }
        w.finalize().unwrap();
        let a = read_wav(&p).unwrap();
        assert_eq!(a.samples.len(), 10);
        assert!((a.samples[0] - 0.25).abs() < 1e-6);

        let p = dir.path().join("f.wav");
        let spec = hound::WavSpec { channels: 1, sample_rate: 16_000, bits_per_sample: 32, sample_format: hound::SampleFormat::Float };
        let mut w = hound::WavWriter::create(&p, spec).unwrap();
        w.write_sample(-0.5f32).unwrap();
        w.finalize().unwrap();
        assert_eq!(read_wav(&p).unwrap().samples, vec![-0.5]);
    }
}
