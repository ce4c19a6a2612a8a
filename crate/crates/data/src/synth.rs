//! Deterministic synthetic recordings (skeleton + motion + speech-like audio)
//! for tests, demos and smoke runs.

use gestor_core::clip::AudioClip;
use gestor_core::Tensor;

use crate::bvh::{Channel, Joint, MotionClip, Skeleton};
use crate::rotation::Axis;
use crate::Result;

/// A chain-and-fan skeleton: root with 6 channels, every other joint ZXY rotations.
pub fn skeleton(joints: usize) -> Result<Skeleton> {
    let rot = vec![
        Channel::Rotation(Axis::Z),
        Channel::Rotation(Axis::X),
        Channel::Rotation(Axis::Y),
    ];
    let mut out = vec![Joint {
        name: "Hips".into(),
        parent: None,
        offset: [0.0; 3],
        channels: [
            vec![
                Channel::Position(Axis::X),
                Channel::Position(Axis::Y),
                Channel::Position(Axis::Z),
            ],
            rot.clone(),
        ]
        .concat(),
        end_site: None,
    }];
    for i in 1..joints {
        // Five-way fan off a short spine keeps the hierarchy non-trivial.
        let parent = match i {
            1..=3 => i - 1,
            4..=8 => 3,
            _ => i - 5,
        };
        out.push(Joint {
            name: format!("J{i:02}"),
            parent: Some(parent),
            offset: [((i % 3) as f64 - 1.0) * 4.0, 8.0, 0.5 * i as f64],
            channels: rot.clone(),
            end_site: (i + 1 == joints).then_some([0.0, 5.0, 0.0]),
        });
    }
    Skeleton::new(out)
}

/// `seconds` of motion at `fps` with smooth per-joint oscillations (degrees),
/// a slow walk and turn of the root.
pub fn motion(skeleton: &Skeleton, seconds: f64, fps: f64, seed: u64) -> Result<MotionClip> {
    let frames = (seconds * fps).round() as usize;
    let c = skeleton.channel_count();
    let phase0 = (seed % 997) as f64 * 0.37;
    let mut data = Vec::with_capacity(frames * c);
    for f in 0..frames {
        let t = f as f64 / fps;
        for (j, joint) in skeleton.joints.iter().enumerate() {
            for (k, ch) in joint.channels.iter().enumerate() {
                let v = match ch {
                    Channel::Position(a) => match a {
                        Axis::X => 20.0 * (0.1 * t).sin(),
                        Axis::Y => 90.0 + 1.5 * (2.0 * t).sin(),
                        Axis::Z => 5.0 * t,
                    },
                    Channel::Rotation(_) => {
                        let w = 1.0 + 0.35 * ((j * 3 + k) % 7) as f64;
                        let amp = if j == 0 { 10.0 } else { 25.0 / (1.0 + 0.1 * j as f64) };
                        let drift = if j == 0 && k == 2 { 8.0 * t } else { 0.0 };
                        amp * (2.0 * std::f64::consts::PI * 0.5 * w * t + phase0 + j as f64).sin() + drift
                    }
                };
                data.push(v);
            }
        }
    }
    MotionClip::new(skeleton.clone(), Tensor::new(&[frames, c], data)?, 1.0 / fps)
}

/// Voiced carrier with a syllable-rate envelope plus clicks every `beat` seconds.
pub fn audio(seconds: f64, rate: u32, beat: f64, seed: u64) -> Result<AudioClip> {
    let n = (seconds * rate as f64).round() as usize;
    let f0 = 110.0 + (seed % 50) as f64;
    let s = (0..n)
        .map(|i| {
            let t = i as f64 / rate as f64;
            let env = 0.5 + 0.5 * (2.0 * std::f64::consts::PI * 4.0 * t).sin();
            let voice = (1..=5)
                .map(|h| (2.0 * std::f64::consts::PI * f0 * h as f64 * t).sin() / h as f64)
                .sum::<f64>();
            let since = t % beat;
            let click = if since < 0.01 { (1.0 - since / 0.01) * (2.0 * std::f64::consts::PI * 2000.0 * t).sin() } else { 0.0 };
            (0.2 * env * voice + 0.6 * click) as f32
        })
        .collect();
    Ok(AudioClip::new(s, rate)?)
}
