//! From BVH channels to model features and back: per-joint exponential maps,
//! linear resampling, and root velocities in the horizontal heading frame.

use gestor_core::clip::{gesture_channels, GestureSequence, ROOT_CHANNELS};
use gestor_core::Tensor;
use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::bvh::{Channel, MotionClip, Skeleton};
use crate::rotation::{continuous_expmaps, euler_to_matrix, expmap_to_matrix, matrix_to_euler, matrix_to_expmap, Axis};
use crate::{DataError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AngleUnit {
    #[default]
    Degrees,
    Radians,
}

impl AngleUnit {
    fn to_rad(self, v: f64) -> f64 {
        match self {
            AngleUnit::Degrees => v.to_radians(),
            AngleUnit::Radians => v,
        }
    }

    fn from_rad(self, v: f64) -> f64 {
        match self {
            AngleUnit::Degrees => v.to_degrees(),
            AngleUnit::Radians => v,
        }
    }
}

/// Continuous per-joint expmaps (T×3J) and root positions (T×3) at one rate.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseTrack {
    pub expmaps: Tensor,
    pub root_pos: Tensor,
    pub fps: f64,
}

impl PoseTrack {
    pub fn frames(&self) -> usize {
        self.expmaps.rows()
    }

    pub fn joints(&self) -> usize {
        self.expmaps.cols() / 3
    }

    fn root_matrix(&self, t: usize) -> Matrix3<f64> {
        let r = self.expmaps.row(t);
        expmap_to_matrix(&Vector3::new(r[0], r[1], r[2]))
    }
}

/// Reads joint rotations and the root position out of a parsed clip.
pub fn pose_track(clip: &MotionClip, unit: AngleUnit) -> Result<PoseTrack> {
    let sk = &clip.skeleton;
    let offsets = sk.channel_offsets();
    let t_len = clip.len();
    let j_len = sk.len();
    let mut expmaps = vec![0.0; t_len * 3 * j_len];
    for (j, joint) in sk.joints.iter().enumerate() {
        let Some(order) = joint.rotation_order()? else { continue };
        let mats: Vec<Matrix3<f64>> = (0..t_len)
            .map(|t| {
                let row = clip.frames.row(t);
                let mut angles = [0.0; 3];
                let mut k = 0;
                for (c, ch) in joint.channels.iter().enumerate() {
                    if let Channel::Rotation(_) = ch {
                        angles[k] = unit.to_rad(row[offsets[j] + c]);
                        k += 1;
                    }
                }
                euler_to_matrix(angles, order)
            })
            .collect();
        for (t, v) in continuous_expmaps(&mats).iter().enumerate() {
            expmaps[t * 3 * j_len + 3 * j..t * 3 * j_len + 3 * j + 3].copy_from_slice(v.as_slice());
        }
    }
    let root = &sk.joints[0];
    let mut root_pos = vec![0.0; t_len * 3];
    for (c, ch) in root.channels.iter().enumerate() {
        if let Channel::Position(a) = ch {
            for t in 0..t_len {
                root_pos[t * 3 + a.index()] = clip.frames.get2(t, c);
            }
        }
    }
    Ok(PoseTrack {
        expmaps: Tensor::new(&[t_len, 3 * j_len], expmaps)?,
        root_pos: Tensor::new(&[t_len, 3], root_pos)?,
        fps: clip.fps(),
    })
}

fn lerp_rows(x: &Tensor, src_fps: f64, dst_fps: f64, frames: usize) -> Result<Tensor> {
    let (t_len, c) = x.dims2();
    let mut out = Vec::with_capacity(frames * c);
    for k in 0..frames {
        let pos = k as f64 * src_fps / dst_fps;
        // Snap to exact source frames when the ratio is integral (100 → 20 fps).
        let pos = if (pos - pos.round()).abs() < 1e-9 { pos.round() } else { pos };
        let i = (pos.floor() as usize).min(t_len - 1);
        let f = pos - i as f64;
        let (a, b) = (x.row(i), x.row((i + 1).min(t_len - 1)));
        out.extend(a.iter().zip(b).map(|(a, b)| if f == 0.0 { *a } else { a + f * (b - a) }));
    }
    Ok(Tensor::new(&[frames, c], out)?)
}

/// Downsamples by linear interpolation on the continuous expmap and position
/// channels; `round(T·target/source)` frames sampled at k/target seconds.
pub fn resample_motion(track: &PoseTrack, target_fps: f64) -> Result<PoseTrack> {
    if target_fps > track.fps + 1e-9 {
        return Err(DataError::Upsample {
            from: track.fps,
            to: target_fps,
        });
    }
    if (target_fps - track.fps).abs() <= 1e-9 {
        return Ok(track.clone());
    }
    let frames = ((track.frames() as f64 * target_fps / track.fps).round() as usize).max(1);
    Ok(PoseTrack {
        expmaps: lerp_rows(&track.expmaps, track.fps, target_fps, frames)?,
        root_pos: lerp_rows(&track.root_pos, track.fps, target_fps, frames)?,
        fps: target_fps,
    })
}

/// Yaw of the root's projected forward (Z) axis; `None` when it points straight up or down.
fn heading(r: &Matrix3<f64>) -> Option<f64> {
    let f = r * Axis::Z.unit();
    if f.x.hypot(f.z) < 1e-9 {
        return None;
    }
    Some(f.x.atan2(f.z))
}

fn yaw(psi: f64) -> Matrix3<f64> {
    Rotation3::from_axis_angle(&Vector3::y_axis(), psi).into_inner()
}

fn headings(track: &PoseTrack) -> Vec<Matrix3<f64>> {
    let mut last = 0.0;
    (0..track.frames())
        .map(|t| {
            last = heading(&track.root_matrix(t)).unwrap_or(last);
            yaw(last)
        })
        .collect()
}

/// Per-frame [v_x, v_y, v_z, ω_x, ω_y, ω_z] in the heading frame (x lateral,
/// y up, z forward), per second. Frame t differences t against t−1; frame 0
/// repeats frame 1.
pub fn root_velocities(track: &PoseTrack) -> Result<Tensor> {
    let t_len = track.frames();
    if t_len < 2 {
        return Err(DataError::TooFewFrames { need: 2, got: t_len });
    }
    let hs = headings(track);
    let mut out = vec![0.0; t_len * ROOT_CHANNELS];
    for t in 1..t_len {
        let (p0, p1) = (track.root_pos.row(t - 1), track.root_pos.row(t));
        let dp = Vector3::new(p1[0] - p0[0], p1[1] - p0[1], p1[2] - p0[2]);
        let v = hs[t].transpose() * dp * track.fps;
        let dr = track.root_matrix(t) * track.root_matrix(t - 1).transpose();
        let w = hs[t].transpose() * matrix_to_expmap(&dr) * track.fps;
        out[t * 6..t * 6 + 3].copy_from_slice(v.as_slice());
        out[t * 6 + 3..t * 6 + 6].copy_from_slice(w.as_slice());
    }
    let (first, rest) = out.split_at_mut(6);
    first.copy_from_slice(&rest[..6]);
    Ok(Tensor::new(&[t_len, ROOT_CHANNELS], out)?)
}

/// Model features: joint expmaps followed by the six root velocities.
pub fn gesture_features(track: &PoseTrack) -> Result<GestureSequence> {
    let vel = root_velocities(track)?;
    let (t_len, c) = (track.frames(), track.expmaps.cols());
    let mut y = Vec::with_capacity(t_len * (c + ROOT_CHANNELS));
    for t in 0..t_len {
        y.extend_from_slice(track.expmaps.row(t));
        y.extend_from_slice(vel.row(t));
    }
    Ok(GestureSequence::new(Tensor::new(&[t_len, c + ROOT_CHANNELS], y)?, track.fps)?)
}

/// Inverse of `gesture_features`: integrates root velocities from `start`.
pub fn features_to_track(seq: &GestureSequence, start: [f64; 3]) -> Result<PoseTrack> {
    let j = seq.joints();
    if seq.channels() != gesture_channels(j) {
        return Err(DataError::Layout(format!("{} channels is not 3J+6", seq.channels())));
    }
    let t_len = seq.frames();
    let mut ex = Vec::with_capacity(t_len * 3 * j);
    for t in 0..t_len {
        ex.extend_from_slice(&seq.y.row(t)[..3 * j]);
    }
    let mut track = PoseTrack {
        expmaps: Tensor::new(&[t_len, 3 * j], ex)?,
        root_pos: Tensor::zeros(&[t_len, 3]),
        fps: seq.fps,
    };
    let hs = headings(&track);
    let mut p = Vector3::from(start);
    let pos = track.root_pos.data_mut();
    pos[..3].copy_from_slice(p.as_slice());
    for t in 1..t_len {
        let r = seq.y.row(t);
        let v = Vector3::new(r[3 * j], r[3 * j + 1], r[3 * j + 2]);
        p += hs[t] * v / seq.fps;
        pos[t * 3..t * 3 + 3].copy_from_slice(p.as_slice());
    }
    Ok(track)
}

/// Writes a track back into BVH channel values for `skeleton`.
pub fn track_to_motion(track: &PoseTrack, skeleton: &Skeleton, unit: AngleUnit) -> Result<MotionClip> {
    if track.joints() != skeleton.len() {
        return Err(DataError::Layout(format!(
            "track has {} joints, skeleton {}",
            track.joints(),
            skeleton.len()
        )));
    }
    let offsets = skeleton.channel_offsets();
    let c = skeleton.channel_count();
    let t_len = track.frames();
    let mut data = vec![0.0; t_len * c];
    for t in 0..t_len {
        let row = &mut data[t * c..(t + 1) * c];
        let ex = track.expmaps.row(t);
        for (j, joint) in skeleton.joints.iter().enumerate() {
            let angles = match joint.rotation_order()? {
                Some(order) => {
                    let m = expmap_to_matrix(&Vector3::new(ex[3 * j], ex[3 * j + 1], ex[3 * j + 2]));
                    matrix_to_euler(&m, order)
                }
                None => [0.0; 3],
            };
            let mut k = 0;
            for (ci, ch) in joint.channels.iter().enumerate() {
                row[offsets[j] + ci] = match ch {
                    Channel::Rotation(_) => {
                        k += 1;
                        unit.from_rad(angles[k - 1])
                    }
                    Channel::Position(a) if j == 0 => track.root_pos.get2(t, a.index()),
                    Channel::Position(a) => joint.offset[a.index()],
                };
            }
        }
    }
    MotionClip::new(skeleton.clone(), Tensor::new(&[t_len, c], data)?, 1.0 / track.fps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bvh::{parse_bvh, write_bvh, Joint};
    use crate::rotation::EulerOrder;
    use std::f64::consts::PI;

    fn root_only(frames: Vec<[f64; 6]>, fps: f64) -> MotionClip {
        let sk = Skeleton::new(vec![Joint {
            name: "Hips".into(),
            parent: None,
            offset: [0.0; 3],
            channels: vec![
                Channel::Position(Axis::X),
                Channel::Position(Axis::Y),
                Channel::Position(Axis::Z),
                Channel::Rotation(Axis::Z),
                Channel::Rotation(Axis::X),
                Channel::Rotation(Axis::Y),
            ],
            end_site: None,
        }])
        .unwrap();
        let n = frames.len();
        MotionClip::new(sk, Tensor::new(&[n, 6], frames.concat()).unwrap(), 1.0 / fps).unwrap()
    }

    #[test]
    fn static_clip_has_zero_velocity() {
        let c = root_only(vec![[1.0, 90.0, -3.0, 10.0, 20.0, 30.0]; 5], 20.0);
        let v = root_velocities(&pose_track(&c, AngleUnit::Degrees).unwrap()).unwrap();
        assert!(v.data().iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn forward_walk_is_unit_forward_velocity() {
        // Facing +X (yaw 90°), walking along +X at 1 unit/s.
        let frames = (0..10).map(|t| [t as f64 / 20.0, 90.0, 0.0, 0.0, 0.0, 90.0]).collect();
        let v = root_velocities(&pose_track(&root_only(frames, 20.0), AngleUnit::Degrees).unwrap()).unwrap();
        for t in 0..10 {
            let r = v.row(t);
            assert!((r[2] - 1.0).abs() < 1e-9, "{r:?}");
            assert!(r[0].abs() < 1e-9 && r[1].abs() < 1e-9);
        }
    }

    #[test]
    fn steady_yaw_is_quarter_turn_per_second() {
        let frames = (0..40).map(|t| [0.0, 0.0, 0.0, 0.0, 0.0, 90.0 * t as f64 / 20.0]).collect();
        let v = root_velocities(&pose_track(&root_only(frames, 20.0), AngleUnit::Degrees).unwrap()).unwrap();
        for t in 0..40 {
            assert!((v.get2(t, 4) - PI / 2.0).abs() < 1e-9, "{}", v.get2(t, 4));
            assert!(v.get2(t, 3).abs() < 1e-9 && v.get2(t, 5).abs() < 1e-9);
        }
    }

    #[test]
    fn too_few_frames() {
        let c = root_only(vec![[0.0; 6]], 20.0);
        assert!(matches!(
            root_velocities(&pose_track(&c, AngleUnit::Degrees).unwrap()),
            Err(DataError::TooFewFrames { .. })
        ));
    }

    #[test]
    fn resample_counts_identity_and_linearity() {
        let frames: Vec<[f64; 6]> = (0..500).map(|t| [t as f64 * 0.01, 0.0, 0.0, 0.0, 0.0, 0.0]).collect();
        let tr = pose_track(&root_only(frames, 100.0), AngleUnit::Degrees).unwrap();
        let down = resample_motion(&tr, 20.0).unwrap();
        assert_eq!(down.frames(), 100);
        for k in 0..100 {
            assert!((down.root_pos.get2(k, 0) - k as f64 * 0.05).abs() < 1e-12);
        }
        assert_eq!(resample_motion(&tr, 100.0).unwrap(), tr);
        assert!(matches!(resample_motion(&tr, 120.0), Err(DataError::Upsample { .. })));
        // Non-integral ratio: a ramp is still reproduced exactly.
        let odd = resample_motion(&tr, 30.0).unwrap();
        assert_eq!(odd.frames(), 150);
        for k in 0..150 {
            let want = (k as f64 / 30.0).min(4.99);
            assert!((odd.root_pos.get2(k, 0) - want).abs() < 1e-9);
        }
    }

    #[test]
    fn features_invert_to_the_same_clip() {
        let frames: Vec<[f64; 6]> = (0..30)
            .map(|t| {
                let s = t as f64 / 20.0;
                [3.0 * s.sin(), 90.0 + s, 2.0 * s, 5.0 * s, 10.0 * (2.0 * s).cos(), 40.0 * s]
            })
            .collect();
        let clip = root_only(frames, 20.0);
        let tr = pose_track(&clip, AngleUnit::Degrees).unwrap();
        let feats = gesture_features(&tr).unwrap();
        assert_eq!(feats.channels(), gesture_channels(1));
        let p0 = tr.root_pos.row(0);
        let back = features_to_track(&feats, [p0[0], p0[1], p0[2]]).unwrap();
        assert!(back.root_pos.max_abs_diff(&tr.root_pos) < 1e-9);
        let clip2 = track_to_motion(&back, &clip.skeleton, AngleUnit::Degrees).unwrap();
        assert!(clip2.frames.max_abs_diff(&clip.frames) < 1e-9);
        let reparsed = parse_bvh(&write_bvh(&clip2)).unwrap();
        assert!(reparsed.frames.max_abs_diff(&clip.frames) < 1e-6);
    }

    #[test]
    fn joint_expmaps_follow_channel_order() {
        let clip = root_only(vec![[0.0, 0.0, 0.0, 0.0, 90.0, 0.0], [0.0; 6]], 20.0);
        let tr = pose_track(&clip, AngleUnit::Degrees).unwrap();
        let e = tr.expmaps.row(0);
        assert!((e[0] - PI / 2.0).abs() < 1e-12 && e[1].abs() < 1e-12 && e[2].abs() < 1e-12);
        let m = euler_to_matrix([0.0, PI / 2.0, 0.0], EulerOrder::ZXY);
        assert!((expmap_to_matrix(&Vector3::new(e[0], e[1], e[2])) - m).norm() < 1e-12);
    }
}
