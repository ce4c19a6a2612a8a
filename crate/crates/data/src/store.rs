//! On-disk clip store: per-clip gesture and audio tensors plus a JSON
//! manifest with provenance, channel layout and normalization statistics.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use gestor_core::clip::{AudioClip, GestureSequence, NormStats, AUDIO_RATE, GESTURE_FPS};
use gestor_core::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::{read_wav, resample_audio};
use crate::bvh::{parse_bvh, Skeleton};
use crate::motion::{gesture_features, pose_track, resample_motion, AngleUnit};
use crate::segment::{segment_clips, CLIP_SECONDS};
use crate::{DataError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT: &str = "gestor-clips/1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessOptions {
    pub seconds: f64,
    /// Defaults to `seconds` (non-overlapping windows).
    pub stride_seconds: Option<f64>,
    pub angle_unit: AngleUnit,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        Self {
            seconds: CLIP_SECONDS,
            stride_seconds: None,
            angle_unit: AngleUnit::Degrees,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipEntry {
    pub id: String,
    pub source_bvh: String,
    pub source_wav: String,
    pub offset_seconds: f64,
    pub frames: usize,
    pub samples: usize,
    /// Root position at the clip's first frame, for re-integrating velocities.
    pub root_start: [f64; 3],
    pub gesture_file: String,
    pub audio_file: String,
    pub gesture_sha256: String,
    pub audio_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub format: String,
    pub fps: f64,
    pub audio_rate: u32,
    pub options: PreprocessOptions,
    pub joints: usize,
    pub channel_layout: Vec<String>,
    pub skeleton: Skeleton,
    pub norm: NormStats,
    pub inputs: BTreeMap<String, String>,
    pub clips: Vec<ClipEntry>,
}

/// One source recording, featurized and cut into windows.
#[derive(Debug, Clone)]
pub struct PreparedPair {
    pub stem: String,
    pub bvh: PathBuf,
    pub wav: PathBuf,
    pub bvh_sha256: String,
    pub wav_sha256: String,
    pub skeleton: Skeleton,
    pub windows: Vec<(GestureSequence, AudioClip, f64, [f64; 3])>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Channel names in feature order: `<joint>.e{x,y,z}` then the root velocities.
pub fn channel_layout(skeleton: &Skeleton) -> Vec<String> {
    let mut out: Vec<String> = skeleton
        .joints
        .iter()
        .flat_map(|j| ["ex", "ey", "ez"].map(|c| format!("{}.{c}", j.name)))
        .collect();
    out.extend(["root.vx", "root.vy", "root.vz", "root.wx", "root.wy", "root.wz"].map(String::from));
    out
}

pub fn prepare_pair(stem: &str, bvh: &Path, wav: &Path, opts: &PreprocessOptions) -> Result<PreparedPair> {
    let text = std::fs::read(bvh)?;
    let wav_bytes = std::fs::read(wav)?;
    let clip = parse_bvh(std::str::from_utf8(&text).map_err(|e| DataError::Parse { line: 0, msg: e.to_string() })?)?;
    let track = resample_motion(&pose_track(&clip, opts.angle_unit)?, GESTURE_FPS)?;
    let feats = gesture_features(&track)?;
    let mut audio = read_wav(wav)?;
    audio = resample_audio(&audio, AUDIO_RATE)?;
    audio.normalize_peak();
    let windows = segment_clips(&feats, &audio, opts.seconds, opts.stride_seconds)?
        .into_iter()
        .map(|s| {
            let p = track.root_pos.row(s.first_frame);
            (s.gesture, s.audio, s.offset_seconds, [p[0], p[1], p[2]])
        })
        .collect();
    Ok(PreparedPair {
        stem: stem.to_string(),
        bvh: bvh.to_path_buf(),
        wav: wav.to_path_buf(),
        bvh_sha256: sha256_hex(&text),
        wav_sha256: sha256_hex(&wav_bytes),
        skeleton: clip.skeleton,
        windows,
    })
}

/// Pairs `<stem>.bvh` with `<stem>.wav`; returns sorted pairs and the names left unpaired.
pub fn pair_by_stem(bvh_dir: &Path, wav_dir: &Path) -> Result<(Vec<(String, PathBuf, PathBuf)>, Vec<String>)> {
    let list = |dir: &Path, ext: &str| -> Result<BTreeMap<String, PathBuf>> {
        let mut m = BTreeMap::new();
        for e in std::fs::read_dir(dir)? {
            let p = e?.path();
            if p.extension().and_then(|x| x.to_str()).is_some_and(|x| x.eq_ignore_ascii_case(ext)) {
                if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                    m.insert(stem.to_string(), p.clone());
                }
            }
        }
        Ok(m)
    };
    let bvhs = list(bvh_dir, "bvh")?;
    let wavs = list(wav_dir, "wav")?;
    let mut pairs = Vec::new();
    let mut unpaired = Vec::new();
    for (stem, b) in &bvhs {
        match wavs.get(stem) {
            Some(w) => pairs.push((stem.clone(), b.clone(), w.clone())),
            None => unpaired.push(b.display().to_string()),
        }
    }
    unpaired.extend(wavs.iter().filter(|(s, _)| !bvhs.contains_key(*s)).map(|(_, w)| w.display().to_string()));
    Ok((pairs, unpaired))
}

pub struct ClipStore {
    pub dir: PathBuf,
    pub manifest: StoreManifest,
}

impl ClipStore {
    /// Writes every window of `pairs` (which must share one skeleton) and the manifest.
    pub fn write(dir: &Path, pairs: &[PreparedPair], opts: &PreprocessOptions) -> Result<Self> {
        let Some(first) = pairs.first() else {
            return Err(DataError::Layout("no recordings to store".into()));
        };
        for p in pairs {
            if p.skeleton.names() != first.skeleton.names() {
                return Err(DataError::Layout(format!("{} uses a different skeleton than {}", p.stem, first.stem)));
            }
        }
        std::fs::create_dir_all(dir.join("clips"))?;
        let mut clips = Vec::new();
        let mut inputs = BTreeMap::new();
        for p in pairs {
            inputs.insert(p.bvh.display().to_string(), p.bvh_sha256.clone());
            inputs.insert(p.wav.display().to_string(), p.wav_sha256.clone());
            for (k, (g, a, offset, start)) in p.windows.iter().enumerate() {
                let id = format!("{}_{k:03}", p.stem);
                let gesture_file = format!("clips/{id}.gesture.bin");
                let audio_file = format!("clips/{id}.audio.bin");
                let gb = g.y.to_bytes();
                let mut ab = Vec::new();
                Tensor::new(&[a.samples.len()], a.samples.iter().map(|&v| v as f64).collect())?.write_f32_to(&mut ab)?;
                std::fs::write(dir.join(&gesture_file), &gb)?;
                std::fs::write(dir.join(&audio_file), &ab)?;
                clips.push(ClipEntry {
                    id,
                    source_bvh: p.bvh.display().to_string(),
                    source_wav: p.wav.display().to_string(),
                    offset_seconds: *offset,
                    frames: g.frames(),
                    samples: a.samples.len(),
                    root_start: *start,
                    gesture_file,
                    audio_file,
                    gesture_sha256: sha256_hex(&gb),
                    audio_sha256: sha256_hex(&ab),
                });
            }
        }
        let all: Vec<&Tensor> = pairs.iter().flat_map(|p| p.windows.iter().map(|w| &w.0.y)).collect();
        let norm = if all.is_empty() {
            NormStats::identity(crate::store::channel_layout(&first.skeleton).len())
        } else {
            NormStats::fit(all)?
        };
        let manifest = StoreManifest {
            format: FORMAT.into(),
            fps: GESTURE_FPS,
            audio_rate: AUDIO_RATE,
            options: *opts,
            joints: first.skeleton.len(),
            channel_layout: channel_layout(&first.skeleton),
            skeleton: first.skeleton.clone(),
            norm,
            inputs,
            clips,
        };
        std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn open(dir: &Path) -> Result<Self> {
        let manifest: StoreManifest = serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        if manifest.format != FORMAT {
            return Err(DataError::Layout(format!("unsupported store format {}", manifest.format)));
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn len(&self) -> usize {
        self.manifest.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.clips.is_empty()
    }

    /// Raw (un-normalized) gesture and its audio window.
    pub fn load(&self, i: usize) -> Result<(GestureSequence, AudioClip)> {
        let e = self
            .manifest
            .clips
            .get(i)
            .ok_or_else(|| DataError::Layout(format!("clip {i} out of range")))?;
        let y = Tensor::load(self.dir.join(&e.gesture_file))?;
        let a = Tensor::load(self.dir.join(&e.audio_file))?;
        Ok((
            GestureSequence::new(y, self.manifest.fps)?,
            AudioClip::new(a.data().iter().map(|&v| v as f32).collect(), self.manifest.audio_rate)?,
        ))
    }
}
