use std::path::{Path, PathBuf};

use gestor_core::clip::{AudioClip, GestureSequence, AUDIO_RATE, GESTURE_FPS};
use gestor_core::Tensor;
use gestor_data::{gesture_features, parse_bvh, pose_track, read_wav, resample_audio, resample_motion, AngleUnit, ClipStore};
use gestor_metrics::{
    beat_align, detect_audio_beats, detect_gesture_beats, fgd_feature, fgd_raw, Embedder, EmbedderConfig, DEFAULT_SIGMA,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{input, Result};
use crate::util::{file_sha256, files_with_ext, stem, write_json};

pub const REPORT_SCHEMA: &str = include_str!("../schemas/evaluate-report.schema.json");

#[derive(Debug, Clone, clap::Args)]
pub struct EvaluateArgs {
    /// BVH files (with optional same-stem WAVs) or a clip store.
    #[arg(long)]
    pub generated: PathBuf,
    /// BVH files (with optional same-stem WAVs) or a clip store.
    #[arg(long)]
    pub reference: PathBuf,
    /// Trained embedder directory; trained on the reference set when omitted.
    #[arg(long)]
    pub embedder: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_SIGMA)]
    pub sigma: f64,
    /// Seeds the embedder when one is trained here.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub radians: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub fgd_raw: f64,
    pub fgd_feature: f64,
    pub beat_align: Option<f64>,
    pub n_generated: usize,
    pub n_reference: usize,
    pub embedder_id: String,
}

pub struct MotionItem {
    pub name: String,
    pub gesture: GestureSequence,
    pub audio: Option<AudioClip>,
    pub sha256: String,
}

fn load_bvh_item(path: &Path, unit: AngleUnit) -> Result<MotionItem> {
    let text = std::fs::read_to_string(path).map_err(|e| input(format!("{}: {e}", path.display())))?;
    let clip = parse_bvh(&text).map_err(|e| input(format!("{}: {e}", path.display())))?;
    let track = pose_track(&clip, unit).map_err(input)?;
    let track = resample_motion(&track, GESTURE_FPS).map_err(|e| input(format!("{}: {e}", path.display())))?;
    let gesture = gesture_features(&track).map_err(input)?;
    let wav = path.with_extension("wav");
    let audio = if wav.exists() {
        let a = read_wav(&wav).map_err(|e| input(format!("{}: {e}", wav.display())))?;
        Some(resample_audio(&a, AUDIO_RATE).map_err(|e| input(format!("{}: {e}", wav.display())))?)
    } else {
        None
    };
    Ok(MotionItem {
        name: stem(path),
        gesture,
        audio,
        sha256: file_sha256(path)?,
    })
}

/// A clip store (directory with a store manifest) or a directory of BVH files.
pub fn load_set(dir: &Path, unit: AngleUnit) -> Result<Vec<MotionItem>> {
    if dir.join(gestor_data::store::MANIFEST_FILE).exists() {
        let store = ClipStore::open(dir).map_err(input)?;
        return (0..store.len())
            .into_par_iter()
            .map(|i| {
                let (g, a) = store.load(i).map_err(input)?;
                let e = &store.manifest.clips[i];
                Ok(MotionItem {
                    name: e.id.clone(),
                    gesture: g,
                    audio: Some(a),
                    sha256: e.gesture_sha256.clone(),
                })
            })
            .collect();
    }
    files_with_ext(dir, "bvh")?
        .par_iter()
        .map(|p| load_bvh_item(p, unit))
        .collect()
}

/// Mean BeatAlign over the clips that carry audio; `None` if none do.
pub fn mean_beat_align(items: &[MotionItem], sigma: f64) -> Result<Option<f64>> {
    let scores: Vec<f64> = items
        .par_iter()
        .filter_map(|it| it.audio.as_ref().map(|a| (it, a)))
        .map(|(it, a)| -> Result<f64> {
            let g = detect_gesture_beats(&it.gesture)?;
            let b = detect_audio_beats(a)?;
            Ok(beat_align(&g, &b, sigma))
        })
        .collect::<Result<_>>()?;
    Ok((!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64))
}

pub fn run(a: &EvaluateArgs) -> Result<Report> {
    if !(a.sigma > 0.0) {
        return Err(input("--sigma must be positive"));
    }
    let unit = if a.radians { AngleUnit::Radians } else { AngleUnit::Degrees };
    let generated = load_set(&a.generated, unit)?;
    let reference = load_set(&a.reference, unit)?;
    for (set, what) in [(&generated, &a.generated), (&reference, &a.reference)] {
        if set.len() < 2 {
            return Err(input(format!("{} holds {} clips; need at least 2", what.display(), set.len())));
        }
    }
    let gen_y: Vec<Tensor> = generated.iter().map(|m| m.gesture.y.clone()).collect();
    let ref_y: Vec<Tensor> = reference.iter().map(|m| m.gesture.y.clone()).collect();
    let channels = ref_y[0].cols();
    if let Some(bad) = gen_y.iter().chain(&ref_y).find(|y| y.cols() != channels) {
        return Err(input(format!("channel mismatch: {} vs {channels}", bad.cols())));
    }

    std::fs::create_dir_all(&a.out)?;
    let embedder = match &a.embedder {
        Some(dir) => {
            let e = Embedder::load(dir).map_err(input)?;
            if e.cfg.channels != channels {
                return Err(input(format!("embedder expects {} channels, data has {channels}", e.cfg.channels)));
            }
            e
        }
        None => {
            let cfg = EmbedderConfig { seed: a.seed, ..EmbedderConfig::new(channels) };
            let e = Embedder::train(cfg, &ref_y)?;
            e.save(&a.out.join("embedder"))?;
            e
        }
    };

    let report = Report {
        fgd_raw: fgd_raw(&gen_y, &ref_y)?,
        fgd_feature: fgd_feature(&gen_y, &ref_y, &embedder)?,
        beat_align: mean_beat_align(&generated, a.sigma)?,
        n_generated: generated.len(),
        n_reference: reference.len(),
        embedder_id: embedder.id(),
    };
    write_json(&a.out.join("report.json"), &report)?;
    let manifest = serde_json::json!({
        "generated": a.generated.display().to_string(),
        "reference": a.reference.display().to_string(),
        "generated_sha256": generated.iter().map(|m| (m.name.clone(), m.sha256.clone())).collect::<std::collections::BTreeMap<_, _>>(),
        "reference_sha256": reference.iter().map(|m| (m.name.clone(), m.sha256.clone())).collect::<std::collections::BTreeMap<_, _>>(),
        "embedder": a.embedder.as_ref().map(|p| p.display().to_string()),
        "embedder_id": report.embedder_id,
        "sigma": a.sigma,
        "seed": a.seed,
    });
    write_json(&a.out.join("manifest.json"), &manifest)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(report)
}
