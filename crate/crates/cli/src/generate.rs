use std::path::PathBuf;

use gestor_core::checkpoint;
use gestor_core::clip::{GestureSequence, AUDIO_RATE, GESTURE_FPS};
use gestor_data::{features_to_track, read_wav, resample_audio, track_to_motion, write_bvh, write_wav, AngleUnit, DataError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{input, Result};
use crate::train::TrainProvenance;
use crate::util::{file_sha256, stem, write_json};

#[derive(Debug, Clone, clap::Args)]
pub struct GenerateArgs {
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Speech recording (any rate ≥ 16 kHz).
    #[arg(long)]
    pub wav: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Precomputed feature file (tensor + `.json` sidecar) instead of log-mel.
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Output file stem; defaults to the WAV's.
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GenerateManifest {
    pub checkpoint: String,
    pub params_sha256: String,
    pub wav: String,
    pub wav_sha256: String,
    pub seed: u64,
    pub frames: usize,
    pub channels: usize,
    pub bvh: String,
    pub tensor: String,
}

pub fn run(a: &GenerateArgs) -> Result<GenerateManifest> {
    let ck = checkpoint::load(&a.checkpoint).map_err(input)?;
    let prov: TrainProvenance = serde_json::from_value(ck.manifest.extra.clone())
        .map_err(|e| input(format!("checkpoint lacks training provenance: {e}")))?;
    let audio = read_wav(&a.wav).map_err(input)?;
    let mut audio = resample_audio(&audio, AUDIO_RATE).map_err(|e| match e {
        DataError::Upsample { from, .. } => input(format!("{} is sampled at {from} Hz; need at least {AUDIO_RATE} Hz", a.wav.display())),
        e => e.into(),
    })?;
    audio.normalize_peak();
    let frames = audio.gesture_frames();
    if frames == 0 {
        return Err(input("audio is shorter than one gesture frame"));
    }
    let feats = crate::features::extract(ck.model.cfg.d_a, &audio, a.features.as_deref())?;

    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let y = ck.model.sample(&ck.store, &feats, frames, &mut rng)?;
    let y = ck.manifest.norm.denormalize(&y)?;
    let seq = GestureSequence::new(y, GESTURE_FPS)?;
    let track = features_to_track(&seq, prov.root_start)?;
    let motion = track_to_motion(&track, &prov.skeleton, AngleUnit::Degrees)?;

    std::fs::create_dir_all(&a.out)?;
    let name = a.name.clone().unwrap_or_else(|| stem(&a.wav));
    let bvh = a.out.join(format!("{name}.bvh"));
    let tensor = a.out.join(format!("{name}.gesture.bin"));
    std::fs::write(&bvh, write_bvh(&motion))?;
    seq.y.save(&tensor)?;
    // The resampled speech sits next to the motion so `evaluate` can pair them.
    write_wav(&a.out.join(format!("{name}.wav")), &audio)?;

    let m = GenerateManifest {
        checkpoint: a.checkpoint.display().to_string(),
        params_sha256: file_sha256(&a.checkpoint.join(checkpoint::PARAMS_FILE))?,
        wav: a.wav.display().to_string(),
        wav_sha256: file_sha256(&a.wav)?,
        seed: a.seed,
        frames,
        channels: seq.channels(),
        bvh: bvh.display().to_string(),
        tensor: tensor.display().to_string(),
    };
    write_json(&a.out.join(format!("{name}.manifest.json")), &m)?;
    println!("wrote {} ({frames} frames)", bvh.display());
    Ok(m)
}
