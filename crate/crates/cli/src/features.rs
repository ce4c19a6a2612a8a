use std::path::Path;

use gestor_core::clip::AudioClip;
use gestor_core::condition::{FeatureProvider, FileFeatures, LocalFeatures, LogMel};

use crate::error::{input, Result};

/// 25 ms Hann window, 20 ms hop at 16 kHz: 50 feature frames per second.
pub fn log_mel(d_a: usize) -> LogMel {
    LogMel::new(d_a, 400, 320)
}

/// Local features for `audio`: log-mel by default, or a precomputed feature
/// file (tensor plus `.json` sidecar) when `file` is given.
pub fn extract(d_a: usize, audio: &AudioClip, file: Option<&Path>) -> Result<LocalFeatures> {
    let f = match file {
        Some(p) => FileFeatures { path: p.to_path_buf() }.extract(audio).map_err(input)?,
        None => log_mel(d_a).extract(audio)?,
    };
    if f.dim() != d_a {
        return Err(input(format!("features have {} dims but the model expects d_a = {d_a}", f.dim())));
    }
    Ok(f)
}
