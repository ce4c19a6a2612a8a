//! Objective gesture metrics: Fréchet distances in raw pose space and in a
//! learned motion-feature space, and beat alignment between speech and motion.

pub mod beats;
pub mod embedder;
pub mod frechet;

pub use beats::{beat_align, detect_audio_beats, detect_gesture_beats, BeatSet, DEFAULT_SIGMA};
pub use embedder::{Embedder, EmbedderConfig};
pub use frechet::{fgd_feature, fgd_raw, frechet_distance, GaussianSummary};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("covariance is not positive semidefinite (eigenvalue {0:e})")]
    NotPsd(f64),
    #[error("need at least {need} clips per side, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("embedder has not been trained")]
    Untrained,
    #[error("beat times must be finite and strictly increasing")]
    UnsortedBeats,
    #[error(transparent)]
    Core(#[from] gestor_core::Error),
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;
