//! Motion-capture and audio ingestion: BVH, exponential maps, root
//! velocities, resampling, segmentation and the on-disk clip store.

pub mod audio;
pub mod bvh;
pub mod motion;
pub mod rotation;
pub mod segment;
pub mod store;
pub mod synth;

pub use audio::{read_wav, resample_audio, write_wav};
pub use bvh::{parse_bvh, write_bvh, Channel, Joint, MotionClip, Skeleton};
pub use motion::{
    features_to_track, gesture_features, pose_track, resample_motion, root_velocities, track_to_motion, AngleUnit,
    PoseTrack,
};
pub use rotation::{euler_to_matrix, expmap_to_matrix, matrix_to_euler, matrix_to_expmap, Axis, EulerOrder};
pub use segment::{segment_clips, Segment, CLIP_SECONDS};
pub use store::{channel_layout, pair_by_stem, prepare_pair, ClipEntry, ClipStore, PreparedPair, PreprocessOptions, StoreManifest};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("missing {0} section")]
    MissingSection(&'static str),
    #[error("unknown channel `{0}`")]
    UnknownChannel(String),
    #[error("expected {expected} values, found {got}")]
    FrameCount { expected: usize, got: usize },
    #[error("rotation: {0}")]
    Rotation(String),
    #[error("refusing to upsample from {from} to {to}")]
    Upsample { from: f64, to: f64 },
    #[error("need at least {need} frames, got {got}")]
    TooFewFrames { need: usize, got: usize },
    #[error("motion lasts {motion:.3} s but audio {audio:.3} s")]
    Desync { motion: f64, audio: f64 },
    #[error("layout: {0}")]
    Layout(String),
    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Core(#[from] gestor_core::Error),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;
