use std::path::PathBuf;

use gestor_data::{pair_by_stem, prepare_pair, AngleUnit, ClipStore, PreprocessOptions, StoreManifest, CLIP_SECONDS};
use rayon::prelude::*;

use crate::error::{input, Result};

#[derive(Debug, Clone, clap::Args)]
pub struct PreprocessArgs {
    /// Directory of `<stem>.bvh` files.
    #[arg(long)]
    pub bvh_dir: PathBuf,
    /// Directory of `<stem>.wav` files (defaults to --bvh-dir).
    #[arg(long)]
    pub wav_dir: Option<PathBuf>,
    /// Clip store to create.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = CLIP_SECONDS)]
    pub seconds: f64,
    /// Window stride in seconds; defaults to --seconds (no overlap).
    #[arg(long)]
    pub stride: Option<f64>,
    /// BVH rotation channels are in radians rather than degrees.
    #[arg(long)]
    pub radians: bool,
}

pub fn run(a: &PreprocessArgs) -> Result<StoreManifest> {
    let wav_dir = a.wav_dir.as_ref().unwrap_or(&a.bvh_dir);
    let (pairs, unpaired) = pair_by_stem(&a.bvh_dir, wav_dir).map_err(input)?;
    for u in &unpaired {
        eprintln!("warning: {u} has no partner file, skipped");
    }
    if pairs.is_empty() {
        return Err(input(format!(
            "no <stem>.bvh/<stem>.wav pairs found in {} and {}",
            a.bvh_dir.display(),
            wav_dir.display()
        )));
    }
    let opts = PreprocessOptions {
        seconds: a.seconds,
        stride_seconds: a.stride,
        angle_unit: if a.radians { AngleUnit::Radians } else { AngleUnit::Degrees },
    };
    let prepared: Vec<_> = pairs
        .par_iter()
        .map(|(stem, b, w)| (stem, prepare_pair(stem, b, w, &opts)))
        .collect();
    let mut ok = Vec::new();
    for (stem, r) in prepared {
        match r {
            Ok(p) if p.windows.is_empty() => {
                eprintln!("warning: {stem} is shorter than one {} s window, skipped", a.seconds)
            }
            Ok(p) => ok.push(p),
            Err(e) => eprintln!("warning: {stem}: {e}, skipped"),
        }
    }
    if ok.is_empty() {
        return Err(input("no usable recordings"));
    }
    let store = ClipStore::write(&a.out, &ok, &opts).map_err(|e| match e {
        gestor_data::DataError::Layout(m) => input(m),
        e => e.into(),
    })?;
    println!(
        "wrote {} clips from {} recordings to {}",
        store.len(),
        ok.len(),
        a.out.display()
    );
    Ok(store.manifest)
}
