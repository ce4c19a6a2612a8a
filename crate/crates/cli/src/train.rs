use std::path::{Path, PathBuf};

use gestor_core::checkpoint::{self, MANIFEST_FILE};
use gestor_core::model::{GestureModel, ModelConfig, StepLog, Trainer, TrainingClip};
use gestor_core::ParamStore;
use gestor_data::{ClipStore, Skeleton};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{input, runtime, Result};
use crate::plot::{line_chart, Series};

pub const LOSS_CSV: &str = "loss.csv";
pub const LOSS_SVG: &str = "loss.svg";

#[derive(Debug, Clone, clap::Args)]
pub struct TrainArgs {
    /// Clip store written by `preprocess`.
    #[arg(long)]
    pub store: PathBuf,
    /// Checkpoint directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config's seed (model init and per-step randomness).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the config's step count.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Directory of precomputed `<clip id>.feat` feature files instead of log-mel.
    #[arg(long)]
    pub features_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    pub save_every: u64,
    /// Continue from the checkpoint in --out.
    #[arg(long)]
    pub resume: bool,
}

/// Written into the checkpoint manifest so `generate` can rebuild motion files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainProvenance {
    pub store: String,
    pub store_manifest_sha256: String,
    pub skeleton: Skeleton,
    pub fps: f64,
    pub root_start: [f64; 3],
    pub features: String,
    pub run: RunConfig,
}

/// Desk-scale default when no --config is given.
pub fn default_config(joints: usize) -> ModelConfig {
    ModelConfig::small(joints)
}

pub fn load_clips(store: &ClipStore, d_a: usize, features_dir: Option<&Path>) -> Result<Vec<TrainingClip>> {
    let norm = &store.manifest.norm;
    (0..store.len())
        .into_par_iter()
        .map(|i| {
            let (g, a) = store.load(i).map_err(input)?;
            let file = features_dir.map(|d| d.join(format!("{}.feat", store.manifest.clips[i].id)));
            Ok(TrainingClip {
                y0: norm.normalize(&g.y)?,
                feats: crate::features::extract(d_a, &a, file.as_deref())?,
            })
        })
        .collect()
}

fn write_log(path: &Path, log: &[StepLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for l in log {
        w.serialize(l)?;
    }
    w.flush()?;
    Ok(())
}

fn read_log(path: &Path, upto: u64) -> Result<Vec<StepLog>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        let l: StepLog = row?;
        if l.step <= upto {
            out.push(l);
        }
    }
    Ok(out)
}

fn plot_log(path: &Path, log: &[StepLog]) -> Result<()> {
    let svg = line_chart(
        "training loss",
        "step",
        "noise-prediction MSE",
        &[
            Series { name: "loss", points: log.iter().map(|l| (l.step as f64, l.loss)).collect() },
            Series { name: "EMA", points: log.iter().map(|l| (l.step as f64, l.ema)).collect() },
        ],
        false,
    );
    std::fs::write(path, svg)?;
    Ok(())
}

struct State {
    model: GestureModel,
    params: ParamStore,
    trainer: Trainer,
    log: Vec<StepLog>,
}

fn save(out: &Path, s: &State, norm: &gestor_core::clip::NormStats, prov: &TrainProvenance) -> Result<()> {
    checkpoint::save(out, &s.model, &s.params, norm, Some(&s.trainer), serde_json::to_value(prov)?)?;
    write_log(&out.join(LOSS_CSV), &s.log)?;
    plot_log(&out.join(LOSS_SVG), &s.log)
}

pub fn run(a: &TrainArgs) -> Result<Vec<StepLog>> {
    let store = ClipStore::open(&a.store).map_err(input)?;
    if store.is_empty() {
        return Err(input(format!("clip store {} holds no clips", a.store.display())));
    }
    let resumed = if a.resume && a.out.join(MANIFEST_FILE).exists() {
        Some(checkpoint::load(&a.out).map_err(input)?)
    } else {
        None
    };
    let fallback = resumed
        .as_ref()
        .map_or_else(|| default_config(store.manifest.joints), |c| c.model.cfg.clone());
    let mut rc = RunConfig::load(a.config.as_deref(), fallback)?;
    if a.config.is_none() {
        if let Some(t) = resumed.as_ref().and_then(|c| c.trainer.as_ref()) {
            rc.train = t.cfg;
        }
    }
    rc.model.joints = store.manifest.joints;
    if let Some(s) = a.seed {
        rc.model.seed = s;
    }
    if let Some(n) = a.steps {
        rc.train.steps = n;
    }
    rc.model.validate().map_err(input)?;
    let clips = load_clips(&store, rc.model.d_a, a.features_dir.as_deref())?;
    let prov = TrainProvenance {
        store: a.store.display().to_string(),
        store_manifest_sha256: crate::util::file_sha256(&a.store.join(gestor_data::store::MANIFEST_FILE))?,
        skeleton: store.manifest.skeleton.clone(),
        fps: store.manifest.fps,
        root_start: store.manifest.clips[0].root_start,
        features: a.features_dir.as_ref().map_or("log-mel".into(), |d| format!("files:{}", d.display())),
        run: rc.clone(),
    };

    let mut s = if let Some(ck) = resumed {
        if ck.model.cfg != rc.model {
            return Err(input("checkpoint was trained with a different model config"));
        }
        let mut trainer = ck.trainer.ok_or_else(|| input("checkpoint has no optimizer state to resume"))?;
        trainer.cfg.steps = rc.train.steps;
        let log = read_log(&a.out.join(LOSS_CSV), trainer.step)?;
        println!("resuming at step {}", trainer.step);
        State { model: ck.model, params: ck.store, trainer, log }
    } else {
        let (params, model) = GestureModel::init(rc.model.clone())?;
        let trainer = Trainer::new(rc.train, &params, rc.model.seed);
        State { model, params, trainer, log: Vec::new() }
    };

    let norm = store.manifest.norm.clone();
    while s.trainer.step < s.trainer.cfg.steps {
        match s.trainer.train_step(&s.model, &mut s.params, &clips) {
            Ok(l) => s.log.push(l),
            Err(gestor_core::Error::NonFinite(msg)) => {
                save(&a.out, &s, &norm, &prov)?;
                return Err(runtime(format!(
                    "training diverged ({msg}); last good checkpoint (step {}) kept in {}",
                    s.trainer.step,
                    a.out.display()
                )));
            }
            Err(e) => return Err(e.into()),
        }
        let step = s.trainer.step;
        if a.save_every > 0 && step % a.save_every == 0 {
            save(&a.out, &s, &norm, &prov)?;
            let l = s.log.last().expect("logged");
            println!("step {step}: loss {:.5} ema {:.5}", l.loss, l.ema);
        }
    }
    save(&a.out, &s, &norm, &prov)?;
    Ok(s.log)
}
