//! Checkpoints: a named tensor table (`params.bin`), optional optimizer
//! moments (`optim.bin`) and a JSON manifest, written atomically per file.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clip::NormStats;
use crate::error::{Error, Result};
use crate::model::{GestureModel, ModelConfig, TrainConfig, Trainer};
use crate::params::ParamStore;
use crate::tensor::{read_u32, Tensor};

pub const PARAMS_FILE: &str = "params.bin";
pub const OPTIM_FILE: &str = "optim.bin";
pub const MANIFEST_FILE: &str = "manifest.json";
const TABLE_MAGIC: &[u8; 4] = b"DIMP";

pub fn write_named<W: Write>(w: &mut W, entries: &[(String, &Tensor)]) -> Result<()> {
    w.write_all(TABLE_MAGIC)?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        t.write_to(w)?;
    }
    Ok(())
}

pub fn read_named<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TABLE_MAGIC {
        return Err(Error::Format("not a parameter table".into()));
    }
    let count = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        if len > 4096 {
            return Err(Error::Format(format!("implausible name length {len}")));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
        out.push((name, Tensor::read_from(r)?));
    }
    Ok(out)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainerState {
    pub cfg: TrainConfig,
    pub step: u64,
    pub adam_t: u64,
    pub ema: Option<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ModelConfig,
    pub norm: NormStats,
    pub param_count: usize,
    #[serde(default)]
    pub trainer: Option<TrainerState>,
    /// Free-form provenance written by callers (input hashes, command line, …).
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub struct Checkpoint {
    pub manifest: Manifest,
    pub store: ParamStore,
    pub model: GestureModel,
    pub trainer: Option<Trainer>,
}

pub fn save(
    dir: &Path,
    model: &GestureModel,
    store: &ParamStore,
    norm: &NormStats,
    trainer: Option<&Trainer>,
    extra: serde_json::Value,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let entries: Vec<(String, &Tensor)> = store.iter().map(|(_, n, t)| (n.to_string(), t)).collect();
    let mut buf = Vec::new();
    write_named(&mut buf, &entries)?;
    write_atomic(&dir.join(PARAMS_FILE), &buf)?;
    if let Some(t) = trainer {
        let moments = t.adam.moments(store);
        let mut entries = Vec::with_capacity(2 * moments.len());
        for (name, m, v) in &moments {
            entries.push((format!("m.{name}"), m));
            entries.push((format!("v.{name}"), v));
        }
        let mut buf = Vec::new();
        write_named(&mut buf, &entries)?;
        write_atomic(&dir.join(OPTIM_FILE), &buf)?;
    }
    let manifest = Manifest {
        config: model.cfg.clone(),
        norm: norm.clone(),
        param_count: store.count(),
        trainer: trainer.map(|t| TrainerState {
            cfg: t.cfg,
            step: t.step,
            adam_t: t.adam.t,
            ema: t.ema,
            seed: t.seed,
        }),
        extra,
    };
    write_atomic(&dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?.as_bytes())
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    let (mut store, model) = GestureModel::init(manifest.config.clone())?;
    let table = read_named(&mut std::io::BufReader::new(std::fs::File::open(dir.join(PARAMS_FILE))?))?;
    if table.len() != store.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} tensors, config builds {}",
            table.len(),
            store.len()
        )));
    }
    for (name, t) in table {
        let id = store
            .id(&name)
            .ok_or_else(|| Error::Format(format!("unknown parameter {name}")))?;
        store.set(id, t)?;
    }
    let trainer = match &manifest.trainer {
        None => None,
        Some(ts) => {
            let mut t = Trainer::new(ts.cfg, &store, ts.seed);
            t.step = ts.step;
            t.adam.t = ts.adam_t;
            t.ema = ts.ema;
            let optim = dir.join(OPTIM_FILE);
            if optim.exists() {
                let table = read_named(&mut std::io::BufReader::new(std::fs::File::open(optim)?))?;
                let mut ms = std::collections::HashMap::new();
                for (name, tensor) in table {
                    ms.insert(name, tensor);
                }
                for (_, name, _) in store.iter() {
                    if let (Some(m), Some(v)) = (ms.get(&format!("m.{name}")), ms.get(&format!("v.{name}"))) {
                        t.adam.set_moments(&store, name, m, v)?;
                    }
                }
            }
            Some(t)
        }
    };
    Ok(Checkpoint {
        manifest,
        store,
        model,
        trainer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::condition::LocalFeatures;
    use crate::model::TrainingClip;

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_steps: 20,
            m: 1,
            d_model: 8,
            d_state: 3,
            conv_width: 3,
            joints: 1,
            d_a: 6,
            style_d_state: 3,
            cond_kernel: 5,
            mlp_ratio: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn named_table_round_trip() {
        let a = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::scalar(-0.5);
        let mut buf = Vec::new();
        write_named(&mut buf, &[("a".into(), &a), ("b.c".into(), &b)]).unwrap();
        let back = read_named(&mut buf.as_slice()).unwrap();
        assert_eq!(back, vec![("a".to_string(), a), ("b.c".to_string(), b)]);
        buf[0] = b'X';
        assert!(read_named(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn resume_from_disk_continues_trajectory() {
        let clips = vec![TrainingClip {
            y0: Tensor::new(&[6, 9], (0..54).map(|i| (i as f64 * 0.2).sin()).collect()).unwrap(),
            feats: LocalFeatures::new(Tensor::new(&[12, 6], (0..72).map(|i| (i as f64 * 0.3).cos()).collect()).unwrap(), 40.0).unwrap(),
        }];
        let tc = TrainConfig { steps: 4, batch: 1, ..Default::default() };
        let (mut s, model) = GestureModel::init(tiny()).unwrap();
        let mut tr = Trainer::new(tc, &s, 11);
        let full: Vec<f64> = (0..4).map(|_| tr.train_step(&model, &mut s, &clips).unwrap().loss).collect();

        let dir = tempfile::tempdir().unwrap();
        let (mut s, model) = GestureModel::init(tiny()).unwrap();
        let mut tr = Trainer::new(tc, &s, 11);
        let mut resumed: Vec<f64> = (0..2).map(|_| tr.train_step(&model, &mut s, &clips).unwrap().loss).collect();
        save(dir.path(), &model, &s, &NormStats::identity(9), Some(&tr), serde_json::Value::Null).unwrap();
        let ck = load(dir.path()).unwrap();
        let (mut s2, model2, mut tr2) = (ck.store, ck.model, ck.trainer.unwrap());
        assert_eq!(tr2.step, 2);
        resumed.extend((0..2).map(|_| tr2.train_step(&model2, &mut s2, &clips).unwrap().loss));
        assert_eq!(full, resumed);
    }

    #[test]
    fn mismatched_config_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (s, model) = GestureModel::init(tiny()).unwrap();
        save(dir.path(), &model, &s, &NormStats::identity(9), None, serde_json::Value::Null).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).unwrap().replace("\"M\": 1", "\"M\": 2");
        std::fs::write(&path, text).unwrap();
        assert!(load(dir.path()).is_err());
    }
}
