//! A small convolutional motion autoencoder whose per-frame latent codes
//! define the feature space for the feature-space Fréchet distance.

use std::path::Path;

use gestor_core::checkpoint::{read_named, write_named};
use gestor_core::clip::NormStats;
use gestor_core::kernels::Padding;
use gestor_core::nn::Conv1d;
use gestor_core::optim::{Adam, AdamConfig};
use gestor_core::{Graph, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{MetricsError, Result};

const WEIGHTS_FILE: &str = "embedder.bin";
const MANIFEST_FILE: &str = "embedder.json";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbedderConfig {
    pub channels: usize,
    pub hidden: usize,
    pub latent: usize,
    pub kernel: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl EmbedderConfig {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            hidden: 64,
            latent: 32,
            kernel: 5,
            steps: 300,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EmbedderManifest {
    config: EmbedderConfig,
    norm: NormStats,
    trained: bool,
    id: String,
    final_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Embedder {
    pub cfg: EmbedderConfig,
    pub norm: NormStats,
    pub trained: bool,
    pub final_loss: Option<f64>,
    store: ParamStore,
    layers: [Conv1d; 4],
}

impl Embedder {
    /// A randomly initialized, untrained embedder.
    pub fn new(cfg: EmbedderConfig) -> Self {
        let mut store = ParamStore::new(cfg.seed);
        let pad = Padding::Reflect(cfg.kernel / 2);
        let layers = [
            Conv1d::new(&mut store, "enc1", cfg.kernel, cfg.channels, cfg.hidden, pad, true),
            Conv1d::new(&mut store, "enc2", cfg.kernel, cfg.hidden, cfg.latent, pad, true),
            Conv1d::new(&mut store, "dec1", cfg.kernel, cfg.latent, cfg.hidden, pad, true),
            Conv1d::new(&mut store, "dec2", cfg.kernel, cfg.hidden, cfg.channels, pad, true),
        ];
        Self {
            cfg,
            norm: NormStats::identity(cfg.channels),
            trained: false,
            final_loss: None,
            store,
            layers,
        }
    }

    fn encode_var(&self, g: &Graph, store: &ParamStore, x: &Var) -> gestor_core::Result<Var> {
        let h = g.silu(&self.layers[0].forward(g, store, x)?)?;
        self.layers[1].forward(g, store, &h)
    }

    fn decode_var(&self, g: &Graph, store: &ParamStore, z: &Var) -> gestor_core::Result<Var> {
        let h = g.silu(&self.layers[2].forward(g, store, z)?)?;
        self.layers[3].forward(g, store, &h)
    }

    /// Fits normalization and trains the autoencoder on `reference` by full-batch reconstruction.
    pub fn train(cfg: EmbedderConfig, reference: &[Tensor]) -> Result<Self> {
        if reference.is_empty() {
            return Err(MetricsError::TooFewSamples { need: 1, got: 0 });
        }
        let mut e = Self::new(cfg);
        e.norm = NormStats::fit(reference.iter())?;
        let data: Vec<Tensor> = reference.iter().map(|t| e.norm.normalize(t)).collect::<Result<_, _>>()?;
        let mut store = e.store.clone();
        let mut adam = Adam::new(AdamConfig { lr: cfg.lr, ..Default::default() }, &store);
        let mut last = f64::NAN;
        for _ in 0..cfg.steps {
            let g = Graph::new();
            let mut total: Option<Var> = None;
            for x in &data {
                let xv = g.constant(x.clone());
                let z = e.encode_var(&g, &store, &xv)?;
                let r = e.decode_var(&g, &store, &z)?;
                let l = g.mse(&r, &xv)?;
                total = Some(match total {
                    Some(t) => g.add(&t, &l)?,
                    None => l,
                });
            }
            let loss = g.scale(&total.expect("non-empty"), 1.0 / data.len() as f64)?;
            last = loss.data()[0];
            let grads = g.backward(&loss)?;
            adam.step(&mut store, &grads)?;
        }
        e.store = store;
        e.trained = true;
        e.final_loss = Some(last);
        Ok(e)
    }

    /// T×latent codes for one clip (raw, un-normalized input).
    pub fn embed(&self, clip: &Tensor) -> Result<Tensor> {
        if !self.trained {
            return Err(MetricsError::Untrained);
        }
        let x = self.norm.normalize(clip)?;
        let g = Graph::inference();
        Ok(self.encode_var(&g, &self.store, &g.constant(x))?.to_tensor())
    }

    pub fn reconstruct(&self, clip: &Tensor) -> Result<Tensor> {
        let z = self.embed(clip)?;
        let g = Graph::inference();
        let r = self.decode_var(&g, &self.store, &g.constant(z))?.to_tensor();
        Ok(self.norm.denormalize(&r)?)
    }

    /// Content hash of configuration, normalization and weights.
    pub fn id(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.cfg).unwrap_or_default());
        h.update(serde_json::to_vec(&self.norm).unwrap_or_default());
        for (_, name, t) in self.store.iter() {
            h.update(name.as_bytes());
            h.update(t.to_bytes());
        }
        let digest = h.finalize();
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(gestor_core::Error::from)?;
        let entries: Vec<(String, &Tensor)> = self.store.iter().map(|(_, n, t)| (n.to_string(), t)).collect();
        let mut buf = Vec::new();
        write_named(&mut buf, &entries)?;
        std::fs::write(dir.join(WEIGHTS_FILE), buf).map_err(gestor_core::Error::from)?;
        let m = EmbedderManifest {
            config: self.cfg,
            norm: self.norm.clone(),
            trained: self.trained,
            id: self.id(),
            final_loss: self.final_loss,
        };
        let text = serde_json::to_string_pretty(&m).map_err(gestor_core::Error::from)?;
        std::fs::write(dir.join(MANIFEST_FILE), text).map_err(gestor_core::Error::from)?;
        Ok(())
    }

    /// Loads a saved embedder; untrained ones are rejected.
    pub fn load(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join(MANIFEST_FILE)).map_err(gestor_core::Error::from)?;
        let m: EmbedderManifest = serde_json::from_str(&text).map_err(gestor_core::Error::from)?;
        if !m.trained {
            return Err(MetricsError::Untrained);
        }
        let mut e = Self::new(m.config);
        let bytes = std::fs::read(dir.join(WEIGHTS_FILE)).map_err(gestor_core::Error::from)?;
        for (name, t) in read_named(&mut bytes.as_slice())? {
            let id = e
                .store
                .id(&name)
                .ok_or_else(|| gestor_core::Error::Format(format!("unknown embedder tensor {name}")))?;
            e.store.set(id, t)?;
        }
        e.norm = m.norm;
        e.trained = true;
        e.final_loss = m.final_loss;
        if e.id() != m.id {
            return Err(gestor_core::Error::Format("embedder weights do not match manifest id".into()).into());
        }
        Ok(e)
    }
}
