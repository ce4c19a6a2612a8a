use std::path::PathBuf;
use std::time::Instant;

use gestor_core::adaln::{AdaLNStack, AttentionStackConfig};
use gestor_core::bench::{loglog_slope, sweep, SCALING_LENGTHS};
use gestor_core::diffusion::gaussian;
use gestor_core::model::ModelConfig;
use gestor_core::ssd::ScanForm;
use gestor_core::{alloc, Graph, ParamStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{input, Result};
use crate::plot::{line_chart, Series};
use crate::util::write_json;

/// 20, 40, …, 100 s of motion at 20 fps.
pub const DEFAULT_LENGTHS: [usize; 5] = [400, 800, 1200, 1600, 2000];

#[derive(Debug, Clone, clap::Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated sequence lengths (frames).
    #[arg(long, value_delimiter = ',')]
    pub lengths: Option<Vec<usize>>,
    #[arg(long, default_value_t = 1)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Also sweep the bare scan kernels over 512..16384 steps.
    #[arg(long)]
    pub kernel: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Form {
    #[serde(rename = "mamba-linear")]
    MambaLinear,
    #[serde(rename = "mamba-quadratic")]
    MambaQuadratic,
    #[serde(rename = "attention-2x")]
    Attention2x,
}

impl Form {
    pub const ALL: [Form; 3] = [Form::MambaLinear, Form::MambaQuadratic, Form::Attention2x];

    pub fn label(self) -> &'static str {
        match self {
            Form::MambaLinear => "mamba-linear",
            Form::MambaQuadratic => "mamba-quadratic",
            Form::Attention2x => "attention-2x",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub form: Form,
    #[serde(rename = "T")]
    pub t: usize,
    pub d_model: usize,
    pub wall_ns: u128,
    pub peak_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub mamba_linear: usize,
    pub mamba_quadratic: usize,
    pub attention_2x: usize,
    pub mamba_blocks: usize,
    pub attention_blocks: usize,
}

/// Six blocks as in the full model, at a width that runs in seconds on a CPU.
pub fn default_config() -> ModelConfig {
    ModelConfig {
        m: 6,
        d_model: 64,
        d_state: 16,
        ..ModelConfig::default()
    }
}

pub fn build(form: Form, cfg: &ModelConfig) -> Result<(ParamStore, AdaLNStack)> {
    let mut store = ParamStore::new(cfg.seed);
    let mut sc = cfg.stack();
    let stack = match form {
        Form::MambaLinear => {
            sc.block.scan = ScanForm::Linear;
            AdaLNStack::mamba(&mut store, "stack", &sc, cfg.seed)?
        }
        Form::MambaQuadratic => {
            sc.block.scan = ScanForm::Quadratic;
            AdaLNStack::mamba(&mut store, "stack", &sc, cfg.seed)?
        }
        Form::Attention2x => AdaLNStack::attention(&mut store, "stack", &AttentionStackConfig::matching(&sc, 2))?,
    };
    Ok((store, stack))
}

pub fn param_counts(cfg: &ModelConfig) -> ParamCounts {
    let sc = cfg.stack();
    ParamCounts {
        mamba_linear: sc.param_count(),
        mamba_quadratic: sc.param_count(),
        attention_2x: AttentionStackConfig::matching(&sc, 2).param_count(),
        mamba_blocks: sc.m,
        attention_blocks: 2 * sc.m,
    }
}

/// Best-of-`reps` wall time and peak extra allocation of one stack forward pass.
pub fn measure(form: Form, cfg: &ModelConfig, t: usize, reps: usize, seed: u64) -> Result<BenchRow> {
    let (store, stack) = build(form, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ t as u64);
    let x = gaussian(&mut rng, &[t, cfg.d_model]);
    let c = gaussian(&mut rng, &[t, cfg.d_c()]);
    let mut best = u128::MAX;
    let mut peak = 0;
    for _ in 0..reps.max(1) {
        let start = Instant::now();
        let (out, bytes) = alloc::measure(|| {
            let g = Graph::inference();
            stack.forward(&g, &store, &g.constant(x.clone()), &g.constant(c.clone())).map(|v| v.to_tensor())
        });
        let ns = start.elapsed().as_nanos();
        std::hint::black_box(out?);
        best = best.min(ns);
        peak = peak.max(bytes);
    }
    Ok(BenchRow {
        form,
        t,
        d_model: cfg.d_model,
        wall_ns: best,
        peak_bytes: peak,
    })
}

pub struct BenchOutcome {
    pub rows: Vec<BenchRow>,
    pub params: ParamCounts,
}

pub fn run(a: &BenchArgs) -> Result<BenchOutcome> {
    let mut rc = RunConfig::load(a.config.as_deref(), default_config())?;
    rc.model.seed = a.seed;
    rc.model.validate().map_err(input)?;
    let cfg = rc.model;
    let lengths = a.lengths.clone().unwrap_or_else(|| DEFAULT_LENGTHS.to_vec());
    if lengths.is_empty() || lengths.contains(&0) {
        return Err(input("--lengths must be positive"));
    }
    if !alloc::is_installed() {
        eprintln!("warning: counting allocator not installed; peak_bytes will read 0");
    }
    std::fs::create_dir_all(&a.out)?;

    let mut rows = Vec::new();
    for form in Form::ALL {
        for &t in &lengths {
            let r = measure(form, &cfg, t, a.reps, a.seed)?;
            println!("{:<16} T={:<6} {:>10.3} ms {:>12} B", form.label(), t, r.wall_ns as f64 / 1e6, r.peak_bytes);
            rows.push(r);
        }
    }
    let mut w = csv::Writer::from_path(a.out.join("bench.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let params = param_counts(&cfg);
    write_json(&a.out.join("params.json"), &params)?;
    let series: Vec<Series> = Form::ALL
        .iter()
        .map(|&f| Series {
            name: f.label(),
            points: rows.iter().filter(|r| r.form == f).map(|r| (r.t as f64, r.wall_ns as f64 / 1e6)).collect(),
        })
        .collect();
    std::fs::write(a.out.join("bench.svg"), line_chart("stack forward time", "T (frames)", "ms", &series, true))?;

    let mut kernel = serde_json::Value::Null;
    if a.kernel {
        let mut w = csv::Writer::from_path(a.out.join("kernel.csv"))?;
        w.write_record(["form", "T", "wall_ns", "peak_bytes"])?;
        let mut slopes = serde_json::Map::new();
        let mut ks = Vec::new();
        for (name, form) in [("linear", ScanForm::Linear), ("quadratic", ScanForm::Quadratic)] {
            let samples = sweep::<f32>(form, &SCALING_LENGTHS, 16, 16, 3, 2_000_000_000)?;
            for s in &samples {
                w.write_record([name.to_string(), s.t.to_string(), s.wall_ns.to_string(), s.peak_bytes.to_string()])?;
            }
            let slope = loglog_slope(&samples)?;
            println!("kernel {name}: log-log slope {slope:.3}");
            slopes.insert(name.into(), slope.into());
            ks.push(Series { name, points: samples.iter().map(|s| (s.t as f64, s.wall_ns as f64 / 1e6)).collect() });
        }
        w.flush()?;
        std::fs::write(a.out.join("kernel.svg"), line_chart("scan kernel time", "T", "ms", &ks, true))?;
        kernel = serde_json::Value::Object(slopes);
    }
    write_json(
        &a.out.join("manifest.json"),
        &serde_json::json!({
            "config": RunConfig { model: cfg.clone(), train: rc.train },
            "lengths": lengths,
            "reps": a.reps,
            "seed": a.seed,
            "allocator": alloc::is_installed(),
            "params": params,
            "kernel_slopes": kernel,
        }),
    )?;
    Ok(BenchOutcome { rows, params })
}
