//! Timing and memory probes for the scan kernels.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alloc;
use crate::error::{invalid, Result};
use crate::ssd::{Element, ScanForm, SsdParams};

/// Lengths used for the kernel scaling sweep.
pub const SCALING_LENGTHS: [usize; 6] = [512, 1024, 2048, 4096, 8192, 16384];

/// A random head with decays in [0.999, 1): slow enough that the masked score
/// buffer stays dense (no underflow shortcuts) at every benchmarked length.
pub fn random_head<F: Element>(t: usize, state: usize, d_head: usize, seed: u64) -> Result<(SsdParams<F>, Vec<F>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize, lo: f64, hi: f64| -> Vec<F> { (0..n).map(|_| F::of(rng.random_range(lo..hi))).collect() };
    let a = draw(t, 0.999, 1.0);
    let b = draw(t * state, -0.25, 0.25);
    let c = draw(t * state, -0.25, 0.25);
    let v = draw(t * d_head, -1.0, 1.0);
    Ok((SsdParams::new(a, b, c, state)?, v))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSample {
    pub t: usize,
    pub wall_ns: u128,
    pub peak_bytes: usize,
}

/// Best-of-`reps` wall time and the peak extra allocation of one form at one length.
pub fn measure_kernel<F: Element>(form: ScanForm, p: &SsdParams<F>, v: &[F], d_head: usize, reps: usize) -> Result<KernelSample> {
    let mut best = u128::MAX;
    let mut peak = 0;
    for _ in 0..reps.max(1) {
        let start = Instant::now();
        let (out, bytes) = alloc::measure(|| form.run(p, v, d_head));
        let ns = start.elapsed().as_nanos();
        std::hint::black_box(out?);
        best = best.min(ns);
        peak = peak.max(bytes);
    }
    Ok(KernelSample {
        t: p.len(),
        wall_ns: best,
        peak_bytes: peak,
    })
}

/// Sweeps `lengths` for one form; `reps` shrinks to 1 once a single run passes `slow_ns`.
pub fn sweep<F: Element>(
    form: ScanForm,
    lengths: &[usize],
    state: usize,
    d_head: usize,
    reps: usize,
    slow_ns: u128,
) -> Result<Vec<KernelSample>> {
    let mut out = Vec::with_capacity(lengths.len());
    let mut r = reps;
    for (i, &t) in lengths.iter().enumerate() {
        let (p, v) = random_head::<F>(t, state, d_head, i as u64)?;
        let s = measure_kernel(form, &p, &v, d_head, r)?;
        if s.wall_ns > slow_ns {
            r = 1;
        }
        out.push(s);
    }
    Ok(out)
}

/// Least-squares slope of log(wall) against log(T).
pub fn loglog_slope(samples: &[KernelSample]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(invalid!("need at least two points for a slope"));
    }
    let pts: Vec<(f64, f64)> = samples
        .iter()
        .map(|s| ((s.t as f64).ln(), (s.wall_ns.max(1) as f64).ln()))
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(invalid!("all lengths are equal"));
    }
    Ok(sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(t: usize, ns: u128) -> KernelSample {
        KernelSample { t, wall_ns: ns, peak_bytes: 0 }
    }

    #[test]
    fn slope_of_power_laws() {
        let lin: Vec<_> = [100, 200, 400, 800].iter().map(|&t| sample(t, 7 * t as u128)).collect();
        let quad: Vec<_> = [100, 200, 400, 800].iter().map(|&t| sample(t, (t * t) as u128)).collect();
        assert!((loglog_slope(&lin).unwrap() - 1.0).abs() < 1e-9);
        assert!((loglog_slope(&quad).unwrap() - 2.0).abs() < 1e-9);
        assert!(loglog_slope(&lin[..1]).is_err());
    }

    #[test]
    fn random_head_is_valid_and_seeded() {
        let (p, v) = random_head::<f32>(64, 4, 3, 1).unwrap();
        let (q, _) = random_head::<f32>(64, 4, 3, 1).unwrap();
        assert_eq!(p.a(), q.a());
        assert!(p.a().iter().all(|&a| (0.999..1.0).contains(&(a as f64))));
        assert_eq!(v.len(), 64 * 3);
    }

    #[test]
    fn forms_agree_on_bench_heads() {
        let (p, v) = random_head::<f64>(300, 8, 4, 2).unwrap();
        let lin = ScanForm::Linear.run(&p, &v, 4).unwrap();
        let quad = ScanForm::Quadratic.run(&p, &v, 4).unwrap();
        let err = lin.iter().zip(&quad).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-9, "{err}");
    }
}
