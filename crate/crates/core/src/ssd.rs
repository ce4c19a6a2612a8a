//! Structured state-space duality kernels.
//!
//! One scalar-decay SSM, three evaluation orders:
//!
//! * quadratic: `Y = (L ∘ (C Bᵀ)) V` with the 1-semiseparable mask
//!   `L_ij = a_i ⋯ a_{j+1}` (i ≥ j) materialized as a T×T buffer;
//! * linear: `h_t = a_t h_{t−1} + b_t v_tᵀ`, `y_t = h_tᵀ c_t`;
//! * chunked: quadratic inside each chunk, recurrent state carried across.
//!
//! All three accumulate in f64 regardless of the element type.

use std::fmt::Debug;

use num_traits::Float;

use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;

pub const DEFAULT_CHUNK: usize = 64;

/// Storage element for the scan kernels (f64 for correctness, f32 for benchmarks).
pub trait Element: Float + Send + Sync + Debug + Default + 'static {
    fn to_f64(self) -> f64;
    fn of(v: f64) -> Self;
}

impl Element for f64 {
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
}

impl Element for f32 {
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
}

/// Per-token decays and input/output projections of one SSM head.
#[derive(Debug, Clone)]
pub struct SsdParams<F: Element = f64> {
    a: Vec<F>,
    b: Vec<F>,
    c: Vec<F>,
    state: usize,
}

impl<F: Element> SsdParams<F> {
    /// `a` has length T with every entry in [0, 1]; `b` and `c` are T×S row-major.
    pub fn new(a: Vec<F>, b: Vec<F>, c: Vec<F>, state: usize) -> Result<Self> {
        validate_decays(&a)?;
        let len = a.len();
        if state == 0 {
            return Err(invalid!("state size must be ≥ 1"));
        }
        if b.len() != len * state || c.len() != len * state {
            return Err(shape_err!(
                "B/C must be {len}×{state}, got {} and {} elements",
                b.len(),
                c.len()
            ));
        }
        Ok(Self { a, b, c, state })
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    pub fn state(&self) -> usize {
        self.state
    }

    pub fn a(&self) -> &[F] {
        &self.a
    }

    pub fn b(&self) -> &[F] {
        &self.b
    }

    pub fn c(&self) -> &[F] {
        &self.c
    }

    fn b_row(&self, t: usize) -> &[F] {
        &self.b[t * self.state..(t + 1) * self.state]
    }

    fn c_row(&self, t: usize) -> &[F] {
        &self.c[t * self.state..(t + 1) * self.state]
    }

    fn check_values(&self, v: &[F], d_head: usize) -> Result<()> {
        if d_head == 0 || v.len() != self.len() * d_head {
            return Err(shape_err!(
                "V must be {}×{d_head}, got {} elements",
                self.len(),
                v.len()
            ));
        }
        Ok(())
    }

    /// Score `c_i · b_j` accumulated in f64.
    #[inline]
    fn score(&self, i: usize, j: usize) -> f64 {
        self.c_row(i)
            .iter()
            .zip(self.b_row(j))
            .map(|(&c, &b)| c.to_f64() * b.to_f64())
            .sum()
    }
}

fn validate_decays<F: Element>(a: &[F]) -> Result<()> {
    if a.is_empty() {
        return Err(invalid!("decay sequence is empty"));
    }
    for (t, &v) in a.iter().enumerate() {
        let v = v.to_f64();
        if !(0.0..=1.0).contains(&v) {
            return Err(invalid!("decay a[{t}] = {v} outside [0, 1]"));
        }
    }
    Ok(())
}

/// The T×T 1-semiseparable mask: ones on the diagonal, `∏_{k=j+1..i} a_k`
/// below it, zeros above.
pub fn build_1ss_mask(a: &[f64]) -> Result<Tensor> {
    validate_decays(a)?;
    let t_len = a.len();
    let mut m = vec![0.0; t_len * t_len];
    for i in 0..t_len {
        let mut run = 1.0;
        for j in (0..=i).rev() {
            m[i * t_len + j] = run;
            run *= a[j];
        }
    }
    Tensor::new(&[t_len, t_len], m)
}

/// Dual (attention-like) form. Materializes `L ∘ (C Bᵀ)` as one T×T buffer.
pub fn smasked_attention_quadratic<F: Element>(p: &SsdParams<F>, v: &[F], d_head: usize) -> Result<Vec<F>> {
    p.check_values(v, d_head)?;
    let t_len = p.len();
    let mut scores = vec![F::zero(); t_len * t_len];
    for i in 0..t_len {
        let row = &mut scores[i * t_len..(i + 1) * t_len];
        let mut run = 1.0;
        for j in (0..=i).rev() {
            row[j] = F::of(run * p.score(i, j));
            run *= p.a[j].to_f64();
        }
    }
    let mut out = vec![F::zero(); t_len * d_head];
    let mut acc = vec![0.0f64; d_head];
    for i in 0..t_len {
        acc.iter_mut().for_each(|x| *x = 0.0);
        for j in 0..=i {
            let s = scores[i * t_len + j].to_f64();
            if s == 0.0 {
                continue;
            }
            for (x, &vv) in acc.iter_mut().zip(&v[j * d_head..(j + 1) * d_head]) {
                *x += s * vv.to_f64();
            }
        }
        for (o, &x) in out[i * d_head..(i + 1) * d_head].iter_mut().zip(&acc) {
            *o = F::of(x);
        }
    }
    Ok(out)
}

/// Recurrent form with an S×d_head state; O(T) time, no T-sized scratch.
pub fn ssm_scan_linear<F: Element>(p: &SsdParams<F>, v: &[F], d_head: usize) -> Result<Vec<F>> {
    p.check_values(v, d_head)?;
    let s = p.state;
    let mut h = vec![0.0f64; s * d_head];
    let mut out = vec![F::zero(); p.len() * d_head];
    let mut y = vec![0.0f64; d_head];
    for t in 0..p.len() {
        let a = p.a[t].to_f64();
        let vt = &v[t * d_head..(t + 1) * d_head];
        y.iter_mut().for_each(|x| *x = 0.0);
        for (si, (&b, &c)) in p.b_row(t).iter().zip(p.c_row(t)).enumerate() {
            let (b, c) = (b.to_f64(), c.to_f64());
            let hrow = &mut h[si * d_head..(si + 1) * d_head];
            for ((hv, &x), yv) in hrow.iter_mut().zip(vt).zip(y.iter_mut()) {
                *hv = a * *hv + b * x.to_f64();
                *yv += c * *hv;
            }
        }
        for (o, &x) in out[t * d_head..(t + 1) * d_head].iter_mut().zip(&y) {
            *o = F::of(x);
        }
    }
    Ok(out)
}

/// Block form: exact quadratic evaluation inside chunks of `chunk` tokens,
/// with the recurrent state handed from one chunk to the next.
pub fn ssm_scan_chunked<F: Element>(p: &SsdParams<F>, v: &[F], d_head: usize, chunk: usize) -> Result<Vec<F>> {
    p.check_values(v, d_head)?;
    if chunk == 0 {
        return Err(invalid!("chunk size must be ≥ 1"));
    }
    let s = p.state;
    let t_len = p.len();
    let mut h = vec![0.0f64; s * d_head];
    let mut out = vec![F::zero(); t_len * d_head];
    let mut local = vec![0.0f64; chunk * chunk];
    let mut carry = vec![0.0f64; chunk];
    let mut acc = vec![0.0f64; d_head];

    for start in (0..t_len).step_by(chunk) {
        let end = (start + chunk).min(t_len);
        let q = end - start;
        // carry[i] = a_start ⋯ a_{start+i}; local[i][j] = a_{j+1} ⋯ a_i
        let mut run = 1.0;
        for i in 0..q {
            run *= p.a[start + i].to_f64();
            carry[i] = run;
            let mut r = 1.0;
            for j in (0..=i).rev() {
                local[i * chunk + j] = r;
                r *= p.a[start + j].to_f64();
            }
        }
        for i in 0..q {
            let ti = start + i;
            acc.iter_mut().for_each(|x| *x = 0.0);
            let ci = p.c_row(ti);
            for (si, &c) in ci.iter().enumerate() {
                let w = carry[i] * c.to_f64();
                if w == 0.0 {
                    continue;
                }
                for (x, &hv) in acc.iter_mut().zip(&h[si * d_head..(si + 1) * d_head]) {
                    *x += w * hv;
                }
            }
            for j in 0..=i {
                let w = local[i * chunk + j] * p.score(ti, start + j);
                if w == 0.0 {
                    continue;
                }
                for (x, &vv) in acc.iter_mut().zip(&v[(start + j) * d_head..(start + j + 1) * d_head]) {
                    *x += w * vv.to_f64();
                }
            }
            for (o, &x) in out[ti * d_head..(ti + 1) * d_head].iter_mut().zip(&acc) {
                *o = F::of(x);
            }
        }
        let total = carry[q - 1];
        h.iter_mut().for_each(|x| *x *= total);
        for j in 0..q {
            let w = local[(q - 1) * chunk + j];
            if w == 0.0 {
                continue;
            }
            let tj = start + j;
            let vj = &v[tj * d_head..(tj + 1) * d_head];
            for (si, &b) in p.b_row(tj).iter().enumerate() {
                let wb = w * b.to_f64();
                for (hv, &x) in h[si * d_head..(si + 1) * d_head].iter_mut().zip(vj) {
                    *hv += wb * x.to_f64();
                }
            }
        }
    }
    Ok(out)
}

/// Which evaluation order a Mamba-2 block uses for its scans.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanForm {
    #[default]
    Linear,
    Chunked(usize),
    Quadratic,
}

impl ScanForm {
    pub fn run<F: Element>(self, p: &SsdParams<F>, v: &[F], d_head: usize) -> Result<Vec<F>> {
        match self {
            ScanForm::Linear => ssm_scan_linear(p, v, d_head),
            ScanForm::Chunked(q) => ssm_scan_chunked(p, v, d_head, q),
            ScanForm::Quadratic => smasked_attention_quadratic(p, v, d_head),
        }
    }
}

/// Gradients of one scan head.
pub(crate) struct ScanGrads {
    pub da: Vec<f64>,
    pub db: Vec<f64>,
    pub dc: Vec<f64>,
    pub dv: Vec<f64>,
}

/// Adjoint of the recurrence: with λ_t = c_t dy_tᵀ + a_{t+1} λ_{t+1},
/// da_t = ⟨λ_t, h_{t−1}⟩, db_t = λ_t v_t, dv_t = λ_tᵀ b_t, dc_t = h_t dy_t.
pub(crate) fn ssm_scan_backward(p: &SsdParams<f64>, v: &[f64], d_head: usize, dy: &[f64]) -> ScanGrads {
    let s = p.state;
    let t_len = p.len();
    let sp = s * d_head;
    // h_t for t = 0..T stored with a leading zero state.
    let mut states = vec![0.0; (t_len + 1) * sp];
    for t in 0..t_len {
        let a = p.a[t];
        let vt = &v[t * d_head..(t + 1) * d_head];
        let (prev, cur) = states.split_at_mut((t + 1) * sp);
        let prev = &prev[t * sp..];
        let cur = &mut cur[..sp];
        for (si, &b) in p.b_row(t).iter().enumerate() {
            for pi in 0..d_head {
                cur[si * d_head + pi] = a * prev[si * d_head + pi] + b * vt[pi];
            }
        }
    }
    let mut g = ScanGrads {
        da: vec![0.0; t_len],
        db: vec![0.0; t_len * s],
        dc: vec![0.0; t_len * s],
        dv: vec![0.0; t_len * d_head],
    };
    let mut lam = vec![0.0; sp];
    for t in (0..t_len).rev() {
        let dyt = &dy[t * d_head..(t + 1) * d_head];
        let ht = &states[(t + 1) * sp..(t + 2) * sp];
        let hprev = &states[t * sp..(t + 1) * sp];
        if t + 1 < t_len {
            let an = p.a[t + 1];
            lam.iter_mut().for_each(|x| *x *= an);
        } else {
            lam.iter_mut().for_each(|x| *x = 0.0);
        }
        let ct = p.c_row(t);
        for si in 0..s {
            let row = si * d_head..(si + 1) * d_head;
            let mut dc = 0.0;
            for (l, (&h, &d)) in lam[row.clone()].iter_mut().zip(ht[row.clone()].iter().zip(dyt)) {
                *l += ct[si] * d;
                dc += h * d;
            }
            g.dc[t * s + si] = dc;
        }
        let vt = &v[t * d_head..(t + 1) * d_head];
        let bt = p.b_row(t);
        let mut da = 0.0;
        for si in 0..s {
            let lrow = &lam[si * d_head..(si + 1) * d_head];
            let hp = &hprev[si * d_head..(si + 1) * d_head];
            let mut db = 0.0;
            for pi in 0..d_head {
                da += lrow[pi] * hp[pi];
                db += lrow[pi] * vt[pi];
                g.dv[t * d_head + pi] += lrow[pi] * bt[si];
            }
            g.db[t * s + si] = db;
        }
        g.da[t] = da;
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_params(rng: &mut ChaCha8Rng, t: usize, s: usize) -> SsdParams<f64> {
        let a = (0..t).map(|_| rng.random_range(0.0..=1.0)).collect();
        let b = (0..t * s).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c = (0..t * s).map(|_| rng.random_range(-1.0..1.0)).collect();
        SsdParams::new(a, b, c, s).unwrap()
    }

    fn max_diff(x: &[f64], y: &[f64]) -> f64 {
        x.iter().zip(y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn mask_unit_decay_is_lower_ones() {
        let m = build_1ss_mask(&[0.3, 1.0, 1.0]).unwrap();
        assert_eq!(m.data(), &[1., 0., 0., 1., 1., 0., 1., 1., 1.]);
    }

    #[test]
    fn mask_half_decay() {
        let m = build_1ss_mask(&[0.9, 0.5, 0.5]).unwrap();
        assert_eq!(m.data(), &[1., 0., 0., 0.5, 1., 0., 0.25, 0.5, 1.]);
    }

    #[test]
    fn zero_decay_severs_history() {
        let m = build_1ss_mask(&[0.7, 0.8, 0.0, 0.6, 0.9]).unwrap();
        for i in 2..5 {
            for j in 0..2 {
                assert_eq!(m.get2(i, j), 0.0, "({i},{j})");
            }
        }
        assert!(m.get2(1, 0) > 0.0 && m.get2(4, 2) > 0.0);
    }

    #[test]
    fn mask_rejects_out_of_range() {
        assert!(build_1ss_mask(&[0.5, 1.2]).is_err());
        assert!(build_1ss_mask(&[-0.1]).is_err());
        assert!(SsdParams::new(vec![0.5, f64::NAN], vec![0.; 2], vec![0.; 2], 1).is_err());
    }

    #[test]
    fn single_token() {
        let p = SsdParams::new(vec![0.4], vec![1., 2.], vec![3., -1.], 2).unwrap();
        let v = [2.0, -1.0, 0.5];
        let y = smasked_attention_quadratic(&p, &v, 3).unwrap();
        assert_eq!(y, vec![2.0, -1.0, 0.5]);
        assert_eq!(ssm_scan_linear(&p, &v, 3).unwrap(), y);
    }

    #[test]
    fn unit_decay_rank_one_is_prefix_sum() {
        let t = 6;
        let p = SsdParams::new(vec![1.0; t], vec![1.0; t], vec![1.0; t], 1).unwrap();
        let v: Vec<f64> = (0..t * 2).map(|i| i as f64 - 3.0).collect();
        let y = smasked_attention_quadratic(&p, &v, 2).unwrap();
        let mut run = [0.0; 2];
        for i in 0..t {
            run[0] += v[2 * i];
            run[1] += v[2 * i + 1];
            assert_eq!(&y[2 * i..2 * i + 2], &run);
        }
    }

    #[test]
    fn memoryless_when_decay_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = random_params(&mut rng, 5, 3);
        p.a = vec![0.0; 5];
        let v: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = ssm_scan_linear(&p, &v, 2).unwrap();
        for t in 0..5 {
            let s = p.score(t, t);
            assert!((y[2 * t] - s * v[2 * t]).abs() < 1e-15);
            assert!((y[2 * t + 1] - s * v[2 * t + 1]).abs() < 1e-15);
        }
    }

    #[test]
    fn two_step_scalar_case() {
        let p = SsdParams::new(vec![0.3, 0.5], vec![1.0, 1.0], vec![1.0, 1.0], 1).unwrap();
        assert_eq!(ssm_scan_linear(&p, &[1.0, 1.0], 1).unwrap(), vec![1.0, 1.5]);
    }

    #[test]
    fn chunk_extremes_match_other_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = random_params(&mut rng, 17, 4);
        let v: Vec<f64> = (0..17 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let quad = smasked_attention_quadratic(&p, &v, 3).unwrap();
        let lin = ssm_scan_linear(&p, &v, 3).unwrap();
        assert!(max_diff(&ssm_scan_chunked(&p, &v, 3, 17).unwrap(), &quad) < 1e-14);
        assert!(max_diff(&ssm_scan_chunked(&p, &v, 3, 1).unwrap(), &lin) < 1e-14);
        assert!(max_diff(&ssm_scan_chunked(&p, &v, 3, 5).unwrap(), &lin) < 1e-12);
    }

    #[test]
    fn chunk16_on_t128() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = random_params(&mut rng, 128, 8);
        let v: Vec<f64> = (0..128 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lin = ssm_scan_linear(&p, &v, 4).unwrap();
        assert!(max_diff(&ssm_scan_chunked(&p, &v, 4, 16).unwrap(), &lin) < 1e-8);
    }

    #[test]
    fn quadratic_equals_mask_composition() {
        // Y = (L ∘ C Bᵀ) V evaluated with the standalone mask and matmuls.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (t, s, d) = (8, 4, 3);
        let p = random_params(&mut rng, t, s);
        let v: Vec<f64> = (0..t * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mask = build_1ss_mask(p.a()).unwrap();
        let cbt = crate::kernels::matmul_bt_raw(p.c(), p.b(), t, s, t);
        let m: Vec<f64> = mask.data().iter().zip(&cbt).map(|(l, x)| l * x).collect();
        let expect = crate::kernels::matmul_raw(&m, &v, t, t, d);
        assert!(max_diff(&smasked_attention_quadratic(&p, &v, d).unwrap(), &expect) < 1e-14);
    }

    #[test]
    fn f32_storage_tracks_f64() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = random_params(&mut rng, 64, 8);
        let v: Vec<f64> = (0..64 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let conv = |x: &[f64]| x.iter().map(|&y| y as f32).collect::<Vec<_>>();
        let p32 = SsdParams::new(conv(p.a()), conv(p.b()), conv(p.c()), 8).unwrap();
        let y64 = ssm_scan_linear(&p, &v, 4).unwrap();
        let y32 = ssm_scan_linear(&p32, &conv(&v), 4).unwrap();
        let q32 = smasked_attention_quadratic(&p32, &conv(&v), 4).unwrap();
        for ((a, b), c) in y64.iter().zip(&y32).zip(&q32) {
            assert!((a - *b as f64).abs() < 1e-4);
            assert!((*b - *c).abs() < 1e-4);
        }
    }

    #[test]
    fn rejects_shape_errors() {
        let p = SsdParams::new(vec![0.5; 3], vec![0.0; 6], vec![0.0; 6], 2).unwrap();
        assert!(ssm_scan_linear(&p, &[0.0; 5], 2).is_err());
        assert!(ssm_scan_chunked(&p, &[0.0; 6], 2, 0).is_err());
        assert!(SsdParams::new(vec![0.5; 3], vec![0.0; 5], vec![0.0; 6], 2).is_err());
    }
}
