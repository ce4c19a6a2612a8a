//! Central finite-difference checks for the tape.
//!
//! The numeric side only ever evaluates the function forward on a
//! non-recording graph, so it shares no code with the adjoints it checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// ‖a − n‖₂ / max(‖a‖₂, ‖n‖₂, 1e-8).
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-8)
}

/// Reduces `y` to a scalar with fixed pseudo-random weights so every output
/// element contributes a distinct sensitivity.
pub fn probe_loss(g: &Graph, y: &Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..y.value().numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (r, c) = y.dims2();
    let w = g.constant(Tensor::new(&[r, c], w)?);
    let prod = g.mul(y, &w)?;
    g.sum(&prod)
}

/// Checks d f / d inputs. Returns the relative error per input.
pub fn check_inputs<F>(inputs: &[Tensor], f: F, h: f64) -> Result<Vec<f64>>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = f(&g, &vars)?;
    let grads = g.backward(&loss)?;

    let eval = |ts: &[Tensor]| -> Result<f64> {
        let g = Graph::inference();
        let vs: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
        Ok(f(&g, &vs)?.data()[0])
    };

    let mut errors = Vec::with_capacity(inputs.len());
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        let mut work = inputs.to_vec();
        let mut numeric = Vec::with_capacity(inputs[i].numel());
        for k in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[k];
            work[i].data_mut()[k] = x0 + h;
            let up = eval(&work)?;
            work[i].data_mut()[k] = x0 - h;
            let down = eval(&work)?;
            work[i].data_mut()[k] = x0;
            numeric.push((up - down) / (2.0 * h));
        }
        errors.push(relative_error(&analytic, &numeric));
    }
    Ok(errors)
}

/// Checks d f / d θ coordinate-wise for the given parameters.
pub fn check_params<F>(store: &ParamStore, ids: &[ParamId], f: F, h: f64) -> Result<Vec<(String, f64)>>
where
    F: Fn(&Graph, &ParamStore) -> Result<Var>,
{
    let g = Graph::new();
    let loss = f(&g, store)?;
    let grads = g.backward(&loss)?;
    let mut work = store.clone();
    let mut out = Vec::new();
    for &id in ids {
        let analytic = grads.param(id).unwrap_or_else(|| vec![0.0; store.get(id).numel()]);
        let mut numeric = Vec::with_capacity(analytic.len());
        for k in 0..analytic.len() {
            let x0 = store.get(id).data()[k];
            work.tensor_mut(id).data_mut()[k] = x0 + h;
            let up = f(&Graph::inference(), &work)?.data()[0];
            work.tensor_mut(id).data_mut()[k] = x0 - h;
            let down = f(&Graph::inference(), &work)?.data()[0];
            work.tensor_mut(id).data_mut()[k] = x0;
            numeric.push((up - down) / (2.0 * h));
        }
        out.push((store.name(id).to_string(), relative_error(&analytic, &numeric)));
    }
    Ok(out)
}

/// Directional check per parameter tensor: compares ⟨∇θ f, u⟩ against
/// (f(θ + h·u) − f(θ − h·u)) / 2h for a random unit direction u.
/// Suited to models too large for coordinate-wise differencing.
pub fn check_params_directional<F>(
    store: &ParamStore,
    ids: &[ParamId],
    f: F,
    h: f64,
    seed: u64,
) -> Result<Vec<(String, f64)>>
where
    F: Fn(&Graph, &ParamStore) -> Result<Var>,
{
    let g = Graph::new();
    let loss = f(&g, store)?;
    let grads = g.backward(&loss)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = store.clone();
    let mut out = Vec::new();
    for &id in ids {
        let n = store.get(id).numel();
        let mut u: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        u.iter_mut().for_each(|x| *x /= norm);
        let analytic: f64 = grads
            .param(id)
            .map(|gr| gr.iter().zip(&u).map(|(a, b)| a * b).sum())
            .unwrap_or(0.0);
        let base = store.get(id).clone();
        let shifted = |sign: f64| {
            let mut t = base.clone();
            t.data_mut().iter_mut().zip(&u).for_each(|(x, d)| *x += sign * h * d);
            t
        };
        work.set(id, shifted(1.0))?;
        let up = f(&Graph::inference(), &work)?.data()[0];
        work.set(id, shifted(-1.0))?;
        let down = f(&Graph::inference(), &work)?.data()[0];
        work.set(id, base)?;
        let numeric = (up - down) / (2.0 * h);
        out.push((store.name(id).to_string(), relative_error(&[analytic], &[numeric])));
    }
    Ok(out)
}

fn draw(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches")
}

type Case = (&'static str, Vec<Tensor>, Box<dyn Fn(&Graph, &[Var]) -> Result<Var>>);

/// Central-difference check of every differentiable tape op, each reduced by
/// `probe_loss`. Returns the worst relative error over inputs per op.
pub fn kernel_suite(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    use crate::kernels::Padding;
    use crate::ssd::ScanForm;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |s: &[usize]| draw(&mut rng, s, -1.0, 1.0);
    let (m34, m34b, m45, row4, m36) = (r(&[3, 4]), r(&[3, 4]), r(&[4, 5]), r(&[1, 4]), r(&[3, 6]));
    let (conv_x, conv_w, dw_w, res_x) = (r(&[7, 3]), r(&[3, 3, 2]), r(&[3, 3]), r(&[5, 2]));
    let (scan_v, scan_b, scan_c) = (r(&[6, 4]), r(&[6, 3]), r(&[6, 3]));
    let scan_a = draw(&mut rng, &[6, 2], 0.3, 0.95);

    let p = |g: &Graph, y: Result<Var>| probe_loss(g, &y?, 7);
    let scan = |form: ScanForm| -> Box<dyn Fn(&Graph, &[Var]) -> Result<Var>> {
        Box::new(move |g, v| p(g, g.ssd_scan(&v[0], &v[1], &v[2], &v[3], form)))
    };
    let scan_in = vec![scan_v, scan_a, scan_b, scan_c];
    let cases: Vec<Case> = vec![
        ("matmul", vec![m34.clone(), m45], Box::new(move |g, v| p(g, g.matmul(&v[0], &v[1])))),
        ("add", vec![m34.clone(), m34b.clone()], Box::new(move |g, v| p(g, g.add(&v[0], &v[1])))),
        ("sub", vec![m34.clone(), m34b.clone()], Box::new(move |g, v| p(g, g.sub(&v[0], &v[1])))),
        ("mul", vec![m34.clone(), m34b.clone()], Box::new(move |g, v| p(g, g.mul(&v[0], &v[1])))),
        ("add_row", vec![m34.clone(), row4.clone()], Box::new(move |g, v| p(g, g.add_row(&v[0], &v[1])))),
        ("mul_row", vec![m34.clone(), row4.clone()], Box::new(move |g, v| p(g, g.mul_row(&v[0], &v[1])))),
        ("scale", vec![m34.clone()], Box::new(move |g, v| p(g, g.scale(&v[0], -1.7)))),
        ("add_scalar", vec![m34.clone()], Box::new(move |g, v| p(g, g.add_scalar(&v[0], 0.4)))),
        ("silu", vec![m34.clone()], Box::new(move |g, v| p(g, g.silu(&v[0])))),
        ("softplus", vec![m34.clone()], Box::new(move |g, v| p(g, g.softplus(&v[0])))),
        ("exp", vec![m34.clone()], Box::new(move |g, v| p(g, g.exp(&v[0])))),
        ("layer_norm", vec![m36.clone()], Box::new(move |g, v| p(g, g.layer_norm(&v[0], 1e-6)))),
        ("conv1d zero", vec![conv_x.clone(), conv_w.clone()], Box::new(move |g, v| p(g, g.conv1d(&v[0], &v[1], Padding::Zero(1), 1)))),
        ("conv1d reflect stride 2", vec![conv_x.clone(), conv_w.clone()], Box::new(move |g, v| p(g, g.conv1d(&v[0], &v[1], Padding::Reflect(1), 2)))),
        ("conv1d causal", vec![conv_x.clone(), conv_w.clone()], Box::new(move |g, v| p(g, g.conv1d(&v[0], &v[1], Padding::Causal, 1)))),
        ("depthwise_causal_conv", vec![conv_x.clone(), dw_w], Box::new(move |g, v| p(g, g.depthwise_causal_conv(&v[0], &v[1])))),
        ("slice_cols", vec![m36.clone()], Box::new(move |g, v| p(g, g.slice_cols(&v[0], 1, 3)))),
        (
            "chunk_cols + concat_cols",
            vec![m36.clone(), m34.clone()],
            Box::new(move |g, v| {
                let parts = g.chunk_cols(&v[0], 3)?;
                p(g, g.concat_cols(&[parts[2].clone(), v[1].clone(), parts[0].clone()]))
            }),
        ),
        ("repeat_cols", vec![m34.clone()], Box::new(move |g, v| p(g, g.repeat_cols(&v[0], 3)))),
        ("repeat_rows", vec![row4], Box::new(move |g, v| p(g, g.repeat_rows(&v[0], 5)))),
        ("select_row", vec![m34.clone()], Box::new(move |g, v| p(g, g.select_row(&v[0], 2)))),
        ("resample_rows", vec![res_x.clone()], Box::new(move |g, v| p(g, g.resample_rows(&v[0], 8)))),
        ("resample_rows down", vec![res_x], Box::new(move |g, v| p(g, g.resample_rows(&v[0], 3)))),
        ("transpose", vec![m34.clone()], Box::new(move |g, v| p(g, g.transpose(&v[0])))),
        ("softmax_rows", vec![m36.clone()], Box::new(move |g, v| p(g, g.softmax_rows(&v[0])))),
        ("ssd_scan linear", scan_in.clone(), scan(ScanForm::Linear)),
        ("ssd_scan chunked", scan_in.clone(), scan(ScanForm::Chunked(4))),
        ("ssd_scan quadratic", scan_in, scan(ScanForm::Quadratic)),
        ("mean", vec![m34.clone()], Box::new(move |g, v| g.mean(&g.mul(&v[0], &v[0])?))),
        ("mse", vec![m34, m34b], Box::new(move |g, v| g.mse(&v[0], &v[1]))),
    ];
    cases
        .into_iter()
        .map(|(name, inputs, f)| {
            let errs = check_inputs(&inputs, f, DEFAULT_STEP)?;
            Ok((name, errs.into_iter().fold(0.0, f64::max)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_matches_finite_differences() {
        for seed in [0, 1] {
            for (name, e) in kernel_suite(seed).unwrap() {
                assert!(e < 1e-4, "{name} (seed {seed}): {e}");
            }
        }
    }

    #[test]
    fn relative_error_is_scale_free() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        let e = relative_error(&[100.0], &[101.0]);
        assert!((e - 1.0 / 101.0).abs() < 1e-15);
        // Both gradients vanish: the floor keeps it finite.
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
    }
}
