//! Forward and adjoint kernels on plain row-major buffers.
//!
//! The autodiff graph and the tape-free inference paths both call into
//! these; nothing here allocates more than its output.

use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;

/// Matrix product of row-major `a` (m×k) and `b` (k×n).
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2();
    let (k2, n) = b.dims2();
    if k != k2 {
        return Err(shape_err!("matmul inner dims {m}x{k} · {k2}x{n}"));
    }
    let out = matmul_raw(a.data(), b.data(), m, k, n);
    Tensor::new(&[m, n], out)
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a · bᵀ` for a (m×k), b (n×k).
pub(crate) fn matmul_bt_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `aᵀ · b` for a (m×k), b (m×n), giving k×n.
pub(crate) fn matmul_at_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Boundary handling for 1-D convolution along time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Symmetric zero padding of the given width on both sides.
    Zero(usize),
    /// Mirror padding (edge sample not repeated) of the given width; pads
    /// longer than the signal reflect repeatedly.
    Reflect(usize),
    /// Left zero padding of `K − 1`, so output t sees inputs ≤ t only.
    Causal,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub t_in: usize,
    pub t_out: usize,
    pub k: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    pub left: usize,
    pub padding: Padding,
}

impl ConvGeom {
    pub fn new(t_in: usize, k: usize, c_in: usize, c_out: usize, padding: Padding, stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(invalid!("conv1d stride must be ≥ 1"));
        }
        if k == 0 {
            return Err(invalid!("conv1d kernel size must be ≥ 1"));
        }
        let (left, padded) = match padding {
            Padding::Zero(p) | Padding::Reflect(p) => (p, t_in + 2 * p),
            Padding::Causal => {
                if stride != 1 {
                    return Err(invalid!("causal conv1d requires stride 1"));
                }
                (k - 1, t_in + k - 1)
            }
        };
        if k > padded {
            return Err(invalid!("kernel size {k} exceeds padded length {padded}"));
        }
        Ok(Self {
            t_in,
            t_out: (padded - k) / stride + 1,
            k,
            c_in,
            c_out,
            stride,
            left,
            padding,
        })
    }

    /// Input row feeding output row `t` at tap `j`, or `None` for a zero pad.
    #[inline]
    pub fn source(&self, t: usize, j: usize) -> Option<usize> {
        let pos = (t * self.stride + j) as isize - self.left as isize;
        let n = self.t_in as isize;
        match self.padding {
            Padding::Zero(_) | Padding::Causal => (0..n).contains(&pos).then_some(pos as usize),
            Padding::Reflect(_) => Some(reflect_index(pos, self.t_in)),
        }
    }
}

pub(crate) fn reflect_index(pos: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = pos.rem_euclid(period);
    if m < len as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// 1-D convolution over time: x (T×C_in), kernel (K×C_in×C_out).
pub fn conv1d(x: &Tensor, kernel: &Tensor, padding: Padding, stride: usize) -> Result<Tensor> {
    let (t_in, c_in) = x.dims2();
    let (k, kc_in, c_out) = kernel_dims(kernel)?;
    if kc_in != c_in {
        return Err(shape_err!("conv1d channels: input {c_in}, kernel {kc_in}"));
    }
    let geom = ConvGeom::new(t_in, k, c_in, c_out, padding, stride)?;
    let out = conv1d_raw(x.data(), kernel.data(), &geom);
    Tensor::new(&[geom.t_out, c_out], out)
}

pub(crate) fn kernel_dims(kernel: &Tensor) -> Result<(usize, usize, usize)> {
    match kernel.shape() {
        [k, ci, co] => Ok((*k, *ci, *co)),
        s => Err(shape_err!("conv kernel must be rank 3 (K×C_in×C_out), got {s:?}")),
    }
}

pub(crate) fn conv1d_raw(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut out = vec![0.0; g.t_out * g.c_out];
    for t in 0..g.t_out {
        let orow = &mut out[t * g.c_out..(t + 1) * g.c_out];
        for j in 0..g.k {
            let Some(src) = g.source(t, j) else { continue };
            let xrow = &x[src * g.c_in..(src + 1) * g.c_in];
            let wk = &w[j * g.c_in * g.c_out..(j + 1) * g.c_in * g.c_out];
            for (ci, &xv) in xrow.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                let wrow = &wk[ci * g.c_out..(ci + 1) * g.c_out];
                for (o, &wv) in orow.iter_mut().zip(wrow) {
                    *o += xv * wv;
                }
            }
        }
    }
    out
}

/// Adjoints of [`conv1d_raw`] with respect to input and kernel.
pub(crate) fn conv1d_backward_raw(x: &[f64], w: &[f64], dy: &[f64], g: &ConvGeom) -> (Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; g.t_in * g.c_in];
    let mut dw = vec![0.0; g.k * g.c_in * g.c_out];
    for t in 0..g.t_out {
        let dyrow = &dy[t * g.c_out..(t + 1) * g.c_out];
        for j in 0..g.k {
            let Some(src) = g.source(t, j) else { continue };
            let base = j * g.c_in * g.c_out;
            for ci in 0..g.c_in {
                let wrow = &w[base + ci * g.c_out..base + (ci + 1) * g.c_out];
                let xv = x[src * g.c_in + ci];
                let dwrow = &mut dw[base + ci * g.c_out..base + (ci + 1) * g.c_out];
                let mut acc = 0.0;
                for ((dwv, &wv), &d) in dwrow.iter_mut().zip(wrow).zip(dyrow) {
                    acc += wv * d;
                    *dwv += xv * d;
                }
                dx[src * g.c_in + ci] += acc;
            }
        }
    }
    (dx, dw)
}

/// Depthwise causal convolution: x (T×C), kernel (K×C); y_t = Σ_j w_j ⊙ x_{t−K+1+j}.
pub(crate) fn depthwise_causal_raw(x: &[f64], w: &[f64], t_len: usize, c: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; t_len * c];
    for t in 0..t_len {
        let orow = &mut out[t * c..(t + 1) * c];
        for j in 0..k {
            let Some(src) = (t + j + 1).checked_sub(k) else { continue };
            let xrow = &x[src * c..(src + 1) * c];
            let wrow = &w[j * c..(j + 1) * c];
            for ((o, &xv), &wv) in orow.iter_mut().zip(xrow).zip(wrow) {
                *o += xv * wv;
            }
        }
    }
    out
}

pub(crate) fn depthwise_causal_backward_raw(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    t_len: usize,
    c: usize,
    k: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; t_len * c];
    let mut dw = vec![0.0; k * c];
    for t in 0..t_len {
        let dyrow = &dy[t * c..(t + 1) * c];
        for j in 0..k {
            let Some(src) = (t + j + 1).checked_sub(k) else { continue };
            for ch in 0..c {
                dx[src * c + ch] += w[j * c + ch] * dyrow[ch];
                dw[j * c + ch] += x[src * c + ch] * dyrow[ch];
            }
        }
    }
    (dx, dw)
}

/// Row-wise normalization to zero mean and unit variance, without affine.
pub fn layer_norm(x: &Tensor, eps: f64) -> Tensor {
    let (rows, cols) = x.dims2();
    let (out, _) = layer_norm_raw(x.data(), rows, cols, eps);
    Tensor::new(x.shape(), out).expect("same shape")
}

/// Returns the normalized rows and the per-row reciprocal std.
pub(crate) fn layer_norm_raw(x: &[f64], rows: usize, cols: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; rows * cols];
    let mut rstd = vec![0.0; rows];
    let n = cols as f64;
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let rs = 1.0 / (var + eps).sqrt();
        rstd[r] = rs;
        for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *o = (v - mean) * rs;
        }
    }
    (out, rstd)
}

pub(crate) fn layer_norm_backward_raw(y: &[f64], rstd: &[f64], dy: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut dx = vec![0.0; rows * cols];
    let n = cols as f64;
    for r in 0..rows {
        let yr = &y[r * cols..(r + 1) * cols];
        let dyr = &dy[r * cols..(r + 1) * cols];
        let mean_dy = dyr.iter().sum::<f64>() / n;
        let mean_dy_y = dyr.iter().zip(yr).map(|(d, v)| d * v).sum::<f64>() / n;
        for c in 0..cols {
            dx[r * cols + c] = rstd[r] * (dyr[c] - mean_dy - yr[c] * mean_dy_y);
        }
    }
    dx
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub(crate) fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Row-wise softmax.
pub(crate) fn softmax_rows_raw(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let orow = &mut out[r * cols..(r + 1) * cols];
        let mut sum = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        orow.iter_mut().for_each(|o| *o /= sum);
    }
    out
}

/// Linear time interpolation of `rows_in` rows onto `rows_out` rows with
/// endpoints aligned. Returns, per output row, the two source rows and the
/// weight of the second.
pub(crate) fn interp_plan(rows_in: usize, rows_out: usize) -> Vec<(usize, usize, f64)> {
    (0..rows_out)
        .map(|i| {
            if rows_in == 1 || rows_out == 1 {
                return (0, 0, 0.0);
            }
            let pos = i as f64 * (rows_in - 1) as f64 / (rows_out - 1) as f64;
            let lo = (pos.floor() as usize).min(rows_in - 1);
            let hi = (lo + 1).min(rows_in - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}
