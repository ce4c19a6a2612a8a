//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op evaluates eagerly. When the graph is recording and at least one
//! input requires a gradient, the op is appended to the tape together with
//! the inputs its adjoint needs. Nodes are appended in evaluation order, so
//! walking the tape backwards is a valid reverse topological order.
//!
//! A non-recording graph (`Graph::inference`) records nothing: intermediate
//! values are freed as soon as the last `Var` holding them is dropped.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{invalid, shape_err, Error, Result};
use crate::kernels::{self, ConvGeom, Padding};
use crate::params::{ParamId, ParamStore};
use crate::ssd::{self, ScanForm, SsdParams};
use crate::tensor::Tensor;

/// A value produced on a [`Graph`]. Cheap to clone.
#[derive(Clone, Debug)]
pub struct Var {
    node: Option<NodeRef>,
    value: Rc<Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct NodeRef {
    generation: u64,
    index: usize,
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn dims2(&self) -> (usize, usize) {
        self.value.dims2()
    }

    pub fn rows(&self) -> usize {
        self.value.rows()
    }

    pub fn cols(&self) -> usize {
        self.value.cols()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn data(&self) -> &[f64] {
        self.value.data()
    }

    pub fn to_tensor(&self) -> Tensor {
        let mut t = (*self.value).clone();
        t.grad = None;
        t
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Silu(Var),
    Softplus(Var),
    Exp(Var),
    LayerNorm { x: Var, rstd: Vec<f64> },
    Conv1d { x: Var, w: Var, geom: ConvGeom },
    DepthwiseCausal { x: Var, w: Var },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    RepeatCols { x: Var, times: usize },
    RepeatRows { x: Var },
    SelectRow { x: Var, row: usize },
    ResampleRows { x: Var },
    Transpose(Var),
    SoftmaxRows(Var),
    Scan { v: Var, a: Var, b: Var, c: Var, heads: usize },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Rc<Tensor>,
}

static NEXT_GENERATION: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(1);

fn fresh_generation() -> u64 {
    NEXT_GENERATION.fetch_add(1, std::sync::atomic::Ordering::Relaxed)
}

/// The computation tape.
#[derive(Debug)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    recording: bool,
    consumed: Cell<bool>,
    generation: Cell<u64>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    generation: u64,
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    pub fn get(&self, v: &Var) -> Option<&[f64]> {
        let n = v.node?;
        if n.generation != self.generation {
            return None;
        }
        self.grads[n.index].as_deref()
    }

    /// Gradient of a parameter, summed over every leaf that referenced it.
    pub fn param(&self, id: ParamId) -> Option<Vec<f64>> {
        let mut out: Option<Vec<f64>> = None;
        for &(pid, idx) in &self.params {
            if pid != id {
                continue;
            }
            if let Some(g) = &self.grads[idx] {
                match &mut out {
                    Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                    None => out = Some(g.clone()),
                }
            }
        }
        out
    }

    /// Adds every parameter gradient into the store's `grad` slots.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(pid, idx) in &self.params {
            if let Some(g) = &self.grads[idx] {
                store.tensor_mut(pid).accumulate_grad(g);
            }
        }
    }
}

impl Graph {
    /// A recording graph for training and gradient checks.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: true,
            consumed: Cell::new(false),
            generation: Cell::new(fresh_generation()),
        }
    }

    /// A graph that never records; parameters enter as constants.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Clears the tape; vars created before the reset become constants to
    /// any later backward pass.
    pub fn reset(&self) {
        self.nodes.borrow_mut().clear();
        self.consumed.set(false);
        self.generation.set(fresh_generation());
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var {
        Var {
            node: None,
            value: Rc::new(t),
        }
    }

    /// A differentiable input (gradient available after backward).
    pub fn leaf(&self, t: Tensor) -> Var {
        let value = Rc::new(t);
        if !self.recording {
            return Var { node: None, value };
        }
        self.push_node(Op::Leaf, value)
    }

    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        let value = store.shared(id);
        if !self.recording || store.is_frozen(id) {
            return Var { node: None, value };
        }
        self.push_node(Op::Param(id), value)
    }

    fn push_node(&self, op: Op, value: Rc<Tensor>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let index = nodes.len();
        nodes.push(Node {
            op,
            value: Rc::clone(&value),
        });
        Var {
            node: Some(NodeRef {
                generation: self.generation.get(),
                index,
            }),
            value,
        }
    }

    fn live(&self, v: &Var) -> bool {
        matches!(v.node, Some(n) if n.generation == self.generation.get())
    }

    /// Wraps a freshly computed value; records `op` when any input is live.
    fn emit(&self, inputs: &[&Var], shape: &[usize], data: Vec<f64>, op: impl FnOnce() -> Op) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        t.ensure_finite("kernel output")?;
        let value = Rc::new(t);
        if self.recording && inputs.iter().any(|v| self.live(v)) {
            Ok(self.push_node(op(), value))
        } else {
            Ok(Var { node: None, value })
        }
    }

    pub fn matmul(&self, a: &Var, b: &Var) -> Result<Var> {
        let (m, k) = a.dims2();
        let (k2, n) = b.dims2();
        if k != k2 {
            return Err(shape_err!("matmul inner dims {m}x{k} · {k2}x{n}"));
        }
        let out = kernels::matmul_raw(a.data(), b.data(), m, k, n);
        self.emit(&[a, b], &[m, n], out, || Op::MatMul(a.clone(), b.clone()))
    }

    fn same_shape(a: &Var, b: &Var, what: &str) -> Result<()> {
        if a.dims2() != b.dims2() {
            return Err(shape_err!("{what}: {:?} vs {:?}", a.shape(), b.shape()));
        }
        Ok(())
    }

    pub fn add(&self, a: &Var, b: &Var) -> Result<Var> {
        Self::same_shape(a, b, "add")?;
        let out = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        self.emit(&[a, b], &dims(a), out, || Op::Add(a.clone(), b.clone()))
    }

    pub fn sub(&self, a: &Var, b: &Var) -> Result<Var> {
        Self::same_shape(a, b, "sub")?;
        let out = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        self.emit(&[a, b], &dims(a), out, || Op::Sub(a.clone(), b.clone()))
    }

    pub fn mul(&self, a: &Var, b: &Var) -> Result<Var> {
        Self::same_shape(a, b, "mul")?;
        let out = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        self.emit(&[a, b], &dims(a), out, || Op::Mul(a.clone(), b.clone()))
    }

    /// Adds a row vector (numel = cols) to every row.
    pub fn add_row(&self, a: &Var, row: &Var) -> Result<Var> {
        let (r, c) = a.dims2();
        if row.value.numel() != c {
            return Err(shape_err!("add_row: {c} columns vs row of {}", row.value.numel()));
        }
        let rv = row.data();
        let mut out = a.data().to_vec();
        for i in 0..r {
            out[i * c..(i + 1) * c].iter_mut().zip(rv).for_each(|(o, b)| *o += b);
        }
        self.emit(&[a, row], &[r, c], out, || Op::AddRow(a.clone(), row.clone()))
    }

    /// Multiplies every row elementwise by a row vector.
    pub fn mul_row(&self, a: &Var, row: &Var) -> Result<Var> {
        let (r, c) = a.dims2();
        if row.value.numel() != c {
            return Err(shape_err!("mul_row: {c} columns vs row of {}", row.value.numel()));
        }
        let rv = row.data();
        let mut out = a.data().to_vec();
        for i in 0..r {
            out[i * c..(i + 1) * c].iter_mut().zip(rv).for_each(|(o, b)| *o *= b);
        }
        self.emit(&[a, row], &[r, c], out, || Op::MulRow(a.clone(), row.clone()))
    }

    pub fn scale(&self, a: &Var, s: f64) -> Result<Var> {
        let out = a.data().iter().map(|x| x * s).collect();
        self.emit(&[a], &dims(a), out, || Op::Scale(a.clone(), s))
    }

    pub fn add_scalar(&self, a: &Var, s: f64) -> Result<Var> {
        let out = a.data().iter().map(|x| x + s).collect();
        self.emit(&[a], &dims(a), out, || Op::AddScalar(a.clone()))
    }

    pub fn silu(&self, a: &Var) -> Result<Var> {
        let out = a.data().iter().map(|&x| kernels::silu(x)).collect();
        self.emit(&[a], &dims(a), out, || Op::Silu(a.clone()))
    }

    pub fn softplus(&self, a: &Var) -> Result<Var> {
        let out = a.data().iter().map(|&x| kernels::softplus(x)).collect();
        self.emit(&[a], &dims(a), out, || Op::Softplus(a.clone()))
    }

    pub fn exp(&self, a: &Var) -> Result<Var> {
        let out = a.data().iter().map(|x| x.exp()).collect();
        self.emit(&[a], &dims(a), out, || Op::Exp(a.clone()))
    }

    /// Row-wise layer normalization without affine parameters.
    pub fn layer_norm(&self, x: &Var, eps: f64) -> Result<Var> {
        let (r, c) = x.dims2();
        let (out, rstd) = kernels::layer_norm_raw(x.data(), r, c, eps);
        self.emit(&[x], &[r, c], out, || Op::LayerNorm { x: x.clone(), rstd })
    }

    /// Convolution over time: x (T×C_in), w (K×C_in×C_out).
    pub fn conv1d(&self, x: &Var, w: &Var, padding: Padding, stride: usize) -> Result<Var> {
        let (t_in, c_in) = x.dims2();
        let (k, kc, c_out) = kernels::kernel_dims(w.value())?;
        if kc != c_in {
            return Err(shape_err!("conv1d channels: input {c_in}, kernel {kc}"));
        }
        let geom = ConvGeom::new(t_in, k, c_in, c_out, padding, stride)?;
        let out = kernels::conv1d_raw(x.data(), w.data(), &geom);
        self.emit(&[x, w], &[geom.t_out, c_out], out, || Op::Conv1d {
            x: x.clone(),
            w: w.clone(),
            geom,
        })
    }

    /// Per-channel causal convolution: x (T×C), w (K×C).
    pub fn depthwise_causal_conv(&self, x: &Var, w: &Var) -> Result<Var> {
        let (t, c) = x.dims2();
        let (k, wc) = w.dims2();
        if wc != c {
            return Err(shape_err!("depthwise conv: {c} channels vs kernel width {wc}"));
        }
        let out = kernels::depthwise_causal_raw(x.data(), w.data(), t, c, k);
        self.emit(&[x, w], &[t, c], out, || Op::DepthwiseCausal { x: x.clone(), w: w.clone() })
    }

    pub fn slice_cols(&self, x: &Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = x.dims2();
        if len == 0 || start + len > c {
            return Err(shape_err!("slice_cols {start}..{} of {c}", start + len));
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&x.data()[i * c + start..i * c + start + len]);
        }
        self.emit(&[x], &[r, len], out, || Op::SliceCols { x: x.clone(), start })
    }

    /// Splits columns into `n` equal chunks.
    pub fn chunk_cols(&self, x: &Var, n: usize) -> Result<Vec<Var>> {
        let c = x.cols();
        if n == 0 || c % n != 0 {
            return Err(shape_err!("cannot split {c} columns into {n} chunks"));
        }
        let w = c / n;
        (0..n).map(|i| self.slice_cols(x, i * w, w)).collect()
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let r = parts.first().ok_or_else(|| invalid!("concat of nothing"))?.rows();
        if parts.iter().any(|p| p.rows() != r) {
            return Err(shape_err!("concat_cols: row counts differ"));
        }
        let total: usize = parts.iter().map(Var::cols).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                out.extend_from_slice(p.value.row(i));
            }
        }
        let refs: Vec<&Var> = parts.iter().collect();
        self.emit(&refs, &[r, total], out, || Op::ConcatCols(parts.to_vec()))
    }

    /// Repeats each column `times` times in place: [a, b] → [a, a, b, b].
    pub fn repeat_cols(&self, x: &Var, times: usize) -> Result<Var> {
        let (r, c) = x.dims2();
        if times == 0 {
            return Err(invalid!("repeat_cols by zero"));
        }
        let mut out = Vec::with_capacity(r * c * times);
        for &v in x.data() {
            out.extend(std::iter::repeat_n(v, times));
        }
        self.emit(&[x], &[r, c * times], out, || Op::RepeatCols { x: x.clone(), times })
    }

    /// Broadcasts a single row to `rows` rows.
    pub fn repeat_rows(&self, x: &Var, rows: usize) -> Result<Var> {
        if x.rows() != 1 || rows == 0 {
            return Err(shape_err!("repeat_rows needs one row, got {:?}", x.shape()));
        }
        let c = x.cols();
        let out = x.data().repeat(rows);
        self.emit(&[x], &[rows, c], out, || Op::RepeatRows { x: x.clone() })
    }

    pub fn select_row(&self, x: &Var, row: usize) -> Result<Var> {
        if row >= x.rows() {
            return Err(shape_err!("row {row} of {}", x.rows()));
        }
        let out = x.value.row(row).to_vec();
        self.emit(&[x], &[1, x.cols()], out, || Op::SelectRow { x: x.clone(), row })
    }

    /// Linear interpolation along rows to exactly `rows_out` rows, endpoints aligned.
    pub fn resample_rows(&self, x: &Var, rows_out: usize) -> Result<Var> {
        if rows_out == 0 {
            return Err(invalid!("resample to zero rows"));
        }
        let (r, c) = x.dims2();
        let mut out = vec![0.0; rows_out * c];
        for (i, (lo, hi, w)) in kernels::interp_plan(r, rows_out).into_iter().enumerate() {
            let (a, b) = (x.value.row(lo), x.value.row(hi));
            for (j, o) in out[i * c..(i + 1) * c].iter_mut().enumerate() {
                *o = (1.0 - w) * a[j] + w * b[j];
            }
        }
        self.emit(&[x], &[rows_out, c], out, || Op::ResampleRows { x: x.clone() })
    }

    pub fn transpose(&self, x: &Var) -> Result<Var> {
        let (r, c) = x.dims2();
        let out = transpose_raw(x.data(), r, c);
        self.emit(&[x], &[c, r], out, || Op::Transpose(x.clone()))
    }

    pub fn softmax_rows(&self, x: &Var) -> Result<Var> {
        let (r, c) = x.dims2();
        let out = kernels::softmax_rows_raw(x.data(), r, c);
        self.emit(&[x], &[r, c], out, || Op::SoftmaxRows(x.clone()))
    }

    /// Multi-head scalar-decay SSM.
    ///
    /// `v`: T×(H·P), head h owning columns h·P..(h+1)·P; `a`: T×H decays in
    /// [0, 1]; `b`, `c`: T×S shared across heads.
    pub fn ssd_scan(&self, v: &Var, a: &Var, b: &Var, c: &Var, form: ScanForm) -> Result<Var> {
        let (t, hp) = v.dims2();
        let (ta, heads) = a.dims2();
        let (tb, s) = b.dims2();
        if ta != t || tb != t || c.dims2() != (t, s) {
            return Err(shape_err!(
                "ssd_scan: v {:?}, a {:?}, b {:?}, c {:?}",
                v.shape(),
                a.shape(),
                b.shape(),
                c.shape()
            ));
        }
        if heads == 0 || hp % heads != 0 {
            return Err(shape_err!("ssd_scan: {hp} channels not divisible by {heads} heads"));
        }
        let p = hp / heads;
        let mut out = vec![0.0; t * hp];
        for h in 0..heads {
            let params = head_params(a, b, c, h, heads, s)?;
            let vh = gather_head(v.data(), t, hp, h * p, p);
            let yh = form.run(&params, &vh, p)?;
            scatter_head(&mut out, &yh, t, hp, h * p, p);
        }
        self.emit(&[v, a, b, c], &[t, hp], out, || Op::Scan {
            v: v.clone(),
            a: a.clone(),
            b: b.clone(),
            c: c.clone(),
            heads,
        })
    }

    pub fn sum(&self, x: &Var) -> Result<Var> {
        let s = x.data().iter().sum();
        self.emit(&[x], &[1], vec![s], || Op::Sum(x.clone()))
    }

    pub fn mean(&self, x: &Var) -> Result<Var> {
        let n = x.value.numel() as f64;
        let s = self.sum(x)?;
        self.scale(&s, 1.0 / n)
    }

    /// Mean of squared differences.
    pub fn mse(&self, a: &Var, b: &Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(&d, &d)?;
        self.mean(&sq)
    }

    /// Runs the reverse pass from a scalar `loss`. The tape may be consumed once.
    pub fn backward(&self, loss: &Var) -> Result<Gradients> {
        if !self.recording {
            return Err(Error::Tape("backward on a non-recording graph".into()));
        }
        if self.consumed.get() {
            return Err(Error::Tape("backward called twice without reset".into()));
        }
        if loss.value.numel() != 1 {
            return Err(Error::Tape(format!("loss must be scalar, got shape {:?}", loss.shape())));
        }
        let generation = self.generation.get();
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        let Some(root) = loss.node.filter(|n| n.generation == generation) else {
            return Err(Error::Tape("loss does not depend on any recorded input".into()));
        };
        self.consumed.set(true);
        grads[root.index] = Some(vec![1.0]);
        let mut params = Vec::new();

        for idx in (0..=root.index).rev() {
            let node = &nodes[idx];
            if let Op::Param(pid) = node.op {
                params.push((pid, idx));
            }
            let Some(dy) = grads[idx].take() else { continue };
            backprop(&node.op, &node.value, &dy, &mut grads, generation)?;
            grads[idx] = Some(dy);
        }
        for idx in root.index + 1..nodes.len() {
            if let Op::Param(pid) = nodes[idx].op {
                params.push((pid, idx));
            }
        }
        Ok(Gradients {
            generation,
            grads,
            params,
        })
    }
}

fn dims(v: &Var) -> [usize; 2] {
    let (r, c) = v.dims2();
    [r, c]
}

fn transpose_raw(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

fn gather_head(x: &[f64], t: usize, width: usize, start: usize, p: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(t * p);
    for i in 0..t {
        out.extend_from_slice(&x[i * width + start..i * width + start + p]);
    }
    out
}

fn scatter_head(out: &mut [f64], src: &[f64], t: usize, width: usize, start: usize, p: usize) {
    for i in 0..t {
        out[i * width + start..i * width + start + p].copy_from_slice(&src[i * p..(i + 1) * p]);
    }
}

fn head_params(a: &Var, b: &Var, c: &Var, h: usize, heads: usize, s: usize) -> Result<SsdParams<f64>> {
    let t = a.rows();
    let ah: Vec<f64> = (0..t).map(|i| a.data()[i * heads + h]).collect();
    SsdParams::new(ah, b.data().to_vec(), c.data().to_vec(), s)
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: &Var, generation: u64, g: impl FnOnce() -> Vec<f64>) {
    let Some(n) = v.node else { return };
    if n.generation != generation {
        return;
    }
    let g = g();
    match &mut grads[n.index] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn backprop(op: &Op, out: &Tensor, dy: &[f64], grads: &mut [Option<Vec<f64>>], generation: u64) -> Result<()> {
    let mut acc = |v: &Var, g: &dyn Fn() -> Vec<f64>| accumulate(grads, v, generation, g);
    match op {
        Op::Leaf | Op::Param(_) => {}
        Op::MatMul(a, b) => {
            let (m, k) = a.dims2();
            let n = b.cols();
            acc(a, &|| kernels::matmul_bt_raw(dy, b.data(), m, n, k));
            acc(b, &|| kernels::matmul_at_raw(a.data(), dy, m, k, n));
        }
        Op::Add(a, b) => {
            acc(a, &|| dy.to_vec());
            acc(b, &|| dy.to_vec());
        }
        Op::Sub(a, b) => {
            acc(a, &|| dy.to_vec());
            acc(b, &|| dy.iter().map(|d| -d).collect());
        }
        Op::Mul(a, b) => {
            acc(a, &|| dy.iter().zip(b.data()).map(|(d, y)| d * y).collect());
            acc(b, &|| dy.iter().zip(a.data()).map(|(d, x)| d * x).collect());
        }
        Op::AddRow(a, row) => {
            acc(a, &|| dy.to_vec());
            acc(row, &|| col_sums(dy, row.value.numel()));
        }
        Op::MulRow(a, row) => {
            let c = row.value.numel();
            acc(a, &|| {
                dy.iter()
                    .enumerate()
                    .map(|(i, d)| d * row.data()[i % c])
                    .collect()
            });
            acc(row, &|| {
                let prod: Vec<f64> = dy.iter().zip(a.data()).map(|(d, x)| d * x).collect();
                col_sums(&prod, c)
            });
        }
        Op::Scale(a, s) => acc(a, &|| dy.iter().map(|d| d * s).collect()),
        Op::AddScalar(a) => acc(a, &|| dy.to_vec()),
        Op::Silu(a) => acc(a, &|| {
            dy.iter()
                .zip(a.data())
                .map(|(d, &x)| d * kernels::silu_grad(x))
                .collect()
        }),
        Op::Softplus(a) => acc(a, &|| {
            dy.iter()
                .zip(a.data())
                .map(|(d, &x)| d * kernels::sigmoid(x))
                .collect()
        }),
        Op::Exp(a) => acc(a, &|| dy.iter().zip(out.data()).map(|(d, y)| d * y).collect()),
        Op::LayerNorm { x, rstd } => {
            let (r, c) = x.dims2();
            acc(x, &|| kernels::layer_norm_backward_raw(out.data(), rstd, dy, r, c));
        }
        Op::Conv1d { x, w, geom } => {
            if x.requires_grad() || w.requires_grad() {
                let (dx, dw) = kernels::conv1d_backward_raw(x.data(), w.data(), dy, geom);
                acc(x, &|| dx.clone());
                acc(w, &|| dw.clone());
            }
        }
        Op::DepthwiseCausal { x, w } => {
            let (t, c) = x.dims2();
            let k = w.rows();
            let (dx, dw) = kernels::depthwise_causal_backward_raw(x.data(), w.data(), dy, t, c, k);
            acc(x, &|| dx.clone());
            acc(w, &|| dw.clone());
        }
        Op::SliceCols { x, start } => {
            let (r, c) = x.dims2();
            let len = dy.len() / r;
            acc(x, &|| {
                let mut g = vec![0.0; r * c];
                for i in 0..r {
                    g[i * c + start..i * c + start + len].copy_from_slice(&dy[i * len..(i + 1) * len]);
                }
                g
            });
        }
        Op::ConcatCols(parts) => {
            let r = out.rows();
            let total = out.cols();
            let mut offset = 0;
            for p in parts {
                let w = p.cols();
                acc(p, &|| gather_head(dy, r, total, offset, w));
                offset += w;
            }
        }
        Op::RepeatCols { x, times } => {
            acc(x, &|| dy.chunks(*times).map(|ch| ch.iter().sum()).collect());
        }
        Op::RepeatRows { x } => acc(x, &|| col_sums(dy, x.cols())),
        Op::SelectRow { x, row } => {
            let (r, c) = x.dims2();
            acc(x, &|| {
                let mut g = vec![0.0; r * c];
                g[row * c..(row + 1) * c].copy_from_slice(dy);
                g
            });
        }
        Op::ResampleRows { x } => {
            let (r, c) = x.dims2();
            let rows_out = out.rows();
            acc(x, &|| {
                let mut g = vec![0.0; r * c];
                for (i, (lo, hi, w)) in kernels::interp_plan(r, rows_out).into_iter().enumerate() {
                    for j in 0..c {
                        g[lo * c + j] += (1.0 - w) * dy[i * c + j];
                        g[hi * c + j] += w * dy[i * c + j];
                    }
                }
                g
            });
        }
        Op::Transpose(x) => {
            let (r, c) = x.dims2();
            acc(x, &|| transpose_raw(dy, c, r));
        }
        Op::SoftmaxRows(x) => {
            let (r, c) = x.dims2();
            acc(x, &|| {
                let y = out.data();
                let mut g = vec![0.0; r * c];
                for i in 0..r {
                    let yr = &y[i * c..(i + 1) * c];
                    let dr = &dy[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        g[i * c + j] = yr[j] * (dr[j] - dot);
                    }
                }
                g
            });
        }
        Op::Scan { v, a, b, c, heads } => {
            let (t, hp) = v.dims2();
            let s = b.cols();
            let p = hp / heads;
            let mut dv = vec![0.0; t * hp];
            let mut da = vec![0.0; t * heads];
            let mut db = vec![0.0; t * s];
            let mut dc = vec![0.0; t * s];
            for h in 0..*heads {
                let params = head_params(a, b, c, h, *heads, s)?;
                let vh = gather_head(v.data(), t, hp, h * p, p);
                let dyh = gather_head(dy, t, hp, h * p, p);
                let g = ssd::ssm_scan_backward(&params, &vh, p, &dyh);
                scatter_head(&mut dv, &g.dv, t, hp, h * p, p);
                for i in 0..t {
                    da[i * heads + h] = g.da[i];
                }
                db.iter_mut().zip(&g.db).for_each(|(x, y)| *x += y);
                dc.iter_mut().zip(&g.dc).for_each(|(x, y)| *x += y);
            }
            acc(v, &|| dv.clone());
            acc(a, &|| da.clone());
            acc(b, &|| db.clone());
            acc(c, &|| dc.clone());
        }
        Op::Sum(x) => {
            let d = dy[0];
            acc(x, &|| vec![d; x.value.numel()]);
        }
    }
    Ok(())
}

fn col_sums(x: &[f64], c: usize) -> Vec<f64> {
    let mut out = vec![0.0; c];
    for row in x.chunks(c) {
        out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let g = Graph::new();
        let x = g.leaf(Tensor::new(&[2, 2], vec![1., 2., 3., 4.]).unwrap());
        let loss = g.sum(&x).unwrap();
        let grads = g.backward(&loss).unwrap();
        assert_eq!(grads.get(&x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn square_sum_derivative() {
        let g = Graph::new();
        let x = g.leaf(Tensor::new(&[2], vec![1., 2.]).unwrap());
        let sq = g.mul(&x, &x).unwrap();
        let loss = g.sum(&sq).unwrap();
        let grads = g.backward(&loss).unwrap();
        assert_eq!(grads.get(&x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let g = Graph::new();
        let x = g.leaf(Tensor::ones(&[3]));
        let loss = g.sum(&x).unwrap();
        g.backward(&loss).unwrap();
        assert!(matches!(g.backward(&loss), Err(Error::Tape(_))));
        g.reset();
        let x = g.leaf(Tensor::ones(&[3]));
        let loss = g.sum(&x).unwrap();
        assert!(g.backward(&loss).is_ok());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let g = Graph::new();
        let x = g.leaf(Tensor::ones(&[3]));
        let y = g.scale(&x, 2.0).unwrap();
        assert!(g.backward(&y).is_err());
    }

    #[test]
    fn stale_vars_are_constants_after_reset() {
        let g = Graph::new();
        let old = g.leaf(Tensor::ones(&[2]));
        g.reset();
        let x = g.leaf(Tensor::ones(&[2]));
        let y = g.add(&x, &old).unwrap();
        let loss = g.sum(&y).unwrap();
        let grads = g.backward(&loss).unwrap();
        assert!(grads.get(&old).is_none());
        assert_eq!(grads.get(&x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn inference_graph_records_nothing() {
        let g = Graph::inference();
        let x = g.leaf(Tensor::ones(&[4, 4]));
        let y = g.matmul(&x, &x).unwrap();
        let _ = g.silu(&y).unwrap();
        assert!(g.is_empty());
        assert!(g.backward(&g.sum(&y).unwrap()).is_err());
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let g = Graph::new();
        let x = g.leaf(Tensor::filled(&[1], 1000.0));
        assert!(matches!(g.exp(&x), Err(Error::NonFinite(_))));
    }

    #[test]
    fn reused_input_accumulates() {
        let g = Graph::new();
        let x = g.leaf(Tensor::new(&[1, 2], vec![3.0, -1.0]).unwrap());
        let y = g.add(&x, &x).unwrap();
        let z = g.mul(&y, &x).unwrap();
        let loss = g.sum(&z).unwrap();
        let grads = g.backward(&loss).unwrap();
        // d/dx 2x² = 4x
        assert_eq!(grads.get(&x).unwrap(), &[12.0, -4.0]);
    }
}
