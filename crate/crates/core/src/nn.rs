//! Parameterized layers built from graph ops.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::kernels::Padding;
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        let weight = store.add(format!("{name}.weight"), &[d_in, d_out], Init::FanIn(d_in));
        let bias = bias.then(|| store.add(format!("{name}.bias"), &[d_out], Init::FanIn(d_in)));
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        let weight = store.add(format!("{name}.weight"), &[d_in, d_out], Init::Zeros);
        let bias = bias.then(|| store.add(format!("{name}.bias"), &[d_out], Init::Zeros));
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn param_count(d_in: usize, d_out: usize, bias: bool) -> usize {
        d_in * d_out + if bias { d_out } else { 0 }
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: &Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, &w)?;
        match self.bias {
            Some(b) => g.add_row(&y, &g.param(store, b)),
            None => Ok(y),
        }
    }
}

/// Two affine layers with SiLU between them.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, hidden: usize, d_out: usize) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), d_in, hidden, true),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, d_out, true),
        }
    }

    /// Output layer starts at exactly zero, so the MLP initially maps everything to 0.
    pub fn zero_output(store: &mut ParamStore, name: &str, d_in: usize, hidden: usize, d_out: usize) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), d_in, hidden, true),
            fc2: Linear::zeros(store, &format!("{name}.fc2"), hidden, d_out, true),
        }
    }

    pub fn param_count(d_in: usize, hidden: usize, d_out: usize) -> usize {
        Linear::param_count(d_in, hidden, true) + Linear::param_count(hidden, d_out, true)
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: &Var) -> Result<Var> {
        let h = self.fc1.forward(g, store, x)?;
        let h = g.silu(&h)?;
        self.fc2.forward(g, store, &h)
    }

    /// Sets weights so the MLP is the identity on `d` channels, using a 2d
    /// hidden layer and silu(x) − silu(−x) = x.
    pub fn set_identity(&self, store: &mut ParamStore) -> Result<()> {
        let d = self.fc1.d_in;
        assert_eq!(self.fc1.d_out, 2 * d, "identity needs hidden = 2·d_in");
        assert_eq!(self.fc2.d_out, d, "identity needs d_out = d_in");
        let mut w1 = Tensor::zeros(&[d, 2 * d]);
        let mut w2 = Tensor::zeros(&[2 * d, d]);
        for i in 0..d {
            w1.data_mut()[i * 2 * d + i] = 1.0;
            w1.data_mut()[i * 2 * d + d + i] = -1.0;
            w2.data_mut()[i * d + i] = 1.0;
            w2.data_mut()[(d + i) * d + i] = -1.0;
        }
        store.set(self.fc1.weight, w1)?;
        store.set(self.fc2.weight, w2)?;
        for b in [self.fc1.bias, self.fc2.bias].into_iter().flatten() {
            let shape = store.get(b).shape().to_vec();
            store.set(b, Tensor::zeros(&shape))?;
        }
        Ok(())
    }
}

/// Convolution over time with a K×C_in×C_out kernel.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub kernel: ParamId,
    pub bias: Option<ParamId>,
    pub k: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub padding: Padding,
}

impl Conv1d {
    pub fn new(store: &mut ParamStore, name: &str, k: usize, c_in: usize, c_out: usize, padding: Padding, bias: bool) -> Self {
        let fan_in = k * c_in;
        let kernel = store.add(format!("{name}.kernel"), &[k, c_in, c_out], Init::FanIn(fan_in));
        let bias = bias.then(|| store.add(format!("{name}.bias"), &[c_out], Init::FanIn(fan_in)));
        Self {
            kernel,
            bias,
            k,
            c_in,
            c_out,
            padding,
        }
    }

    pub fn param_count(k: usize, c_in: usize, c_out: usize, bias: bool) -> usize {
        k * c_in * c_out + if bias { c_out } else { 0 }
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: &Var) -> Result<Var> {
        let w = g.param(store, self.kernel);
        let y = g.conv1d(x, &w, self.padding, 1)?;
        match self.bias {
            Some(b) => g.add_row(&y, &g.param(store, b)),
            None => Ok(y),
        }
    }

    /// Center tap carries `center` (C_in×C_out), every other tap is zero, bias zero.
    pub fn set_center_tap(&self, store: &mut ParamStore, center: &Tensor) -> Result<()> {
        let mut w = Tensor::zeros(&[self.k, self.c_in, self.c_out]);
        let mid = self.k / 2;
        let block = self.c_in * self.c_out;
        w.data_mut()[mid * block..(mid + 1) * block].copy_from_slice(center.data());
        store.set(self.kernel, w)?;
        if let Some(b) = self.bias {
            store.set(b, Tensor::zeros(&[self.c_out]))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;

    #[test]
    fn zero_output_mlp_is_zero() {
        let mut s = ParamStore::new(1);
        let mlp = Mlp::zero_output(&mut s, "m", 3, 5, 4);
        let g = Graph::inference();
        let x = g.constant(Tensor::new(&[2, 3], vec![1., -2., 3., 0.5, 9., -7.]).unwrap());
        let y = mlp.forward(&g, &s, &x).unwrap();
        assert_eq!(y.shape(), &[2, 4]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_configured_mlp() {
        let mut s = ParamStore::new(2);
        let mlp = Mlp::new(&mut s, "m", 3, 6, 3);
        mlp.set_identity(&mut s).unwrap();
        let g = Graph::inference();
        let x = Tensor::new(&[2, 3], vec![1., -2., 3., 0.5, 9., -7.]).unwrap();
        let y = mlp.forward(&g, &s, &g.constant(x.clone())).unwrap();
        assert!(y.value().max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut s = ParamStore::new(3);
        let mlp = Mlp::new(&mut s, "m", 4, 6, 3);
        let x = Tensor::new(&[5, 4], (0..20).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let ids: Vec<_> = s.ids().collect();
        let errs = gradcheck::check_params(
            &s,
            &ids,
            |g, st| {
                let y = mlp.forward(g, st, &g.constant(x.clone()))?;
                gradcheck::probe_loss(g, &y, 9)
            },
            gradcheck::DEFAULT_STEP,
        )
        .unwrap();
        for (name, e) in errs {
            assert!(e < 1e-4, "{name}: {e}");
        }
        let errs = gradcheck::check_inputs(
            &[x.clone()],
            |g, v| {
                let y = mlp.forward(g, &s, &v[0])?;
                gradcheck::probe_loss(g, &y, 9)
            },
            gradcheck::DEFAULT_STEP,
        )
        .unwrap();
        assert!(errs[0] < 1e-4, "{errs:?}");
    }

    #[test]
    fn param_counts_agree_with_store() {
        let mut s = ParamStore::new(0);
        Mlp::new(&mut s, "m", 7, 11, 5);
        Conv1d::new(&mut s, "c", 3, 4, 6, Padding::Reflect(1), true);
        assert_eq!(s.count(), Mlp::param_count(7, 11, 5) + Conv1d::param_count(3, 4, 6, true));
    }
}
