//! Gesture encoder (width-3 convolution into the model width) and pointwise decoder.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::graph::{Graph, Var};
use crate::kernels::Padding;
use crate::nn::{Conv1d, Linear};
use crate::params::ParamStore;

pub const ENCODER_KERNEL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub channels: usize,
    pub d_model: usize,
    #[serde(default)]
    pub decoder_bias: bool,
}

impl CodecConfig {
    pub fn param_count(&self) -> usize {
        Conv1d::param_count(ENCODER_KERNEL, self.channels, self.d_model, true)
            + Linear::param_count(self.d_model, self.channels, self.decoder_bias)
    }
}

#[derive(Debug, Clone)]
pub struct GestureCodec {
    pub cfg: CodecConfig,
    pub encoder: Conv1d,
    pub decoder: Linear,
}

impl GestureCodec {
    pub fn new(store: &mut ParamStore, name: &str, cfg: CodecConfig) -> Result<Self> {
        if cfg.channels == 0 || cfg.d_model == 0 {
            return Err(invalid!("codec widths must be positive"));
        }
        Ok(Self {
            cfg,
            encoder: Conv1d::new(
                store,
                &format!("{name}.encoder"),
                ENCODER_KERNEL,
                cfg.channels,
                cfg.d_model,
                Padding::Reflect(ENCODER_KERNEL / 2),
                true,
            ),
            decoder: Linear::new(store, &format!("{name}.decoder"), cfg.d_model, cfg.channels, cfg.decoder_bias),
        })
    }

    pub fn encode(&self, g: &Graph, store: &ParamStore, y: &Var) -> Result<Var> {
        if y.cols() != self.cfg.channels {
            return Err(invalid!("codec expects {} channels, got {}", self.cfg.channels, y.cols()));
        }
        y.value().ensure_finite("gesture input")?;
        self.encoder.forward(g, store, y)
    }

    pub fn decode(&self, g: &Graph, store: &ParamStore, h: &Var) -> Result<Var> {
        if h.cols() != self.cfg.d_model {
            return Err(invalid!("decoder expects width {}, got {}", self.cfg.d_model, h.cols()));
        }
        self.decoder.forward(g, store, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn codec(channels: usize, d: usize) -> (ParamStore, GestureCodec) {
        let mut s = ParamStore::new(1);
        let c = GestureCodec::new(&mut s, "codec", CodecConfig { channels, d_model: d, decoder_bias: false }).unwrap();
        (s, c)
    }

    fn gestures(t: usize, c: usize) -> Tensor {
        Tensor::new(&[t, c], (0..t * c).map(|i| (i as f64 * 0.29).cos()).collect()).unwrap()
    }

    #[test]
    fn center_tap_encoder_is_per_frame_projection() {
        let (mut s, c) = codec(3, 4);
        let w = Tensor::new(&[3, 4], (0..12).map(|i| i as f64 * 0.1 - 0.5).collect()).unwrap();
        c.encoder.set_center_tap(&mut s, &w).unwrap();
        let g = Graph::inference();
        let y = gestures(6, 3);
        let h = c.encode(&g, &s, &g.constant(y.clone())).unwrap();
        let expect = crate::kernels::matmul(&y, &w).unwrap();
        assert!(h.value().max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn encoder_window_is_three_frames() {
        let (s, c) = codec(5, 4);
        let g = Graph::inference();
        let y = gestures(9, 5);
        let base = c.encode(&g, &s, &g.constant(y.clone())).unwrap();
        assert_eq!(base.rows(), 9);
        let t = 4;
        let mut yp = y.clone();
        yp.data_mut()[t * 5 + 2] += 1.0;
        let h = c.encode(&g, &s, &g.constant(yp)).unwrap();
        for r in 0..9 {
            let changed = h.value().row(r) != base.value().row(r);
            assert_eq!(changed, (t - 1..=t + 1).contains(&r), "frame {r}");
        }
    }

    #[test]
    fn decoder_is_frame_local_and_bias_free() {
        let (s, c) = codec(183, 8);
        let g = Graph::inference();
        let z = c.decode(&g, &s, &g.constant(Tensor::zeros(&[5, 8]))).unwrap();
        assert_eq!(z.shape(), &[5, 183]);
        assert!(z.data().iter().all(|&v| v == 0.0));
        let h = gestures(5, 8);
        let base = c.decode(&g, &s, &g.constant(h.clone())).unwrap();
        let mut hp = h.clone();
        hp.data_mut()[2 * 8 + 3] += 1.0;
        let y = c.decode(&g, &s, &g.constant(hp)).unwrap();
        for r in 0..5 {
            assert_eq!(y.value().row(r) != base.value().row(r), r == 2);
        }
    }

    #[test]
    fn channel_round_trip_for_any_joint_count() {
        for j in [1, 4, 59] {
            let ch = crate::clip::gesture_channels(j);
            let (s, c) = codec(ch, 6);
            let g = Graph::inference();
            let h = c.encode(&g, &s, &g.constant(gestures(4, ch))).unwrap();
            assert_eq!(c.decode(&g, &s, &h).unwrap().cols(), ch);
            assert_eq!(s.count(), c.cfg.param_count());
        }
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let (s, c) = codec(3, 2);
        let g = Graph::inference();
        let mut y = gestures(4, 3);
        y.data_mut()[5] = f64::NAN;
        assert!(c.encode(&g, &s, &g.constant(y)).is_err());
    }
}
