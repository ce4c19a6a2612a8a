//! DDPM noise schedule, closed-form forward noising and ancestral sampling.
//!
//! Steps are 1-based throughout (`n ∈ 1..=N`); vectors are stored 0-based.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA1: f64 = 1e-4;
pub const DEFAULT_BETA_N: f64 = 8e-2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub beta_tilde: Vec<f64>,
}

impl Default for Schedule {
    fn default() -> Self {
        Self::linear(DEFAULT_STEPS, DEFAULT_BETA1, DEFAULT_BETA_N).expect("default schedule is valid")
    }
}

impl Schedule {
    /// β linear between `beta1` and `beta_n` inclusive.
    pub fn linear(n: usize, beta1: f64, beta_n: f64) -> Result<Self> {
        if n < 2 {
            return Err(invalid!("schedule needs at least 2 steps, got {n}"));
        }
        if !(0.0 < beta1 && beta1 < beta_n && beta_n < 1.0) {
            return Err(invalid!("need 0 < beta1 < betaN < 1, got {beta1}, {beta_n}"));
        }
        let beta: Vec<f64> = (0..n)
            .map(|i| beta1 + (beta_n - beta1) * i as f64 / (n - 1) as f64)
            .collect();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(n);
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let beta_tilde = (0..n)
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
                (1.0 - prev) / (1.0 - alpha_bar[i]) * beta[i]
            })
            .collect();
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
            beta_tilde,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check_step(&self, n: usize) -> Result<usize> {
        if n == 0 || n > self.steps() {
            return Err(invalid!("step {n} outside 1..={}", self.steps()));
        }
        Ok(n - 1)
    }

    /// `√ᾱⁿ·y0 + √(1−ᾱⁿ)·ε`.
    pub fn forward_noise(&self, y0: &Tensor, n: usize, eps: &Tensor) -> Result<Tensor> {
        let i = self.check_step(n)?;
        if y0.shape() != eps.shape() {
            return Err(shape_err!("y0 {:?} vs noise {:?}", y0.shape(), eps.shape()));
        }
        let (a, b) = (self.alpha_bar[i].sqrt(), (1.0 - self.alpha_bar[i]).sqrt());
        let data = y0.data().iter().zip(eps.data()).map(|(y, e)| a * y + b * e).collect();
        Tensor::new(y0.shape(), data)
    }

    /// The noise that relates `yn` to `y0` at step `n`.
    pub fn implied_noise(&self, yn: &Tensor, y0: &Tensor, n: usize) -> Result<Tensor> {
        let i = self.check_step(n)?;
        let (a, b) = (self.alpha_bar[i].sqrt(), (1.0 - self.alpha_bar[i]).sqrt());
        let data = yn.data().iter().zip(y0.data()).map(|(y, x)| (y - a * x) / b).collect();
        Tensor::new(yn.shape(), data)
    }

    /// Reverse-step mean `(yⁿ − βⁿ/√(1−ᾱⁿ)·ε̂) / √αⁿ`.
    pub fn posterior_mean(&self, yn: &Tensor, eps_hat: &Tensor, n: usize) -> Result<Tensor> {
        let i = self.check_step(n)?;
        if yn.shape() != eps_hat.shape() {
            return Err(shape_err!("state {:?} vs prediction {:?}", yn.shape(), eps_hat.shape()));
        }
        let coef = self.beta[i] / (1.0 - self.alpha_bar[i]).sqrt();
        let inv = 1.0 / self.alpha[i].sqrt();
        let data = yn.data().iter().zip(eps_hat.data()).map(|(y, e)| inv * (y - coef * e)).collect();
        Tensor::new(yn.shape(), data)
    }

    /// Standard deviation of the reverse step: √β̃ⁿ.
    pub fn sigma(&self, n: usize) -> Result<f64> {
        Ok(self.beta_tilde[self.check_step(n)?].sqrt())
    }
}

pub fn gaussian<R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor {
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

/// Anything that predicts the noise in `yⁿ` at step `n`.
pub trait NoisePredictor {
    fn predict(&mut self, yn: &Tensor, n: usize) -> Result<Tensor>;
}

impl<F: FnMut(&Tensor, usize) -> Result<Tensor>> NoisePredictor for F {
    fn predict(&mut self, yn: &Tensor, n: usize) -> Result<Tensor> {
        self(yn, n)
    }
}

/// Knows the clean target and returns exactly the noise separating the current state from it.
pub struct OraclePredictor<'a> {
    pub schedule: &'a Schedule,
    pub y0: Tensor,
}

impl NoisePredictor for OraclePredictor<'_> {
    fn predict(&mut self, yn: &Tensor, n: usize) -> Result<Tensor> {
        self.schedule.implied_noise(yn, &self.y0, n)
    }
}

/// Ancestral sampling from `N(0, I)` down to step 0.
pub fn sample<P, R>(schedule: &Schedule, predictor: &mut P, shape: &[usize], rng: &mut R) -> Result<Tensor>
where
    P: NoisePredictor + ?Sized,
    R: Rng + ?Sized,
{
    let mut y = gaussian(rng, shape);
    for n in (1..=schedule.steps()).rev() {
        let eps = predictor.predict(&y, n)?;
        let mut next = schedule.posterior_mean(&y, &eps, n)?;
        if n > 1 {
            let s = schedule.sigma(n)?;
            let z = gaussian(rng, shape);
            next.data_mut().iter_mut().zip(z.data()).for_each(|(v, z)| *v += s * z);
        }
        if let Err(Error::NonFinite(msg)) = next.ensure_finite("sample") {
            return Err(Error::NonFinite(format!("reverse step {n}: {msg}")));
        }
        y = next;
    }
    Ok(y)
}
