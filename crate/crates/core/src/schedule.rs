//! Discrete noise schedule and the forward diffusion kernel.
//!
//! Timesteps are 1-based: `t = 1..=T` are noisy steps and `t = 0` denotes the
//! clean data, with `alpha_bar(0) == 1`.

use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Number of timesteps of the conventional DDPM schedule.
pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// A point of the forward chain: `x` in R^d at timestep `t` (`t = 0` is data).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPoint {
    pub x: Vec<f64>,
    pub t: usize,
}

/// Immutable table of `beta_t`, `alpha_t = 1 - beta_t` and the cumulative
/// product `alpha_bar_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear schedule from `beta_start` at `t = 1` to `beta_end` at `t = steps`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::EmptySchedule);
        }
        if !(beta_start <= beta_end) {
            return Err(Error::DecreasingBetas {
                start: beta_start,
                end: beta_end,
            });
        }
        let betas = if steps == 1 {
            alloc::vec![beta_start]
        } else {
            let span = (steps - 1) as f64;
            (0..steps)
                .map(|i| beta_start + (beta_end - beta_start) * (i as f64 / span))
                .collect()
        };
        Self::from_betas(betas)
    }

    /// The conventional 1000-step schedule with betas from 1e-4 to 0.02.
    pub fn ddpm_default() -> Self {
        Self::linear(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule is valid")
    }

    /// Schedule from an explicit beta table, `betas[0]` being `beta_1`.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::EmptySchedule);
        }
        let mut alphas = Vec::with_capacity(betas.len());
        for (i, &beta) in betas.iter().enumerate() {
            let alpha = 1.0 - beta;
            if !(beta > 0.0 && beta < 1.0) || !(alpha < 1.0) {
                return Err(Error::BetaOutOfRange {
                    t: i + 1,
                    value: beta,
                });
            }
            alphas.push(alpha);
        }

        // Double-double accumulation of the running product.
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let (mut hi, mut lo) = (1.0_f64, 0.0_f64);
        for (i, &alpha) in alphas.iter().enumerate() {
            let (p, e) = two_product(hi, alpha);
            let (s, r) = fast_two_sum(p, e + lo * alpha);
            hi = s;
            lo = r;
            if !(hi > 0.0) {
                return Err(Error::BetaOutOfRange {
                    t: i + 1,
                    value: betas[i],
                });
            }
            alpha_bars.push(hi);
        }

        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    /// `T`, the number of noisy timesteps.
    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    /// `alpha_bar_1..=alpha_bar_T`.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `beta_t` for `t` in `1..=T`.
    ///
    /// Panics when `t` is out of range, like slice indexing.
    pub fn beta(&self, t: usize) -> f64 {
        assert!(t >= 1, "beta is defined for t >= 1");
        self.betas[t - 1]
    }

    /// `alpha_t` for `t` in `1..=T`.
    pub fn alpha(&self, t: usize) -> f64 {
        assert!(t >= 1, "alpha is defined for t >= 1");
        self.alphas[t - 1]
    }

    /// `alpha_bar_t` for `t` in `0..=T`, with `alpha_bar_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Posterior variance of the forward chain,
    /// `(1 - alpha_bar_{t-1}) / (1 - alpha_bar_t) * beta_t`.
    pub fn beta_tilde(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t)) * self.beta(t)
    }

    /// Rejects timesteps that carry no noise or lie past `T`.
    pub fn check_noisy_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.num_steps() {
            return Err(Error::TimestepOutOfRange {
                t,
                max: self.num_steps(),
            });
        }
        if !(self.alpha_bar(t) < 1.0) {
            return Err(Error::DegenerateNoise { t });
        }
        Ok(())
    }

    /// `(sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t))` for a validated step.
    pub fn signal_noise(&self, t: usize) -> Result<(f64, f64)> {
        self.check_noisy_step(t)?;
        let ab = self.alpha_bar(t);
        Ok((libm::sqrt(ab), libm::sqrt(1.0 - ab)))
    }

    /// Draws `eps ~ N(0, I)` and returns `(x_t, eps)` with
    /// `x_t = sqrt(alpha_bar_t) x_0 + sqrt(1 - alpha_bar_t) eps`.
    pub fn forward_sample<R: Rng + ?Sized>(
        &self,
        x0: &[f64],
        t: usize,
        rng: &mut R,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let (signal, noise) = self.signal_noise(t)?;
        let eps: Vec<f64> = x0.iter().map(|_| StandardNormal.sample(rng)).collect();
        let xt = x0
            .iter()
            .zip(&eps)
            .map(|(&x, &e)| signal * x + noise * e)
            .collect();
        Ok((xt, eps))
    }

    /// `x_t` from a clean point and a given noise draw.
    pub fn forward_from_noise(&self, x0: &[f64], eps: &[f64], t: usize) -> Result<Vec<f64>> {
        check_same_dim(x0, eps)?;
        let (signal, noise) = self.signal_noise(t)?;
        Ok(x0
            .iter()
            .zip(eps)
            .map(|(&x, &e)| signal * x + noise * e)
            .collect())
    }

    /// The noise that carries `x_0` to `x_t`:
    /// `(x_t - sqrt(alpha_bar_t) x_0) / sqrt(1 - alpha_bar_t)`.
    pub fn noise_from_pair(&self, x0: &[f64], xt: &[f64], t: usize) -> Result<Vec<f64>> {
        check_same_dim(x0, xt)?;
        let (signal, noise) = self.signal_noise(t)?;
        Ok(x0
            .iter()
            .zip(xt)
            .map(|(&a, &b)| (b - signal * a) / noise)
            .collect())
    }
}

fn check_same_dim(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(())
}

#[inline]
fn two_product(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, libm::fma(a, b, -p))
}

#[inline]
fn fast_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}
