//! Exact optimal noise predictors for denoising diffusion models on tractable
//! data distributions, with independent numerical checks.
//!
//! For data drawn from a weighted point set or a Gaussian mixture, the
//! least-squares optimal noise predictor at timestep `t` is the posterior mean
//! of the forward noise, `E[eps | x_t]`, and it equals
//! `-sqrt(1 - alpha_bar_t) * grad log q(x_t)`. This crate evaluates both
//! sides in closed form ([`oracle`]), checks them against quadrature, Monte
//! Carlo and finite differences ([`bruteforce`]), fits explicit function
//! families to the training objective ([`trainer`]) and runs the ancestral
//! reverse sampler with any predictor ([`sampler`]).
//!
//! The crate is `no_std` and needs only `alloc`.

#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod bruteforce;
pub mod distributions;
pub mod error;
pub mod oracle;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod stats;
pub mod trainer;

pub use distributions::{DataDistribution, GaussianMixtureDensity, PointSet};
pub use error::{Error, Result};
pub use schedule::{LatentPoint, NoiseSchedule};

pub use nalgebra::DMatrix;
