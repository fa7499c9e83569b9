//! Brute-force evaluation of the posterior noise integral and of the score.
//!
//! Everything here integrates or samples the joint `q(x_t | x_0) q(x_0)`
//! directly and shares no code with [`crate::oracle`], so agreement between
//! the two is evidence rather than tautology.

use alloc::vec::Vec;
use core::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::distributions::{DataDistribution, GaussianMixtureDensity};
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::stats;
use crate::trainer::Predictor;

/// How an estimate's error is quantified.
#[derive(Debug, Clone, PartialEq)]
pub enum Uncertainty {
    /// Finite sum with no discretization or sampling error.
    Exact,
    /// Per-coordinate standard error of a Monte Carlo estimate.
    StdErr(Vec<f64>),
    /// Heuristic bound from grid refinement: max-norm change between the
    /// grid and its every-other-node subgrid.
    Bound(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateWithError {
    pub value: Vec<f64>,
    pub uncertainty: Uncertainty,
    pub n_evals: usize,
    /// Kish effective sample size of the importance weights (Monte Carlo only).
    pub effective_sample_size: Option<f64>,
    /// False when the effective sample size fell below [`MIN_RELIABLE_ESS`].
    pub reliable: bool,
}

impl EstimateWithError {
    /// Standard errors, zero for exact and quadrature estimates.
    pub fn stderr(&self) -> Vec<f64> {
        match &self.uncertainty {
            Uncertainty::StdErr(se) => se.clone(),
            _ => alloc::vec![0.0; self.value.len()],
        }
    }
}

/// Effective sample size under which a Monte Carlo estimate is flagged.
pub const MIN_RELIABLE_ESS: f64 = 10.0;

/// Tensor-product trapezoid grid placed around each component's posterior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    /// Odd, so the every-other-node subgrid shares both end points.
    pub nodes_per_axis: usize,
    /// Half-width of the grid in posterior standard deviations.
    pub half_width_sd: f64,
    /// Largest refinement change accepted, relative to `max(1, |estimate|)`.
    pub tolerance: f64,
}

impl GridSpec {
    /// 2049 nodes per axis in 1D and 257 in 2D, spanning 8 posterior
    /// standard deviations either side.
    pub fn for_dim(dim: usize) -> Self {
        Self {
            nodes_per_axis: if dim <= 1 { 2049 } else { 257 },
            half_width_sd: 8.0,
            tolerance: 1e-8,
        }
    }
}

struct QuadratureResult {
    eps: Vec<f64>,
    coarse_eps: Vec<f64>,
    log_marginal: f64,
    n_evals: usize,
}

/// Running log-scaled sums for the fine grid and the coarse subgrid.
struct Accumulator {
    shift: f64,
    den: f64,
    num: Vec<f64>,
    den_coarse: f64,
    num_coarse: Vec<f64>,
}

impl Accumulator {
    fn new(d: usize) -> Self {
        Self {
            shift: f64::NEG_INFINITY,
            den: 0.0,
            num: alloc::vec![0.0; d],
            den_coarse: 0.0,
            num_coarse: alloc::vec![0.0; d],
        }
    }

    fn add(&mut self, log_f: f64, eps: &[f64], w_fine: f64, w_coarse: f64) {
        if log_f == f64::NEG_INFINITY {
            return;
        }
        if log_f > self.shift {
            let scale = libm::exp(self.shift - log_f);
            self.den *= scale;
            self.den_coarse *= scale;
            self.num.iter_mut().for_each(|v| *v *= scale);
            self.num_coarse.iter_mut().for_each(|v| *v *= scale);
            self.shift = log_f;
        }
        let f = libm::exp(log_f - self.shift);
        self.den += w_fine * f;
        self.den_coarse += w_coarse * f;
        for (i, &e) in eps.iter().enumerate() {
            self.num[i] += w_fine * f * e;
            self.num_coarse[i] += w_coarse * f * e;
        }
    }
}

fn trapezoid_weight(i: usize, n: usize, h: f64) -> f64 {
    if i == 0 || i == n - 1 {
        0.5 * h
    } else {
        h
    }
}

/// Weight of fine node `i` in the subgrid made of the even nodes.
fn coarse_weight(i: usize, n: usize, h: f64) -> f64 {
    if i % 2 == 1 {
        0.0
    } else {
        trapezoid_weight(i / 2, n.div_ceil(2), 2.0 * h)
    }
}

fn integrate_mixture(
    g: &GaussianMixtureDensity,
    alpha_bar: f64,
    xt: &[f64],
    grid: &GridSpec,
) -> Result<QuadratureResult> {
    let d = g.dim();
    if d > 2 {
        return Err(Error::QuadratureDimension(d));
    }
    let n = grid.nodes_per_axis;
    if n < 3 || n.is_multiple_of(2) {
        return Err(Error::InvalidParameter("nodes_per_axis must be odd and at least 3"));
    }
    if !(grid.half_width_sd > 0.0) {
        return Err(Error::InvalidParameter("half_width_sd must be positive"));
    }
    let signal = libm::sqrt(alpha_bar);
    let noise_var = 1.0 - alpha_bar;
    let noise = libm::sqrt(noise_var);
    let x = DVector::from_column_slice(xt);
    let log_kernel_norm = -0.5 * d as f64 * libm::log(2.0 * PI * noise_var);

    let mut acc = Accumulator::new(d);
    let mut n_evals = 0;
    let mut x0 = alloc::vec![0.0; d];
    let mut eps = alloc::vec![0.0; d];

    for c in 0..g.num_components() {
        let w = g.weights()[c];
        if w == 0.0 {
            continue;
        }
        let sigma = g.covariance(c);
        let sigma_inv = sigma
            .clone()
            .try_inverse()
            .ok_or(Error::NotPositiveDefinite { index: c })?;
        let mu = DVector::from_column_slice(g.mean(c));
        let log_prior_norm = libm::log(w) - 0.5 * (d as f64 * libm::log(2.0 * PI) + libm::log(sigma.determinant()));

        // Precision form of the component posterior, used only to place the grid.
        let precision = &sigma_inv + DMatrix::from_diagonal_element(d, d, alpha_bar / noise_var);
        let post_cov = precision
            .try_inverse()
            .ok_or(Error::NotPositiveDefinite { index: c })?;
        let post_mean = &post_cov * (&sigma_inv * &mu + &x * (signal / noise_var));

        let mut lo = [0.0; 2];
        let mut h = [0.0; 2];
        for a in 0..d {
            let half = grid.half_width_sd * libm::sqrt(post_cov[(a, a)]);
            lo[a] = post_mean[a] - half;
            h[a] = 2.0 * half / (n - 1) as f64;
        }

        let total = if d == 1 { n } else { n * n };
        for flat in 0..total {
            let idx = [flat % n, flat / n];
            let mut w_fine = 1.0;
            let mut w_coarse = 1.0;
            for a in 0..d {
                x0[a] = lo[a] + idx[a] as f64 * h[a];
                w_fine *= trapezoid_weight(idx[a], n, h[a]);
                w_coarse *= coarse_weight(idx[a], n, h[a]);
            }
            let mut maha = 0.0;
            for i in 0..d {
                for j in 0..d {
                    maha += (x0[i] - mu[i]) * sigma_inv[(i, j)] * (x0[j] - mu[j]);
                }
            }
            let mut kernel_sq = 0.0;
            for a in 0..d {
                let r = xt[a] - signal * x0[a];
                kernel_sq += r * r;
                eps[a] = r / noise;
            }
            let log_f = log_prior_norm - 0.5 * maha + log_kernel_norm - kernel_sq / (2.0 * noise_var);
            acc.add(log_f, &eps, w_fine, w_coarse);
            n_evals += 1;
        }
    }

    if !(acc.den > 0.0) {
        return Err(Error::InvalidParameter("integrand vanished on every grid node"));
    }
    Ok(QuadratureResult {
        eps: acc.num.iter().map(|v| v / acc.den).collect(),
        coarse_eps: acc.num_coarse.iter().map(|v| v / acc.den_coarse).collect(),
        log_marginal: acc.shift + libm::log(acc.den),
        n_evals,
    })
}

fn check_inputs(dist: &DataDistribution, schedule: &NoiseSchedule, t: usize, xt: &[f64]) -> Result<()> {
    schedule.check_noisy_step(t)?;
    if xt.len() != dist.dim() {
        return Err(Error::DimensionMismatch {
            expected: dist.dim(),
            got: xt.len(),
        });
    }
    if xt.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    Ok(())
}

/// Finite-sum evaluation for discrete data: `sum_i r_i eps(x_t | x^(i))`.
fn discrete_sum(points: &[Vec<f64>], weights: &[f64], alpha_bar: f64, xt: &[f64]) -> (Vec<f64>, f64) {
    let signal = libm::sqrt(alpha_bar);
    let noise_var = 1.0 - alpha_bar;
    let noise = libm::sqrt(noise_var);
    let d = xt.len();
    let log_norm = -0.5 * d as f64 * libm::log(2.0 * PI * noise_var);
    let mut acc = Accumulator::new(d);
    let mut eps = alloc::vec![0.0; d];
    for (p, &w) in points.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        let mut sq = 0.0;
        for a in 0..d {
            let r = xt[a] - signal * p[a];
            sq += r * r;
            eps[a] = r / noise;
        }
        acc.add(libm::log(w) + log_norm - sq / (2.0 * noise_var), &eps, 1.0, 1.0);
    }
    (
        acc.num.iter().map(|v| v / acc.den).collect(),
        acc.shift + libm::log(acc.den),
    )
}

/// The posterior noise integral
/// `∫ eps(x_t|x_0) q(x_t|x_0) q(x_0) dx_0 / ∫ q(x_t|x_0) q(x_0) dx_0`
/// by trapezoid quadrature (mixtures, `d <= 2`) or as an exact finite sum
/// (discrete data, any `d`).
pub fn epsilon_star_quadrature(
    dist: &DataDistribution,
    schedule: &NoiseSchedule,
    t: usize,
    xt: &[f64],
    grid: &GridSpec,
) -> Result<EstimateWithError> {
    check_inputs(dist, schedule, t, xt)?;
    let ab = schedule.alpha_bar(t);
    match dist {
        DataDistribution::Discrete(ps) => {
            let (value, _) = discrete_sum(ps.points(), ps.weights(), ab, xt);
            Ok(EstimateWithError {
                value,
                uncertainty: Uncertainty::Exact,
                n_evals: ps.points().len(),
                effective_sample_size: None,
                reliable: true,
            })
        }
        DataDistribution::Mixture(g) => {
            let q = integrate_mixture(g, ab, xt, grid)?;
            let change = stats::max_abs_diff(&q.eps, &q.coarse_eps);
            let tolerance = grid.tolerance * stats::max_abs(&q.eps).max(1.0);
            if !(change <= tolerance) {
                return Err(Error::GridTooCoarse { change, tolerance });
            }
            Ok(EstimateWithError {
                value: q.eps,
                uncertainty: Uncertainty::Bound(change),
                n_evals: q.n_evals,
                effective_sample_size: None,
                reliable: true,
            })
        }
    }
}

/// `ln ∫ q(x_t | x_0) q(x_0) dx_0` by the same quadrature (or finite sum).
pub fn log_marginal_quadrature(
    dist: &DataDistribution,
    schedule: &NoiseSchedule,
    t: usize,
    xt: &[f64],
    grid: &GridSpec,
) -> Result<f64> {
    check_inputs(dist, schedule, t, xt)?;
    let ab = schedule.alpha_bar(t);
    Ok(match dist {
        DataDistribution::Discrete(ps) => discrete_sum(ps.points(), ps.weights(), ab, xt).1,
        DataDistribution::Mixture(g) => integrate_mixture(g, ab, xt, grid)?.log_marginal,
    })
}

/// Self-normalized importance sampling of the posterior noise integral with
/// the prior `q(x_0)` as proposal and weights `q(x_t | x_0)`.
///
/// Standard errors come from the delta method for the ratio estimator.
pub fn epsilon_star_monte_carlo<R: Rng + ?Sized>(
    dist: &DataDistribution,
    schedule: &NoiseSchedule,
    t: usize,
    xt: &[f64],
    n: usize,
    rng: &mut R,
) -> Result<EstimateWithError> {
    check_inputs(dist, schedule, t, xt)?;
    if n < 100 {
        return Err(Error::TooFewSamples { required: 100, got: n });
    }
    let ab = schedule.alpha_bar(t);
    let signal = libm::sqrt(ab);
    let noise_var = 1.0 - ab;
    let noise = libm::sqrt(noise_var);
    let d = xt.len();

    let draws = dist.sample(rng, n);
    let mut log_w = Vec::with_capacity(n);
    let mut eps = Vec::with_capacity(n);
    for x0 in &draws {
        let e: Vec<f64> = xt.iter().zip(x0).map(|(a, b)| (a - signal * b) / noise).collect();
        log_w.push(-0.5 * stats::norm_sq(&e));
        eps.push(e);
    }
    let mut w = stats::normalize_log_weights(&log_w);
    // Renormalize with compensated sums so that identical draws reproduce
    // their common value to rounding, independent of n.
    let mut total = stats::CompensatedSum::default();
    w.iter().for_each(|&v| total.add(v));
    let total = total.value();
    w.iter_mut().for_each(|v| *v /= total);
    let mut acc = alloc::vec![stats::CompensatedSum::default(); d];
    for (wj, ej) in w.iter().zip(&eps) {
        for a in 0..d {
            acc[a].add(wj * ej[a]);
        }
    }
    let value: Vec<f64> = acc.iter().map(|c| c.value()).collect();
    let mut var = alloc::vec![0.0; d];
    let mut sum_sq = 0.0;
    for (wj, ej) in w.iter().zip(&eps) {
        sum_sq += wj * wj;
        for a in 0..d {
            let r = ej[a] - value[a];
            var[a] += wj * wj * r * r;
        }
    }
    let ess = 1.0 / sum_sq;
    Ok(EstimateWithError {
        value,
        uncertainty: Uncertainty::StdErr(var.into_iter().map(libm::sqrt).collect()),
        n_evals: n,
        effective_sample_size: Some(ess),
        reliable: ess >= MIN_RELIABLE_ESS,
    })
}

/// Central differences `(ln q(x + h e_j) - ln q(x - h e_j)) / (2h)`.
pub fn score_finite_difference(g: &GaussianMixtureDensity, x: &[f64], h: f64) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::InvalidParameter("finite-difference step must be positive"));
    }
    if x.len() != g.dim() {
        return Err(Error::DimensionMismatch {
            expected: g.dim(),
            got: x.len(),
        });
    }
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for j in 0..x.len() {
        probe[j] = x[j] + h;
        let up = g.log_density(&probe)?;
        probe[j] = x[j] - h;
        let down = g.log_density(&probe)?;
        probe[j] = x[j];
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Monte Carlo estimate of the training objective at one timestep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

/// `E_{x_0} E_eps |eps - f(x_t)|^2` with `x_t = sqrt(ab) x_0 + sqrt(1 - ab) eps`.
pub fn loss_functional<P: Predictor + ?Sized, R: Rng + ?Sized>(
    f: &P,
    dist: &DataDistribution,
    schedule: &NoiseSchedule,
    t: usize,
    n: usize,
    rng: &mut R,
) -> Result<LossEstimate> {
    schedule.check_noisy_step(t)?;
    if n == 0 {
        return Err(Error::TooFewSamples { required: 1, got: 0 });
    }
    if f.dim() != dist.dim() {
        return Err(Error::DimensionMismatch {
            expected: dist.dim(),
            got: f.dim(),
        });
    }
    let mut losses = Vec::with_capacity(n);
    for x0 in dist.sample(rng, n) {
        let (xt, eps) = schedule.forward_sample(&x0, t, rng)?;
        let pred = f.eval(&xt);
        losses.push(eps.iter().zip(&pred).map(|(e, p)| (e - p) * (e - p)).sum());
    }
    Ok(LossEstimate {
        mean: stats::mean(&losses),
        stderr: stats::std_error(&losses),
        n,
    })
}
