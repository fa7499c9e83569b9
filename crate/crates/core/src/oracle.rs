//! Closed-form optimal noise predictor.
//!
//! Two computation paths are kept apart on purpose:
//!
//! * [`epsilon_star`] goes through the posterior `q(x_0 | x_t)`: it forms the
//!   conditional mean `E[x_0 | x_t]` and pushes it through the affine map
//!   `x_0 -> (x_t - sqrt(ab) x_0) / sqrt(1 - ab)`. Because that map is affine,
//!   this is the conditional expectation of the forward noise evaluated exactly.
//! * [`epsilon_from_score`] builds the marginal `q(x_t)` and scales its score by
//!   `-sqrt(1 - ab)`.
//!
//! [`check_identity`] compares them. The posterior code below computes its own
//! component likelihoods and never calls into the density or score routines of
//! [`crate::distributions`].

use alloc::vec::Vec;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::distributions::DataDistribution;
use crate::error::{Error, Result};
use crate::schedule::{LatentPoint, NoiseSchedule};
use crate::stats;

/// Summary of `q(x_0 | x_t)`.
#[derive(Debug, Clone)]
pub struct PosteriorSummary {
    /// Per-atom (discrete) or per-component (mixture) posterior probabilities.
    pub responsibilities: Vec<f64>,
    /// `E[x_0 | x_t]`.
    pub conditional_mean_x0: Vec<f64>,
    /// Per-component posterior means; empty for discrete data.
    pub component_means: Vec<Vec<f64>>,
    /// Per-component posterior covariances; empty for discrete data.
    pub component_covariances: Vec<DMatrix<f64>>,
}

fn validate(dist: &DataDistribution, schedule: &NoiseSchedule, t: usize, xt: &[f64]) -> Result<()> {
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

/// `q(x_0 | x_t)` in closed form.
///
/// Discrete data: `r_i ∝ w_i exp(-|x_t - sqrt(ab) x_i|^2 / (2 (1 - ab)))`.
/// Mixture data: component responsibilities under the pushed-forward
/// components, and per component the Gaussian-conjugate posterior with mean
/// `mu_k + sqrt(ab) Sigma_k S_k^{-1} (x_t - sqrt(ab) mu_k)` where
/// `S_k = ab Sigma_k + (1 - ab) I`.
pub fn posterior(dist: &DataDistribution, schedule: &NoiseSchedule, t: usize, xt: &[f64]) -> Result<PosteriorSummary> {
    validate(dist, schedule, t, xt)?;
    Ok(posterior_unchecked(dist, schedule.alpha_bar(t), xt))
}

pub(crate) fn posterior_unchecked(dist: &DataDistribution, alpha_bar: f64, xt: &[f64]) -> PosteriorSummary {
    let signal = libm::sqrt(alpha_bar);
    let noise_var = 1.0 - alpha_bar;
    let d = xt.len();
    match dist {
        DataDistribution::Discrete(ps) => {
            let log_w: Vec<f64> = ps
                .points()
                .iter()
                .zip(ps.weights())
                .map(|(x0, &w)| {
                    if w == 0.0 {
                        return f64::NEG_INFINITY;
                    }
                    let sq: f64 = xt.iter().zip(x0).map(|(a, b)| (a - signal * b) * (a - signal * b)).sum();
                    libm::log(w) - sq / (2.0 * noise_var)
                })
                .collect();
            let responsibilities = stats::normalize_log_weights(&log_w);
            let mut mean = alloc::vec![0.0; d];
            for (x0, &r) in ps.points().iter().zip(&responsibilities) {
                for i in 0..d {
                    mean[i] += r * x0[i];
                }
            }
            PosteriorSummary {
                responsibilities,
                conditional_mean_x0: mean,
                component_means: Vec::new(),
                component_covariances: Vec::new(),
            }
        }
        DataDistribution::Mixture(g) => {
            let x = DVector::from_column_slice(xt);
            let k = g.num_components();
            let mut log_w = Vec::with_capacity(k);
            let mut means = Vec::with_capacity(k);
            let mut covs = Vec::with_capacity(k);
            for c in 0..k {
                let mu = DVector::from_column_slice(g.mean(c));
                let sigma = g.covariance(c);
                let s = sigma * alpha_bar + DMatrix::from_diagonal_element(d, d, noise_var);
                let chol = Cholesky::new(s).expect("ab Sigma + (1 - ab) I is positive definite");
                let innovation = &x - &mu * signal;
                let whitened = chol.solve(&innovation);
                // Log of w_c N(x_t; sqrt(ab) mu_c, S_c), dropping the shared 2 pi factor.
                let log_det: f64 = chol.l_dirty().diagonal().iter().map(|&v| 2.0 * libm::log(v)).sum();
                let w = g.weights()[c];
                log_w.push(if w > 0.0 {
                    libm::log(w) - 0.5 * log_det - 0.5 * innovation.dot(&whitened)
                } else {
                    f64::NEG_INFINITY
                });
                let mean = &mu + (sigma * &whitened) * signal;
                // Sigma - ab Sigma S^{-1} Sigma
                let cov = sigma - (sigma * chol.solve(sigma)) * alpha_bar;
                means.push(mean.as_slice().to_vec());
                covs.push(cov);
            }
            let responsibilities = stats::normalize_log_weights(&log_w);
            let mut mean = alloc::vec![0.0; d];
            for (m, &r) in means.iter().zip(&responsibilities) {
                for i in 0..d {
                    mean[i] += r * m[i];
                }
            }
            PosteriorSummary {
                responsibilities,
                conditional_mean_x0: mean,
                component_means: means,
                component_covariances: covs,
            }
        }
    }
}

/// The optimal noise predictor `E[eps | x_t]`, evaluated through the posterior
/// conditional mean.
pub fn epsilon_star(dist: &DataDistribution, schedule: &NoiseSchedule, t: usize, xt: &[f64]) -> Result<Vec<f64>> {
    validate(dist, schedule, t, xt)?;
    Ok(epsilon_star_unchecked(dist, schedule.alpha_bar(t), xt))
}

pub(crate) fn epsilon_star_unchecked(dist: &DataDistribution, alpha_bar: f64, xt: &[f64]) -> Vec<f64> {
    let post = posterior_unchecked(dist, alpha_bar, xt);
    let signal = libm::sqrt(alpha_bar);
    let noise = libm::sqrt(1.0 - alpha_bar);
    xt.iter()
        .zip(&post.conditional_mean_x0)
        .map(|(&x, &m)| (x - signal * m) / noise)
        .collect()
}

/// `-sqrt(1 - ab) * grad log q(x_t)`, evaluated through the marginal density.
pub fn epsilon_from_score(dist: &DataDistribution, schedule: &NoiseSchedule, t: usize, xt: &[f64]) -> Result<Vec<f64>> {
    validate(dist, schedule, t, xt)?;
    let marginal = dist.marginal_qt(schedule, t)?;
    let noise = libm::sqrt(1.0 - schedule.alpha_bar(t));
    Ok(marginal.score(xt)?.into_iter().map(|s| -noise * s).collect())
}

/// `E[x_0 | x_t]` recovered from the score: `(x_t + (1 - ab) grad log q(x_t)) / sqrt(ab)`.
pub fn tweedie_mean(dist: &DataDistribution, schedule: &NoiseSchedule, t: usize, xt: &[f64]) -> Result<Vec<f64>> {
    validate(dist, schedule, t, xt)?;
    let ab = schedule.alpha_bar(t);
    let score = dist.marginal_qt(schedule, t)?.score(xt)?;
    Ok(xt
        .iter()
        .zip(&score)
        .map(|(&x, &s)| (x + (1.0 - ab) * s) / libm::sqrt(ab))
        .collect())
}

/// One comparison of the two predictor paths at a probe.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityReport {
    pub probe: LatentPoint,
    pub eps_direct: Vec<f64>,
    pub eps_score: Vec<f64>,
    /// `max_i |direct_i - score_i|`.
    pub abs_err: f64,
    /// `abs_err / max_i |direct_i|` (infinite when the direct path is zero and
    /// the paths differ).
    pub rel_err: f64,
    pub tol: f64,
    /// `min(abs_err, rel_err) <= tol`, and `tol > 0`.
    pub pass: bool,
}

impl IdentityReport {
    pub fn compare(probe: LatentPoint, eps_direct: Vec<f64>, eps_score: Vec<f64>, tol: f64) -> Self {
        let abs_err = stats::max_abs_diff(&eps_direct, &eps_score);
        let scale = stats::max_abs(&eps_direct);
        let rel_err = if scale > 0.0 {
            abs_err / scale
        } else if abs_err == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        let pass = tol > 0.0 && abs_err.min(rel_err) <= tol;
        Self {
            probe,
            eps_direct,
            eps_score,
            abs_err,
            rel_err,
            tol,
            pass,
        }
    }

    /// The error the pass rule is applied to.
    pub fn error(&self) -> f64 {
        self.abs_err.min(self.rel_err)
    }
}

/// Compares [`epsilon_star`] against [`epsilon_from_score`] at `x_t`.
/// Disagreement is reported in the result, not as an error.
pub fn check_identity(
    dist: &DataDistribution,
    schedule: &NoiseSchedule,
    t: usize,
    xt: &[f64],
    tol: f64,
) -> Result<IdentityReport> {
    let direct = epsilon_star(dist, schedule, t, xt)?;
    let via_score = epsilon_from_score(dist, schedule, t, xt)?;
    Ok(IdentityReport::compare(
        LatentPoint { x: xt.to_vec(), t },
        direct,
        via_score,
        tol,
    ))
}

/// Probe points drawn from `q(x_t)`. With `far_tail`, adds one point per
/// marginal component at 6 standard deviations along a random direction.
pub fn draw_probes<R: Rng + ?Sized>(
    dist: &DataDistribution,
    schedule: &NoiseSchedule,
    t: usize,
    n: usize,
    far_tail: bool,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    schedule.check_noisy_step(t)?;
    let mut probes = Vec::with_capacity(n);
    for x0 in dist.sample(rng, n) {
        probes.push(schedule.forward_sample(&x0, t, rng)?.0);
    }
    if far_tail {
        let marginal = dist.marginal_qt(schedule, t)?;
        let d = dist.dim();
        for k in 0..marginal.num_components() {
            let dir: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            let norm = libm::sqrt(stats::norm_sq(&dir)).max(f64::MIN_POSITIVE);
            let cov = marginal.covariance(k);
            let sd = libm::sqrt(cov.diagonal().max());
            probes.push(
                marginal
                    .mean(k)
                    .iter()
                    .zip(&dir)
                    .map(|(m, u)| m + 6.0 * sd * u / norm)
                    .collect(),
            );
        }
    }
    Ok(probes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::{GaussianMixtureDensity, PointSet};
    use crate::rng::derived_rng;

    fn one_step(alpha_bar: f64) -> NoiseSchedule {
        NoiseSchedule::from_betas(alloc::vec![1.0 - alpha_bar]).unwrap()
    }

    fn two_point() -> DataDistribution {
        PointSet::uniform(alloc::vec![alloc::vec![-1.0], alloc::vec![1.0]])
            .unwrap()
            .into()
    }

    #[test]
    fn dirac_posterior_is_the_atom() {
        let d: DataDistribution = PointSet::dirac(alloc::vec![1.0]).unwrap().into();
        let s = one_step(0.64);
        for xt in [-3.0, 0.0, 1.0, 7.5] {
            let p = posterior(&d, &s, 1, &[xt]).unwrap();
            assert_eq!(p.responsibilities, [1.0]);
            assert_eq!(p.conditional_mean_x0, [1.0]);
        }
        let eps = epsilon_star(&d, &s, 1, &[1.0]).unwrap();
        assert!((eps[0] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn standard_normal_posterior_mean() {
        let d: DataDistribution = GaussianMixtureDensity::standard_normal(1).unwrap().into();
        let s = one_step(0.75);
        let p = posterior(&d, &s, 1, &[2.0]).unwrap();
        assert!((p.conditional_mean_x0[0] - libm::sqrt(0.75) * 2.0).abs() < 1e-15);
        let eps = epsilon_star(&d, &s, 1, &[2.0]).unwrap();
        assert!((eps[0] - 1.0).abs() < 1e-15);
        let via_score = epsilon_from_score(&d, &s, 1, &[2.0]).unwrap();
        assert!((via_score[0] - 1.0).abs() < 1e-15);
        // posterior covariance of a joint Gaussian: 1 - ab
        assert!((p.component_covariances[0][(0, 0)] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn two_point_tanh_law() {
        let d = two_point();
        let s = one_step(0.36);
        let p = posterior(&d, &s, 1, &[0.5]).unwrap();
        let expected = libm::tanh(0.6 * 0.5 / 0.64);
        assert!((p.conditional_mean_x0[0] - expected).abs() < 1e-15);
        let eps = epsilon_star(&d, &s, 1, &[0.5]).unwrap()[0];
        assert!((eps - (0.5 - 0.6 * libm::tanh(0.46875)) / 0.8).abs() < 1e-15);
        assert!((eps - 0.297).abs() < 5e-4);
        let zero = epsilon_from_score(&d, &s, 1, &[0.0]).unwrap();
        assert_eq!(zero, [0.0]);
    }

    #[test]
    fn responsibilities_stay_normalized_when_peaked() {
        // alpha_bar close to one: likelihoods differ by thousands of nats.
        let d: DataDistribution = PointSet::uniform(alloc::vec![
            alloc::vec![-1.0],
            alloc::vec![0.0],
            alloc::vec![1.0]
        ])
        .unwrap()
        .into();
        let s = one_step(1.0 - 1e-6);
        let p = posterior(&d, &s, 1, &[0.49]).unwrap();
        let total: f64 = p.responsibilities.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(p.responsibilities.iter().all(|r| r.is_finite() && *r >= 0.0));
        assert!(p.responsibilities[1] > 0.999);
    }

    #[test]
    fn corrupted_path_is_detected() {
        let g = GaussianMixtureDensity::new(
            alloc::vec![0.4, 0.6],
            alloc::vec![alloc::vec![1.0, -1.0], alloc::vec![-2.0, 0.5]],
            alloc::vec![
                DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5]),
                DMatrix::from_row_slice(2, 2, &[0.4, -0.1, -0.1, 0.9]),
            ],
        )
        .unwrap();
        let d: DataDistribution = g.into();
        let s = NoiseSchedule::linear(100, 1e-3, 0.2).unwrap();
        let xt = [0.3, 0.8];
        let ok = check_identity(&d, &s, 40, &xt, 1e-8).unwrap();
        assert!(ok.pass, "{ok:?}");
        let bad: Vec<f64> = ok.eps_score.iter().map(|v| v * 1.01).collect();
        let report = IdentityReport::compare(ok.probe.clone(), ok.eps_direct.clone(), bad, 1e-8);
        assert!(!report.pass);
        let zero_tol = IdentityReport::compare(ok.probe, ok.eps_direct.clone(), ok.eps_direct, 0.0);
        assert!(!zero_tol.pass);
    }

    #[test]
    fn far_tail_probes_are_appended() {
        let d = two_point();
        let s = NoiseSchedule::linear(10, 1e-3, 0.2).unwrap();
        let mut rng = derived_rng(1, 2, 3);
        let probes = draw_probes(&d, &s, 5, 20, true, &mut rng).unwrap();
        assert_eq!(probes.len(), 22);
        for p in &probes[20..] {
            let r = check_identity(&d, &s, 5, p, 1e-8).unwrap();
            assert!(r.pass, "{r:?}");
        }
    }

    #[test]
    fn invalid_timestep_is_rejected() {
        let d = two_point();
        let s = one_step(0.5);
        assert!(matches!(
            epsilon_star(&d, &s, 0, &[0.0]),
            Err(Error::TimestepOutOfRange { .. })
        ));
        assert!(matches!(
            epsilon_from_score(&d, &s, 1, &[0.0, 1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            posterior(&d, &s, 1, &[f64::NAN]),
            Err(Error::NonFiniteInput)
        ));
    }
}
