//! Data distributions `q(x_0)` and their forward-process marginals `q(x_t)`.
//!
//! Both variants of [`DataDistribution`] push forward to a Gaussian mixture
//! under the kernel `N(sqrt(alpha_bar_t) x_0, (1 - alpha_bar_t) I)`, so one
//! density/score implementation ([`GaussianMixtureDensity`]) serves every
//! marginal.

use alloc::vec::Vec;
use core::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::stats;

/// Largest supported ambient dimension.
pub const MAX_DIM: usize = 8;

const WEIGHT_SUM_TOL: f64 = 1e-12;

/// `q(x_0)`: a weighted point set or a Gaussian mixture.
#[derive(Debug, Clone)]
pub enum DataDistribution {
    Discrete(PointSet),
    Mixture(GaussianMixtureDensity),
}

/// Weighted atoms `x^(i)` with weights `w_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    dim: usize,
    points: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

/// Gaussian mixture with cached Cholesky factors and log-normalizers.
#[derive(Debug, Clone)]
pub struct GaussianMixtureDensity {
    dim: usize,
    weights: Vec<f64>,
    log_weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    covariances: Vec<DMatrix<f64>>,
    factors: Vec<Cholesky<f64, Dyn>>,
    log_normalizers: Vec<f64>,
}

fn check_dim(dim: usize) -> Result<()> {
    if dim == 0 || dim > MAX_DIM {
        return Err(Error::UnsupportedDimension(dim));
    }
    Ok(())
}

fn check_weights(weights: &[f64]) -> Result<()> {
    for (index, &value) in weights.iter().enumerate() {
        if !value.is_finite() || value < 0.0 {
            return Err(Error::InvalidWeight { index, value });
        }
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(Error::WeightsNotNormalized(total));
    }
    Ok(())
}

fn check_point(dim: usize, x: &[f64]) -> Result<()> {
    if x.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: x.len(),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    Ok(())
}

impl PointSet {
    pub fn new(points: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        let first = points.first().ok_or(Error::EmptyDistribution)?;
        let dim = first.len();
        check_dim(dim)?;
        if weights.len() != points.len() {
            return Err(Error::LengthMismatch {
                what: "weights",
                expected: points.len(),
                got: weights.len(),
            });
        }
        for p in &points {
            check_point(dim, p)?;
        }
        check_weights(&weights)?;
        Ok(Self {
            dim,
            points,
            weights,
        })
    }

    /// Equal weights over `points`.
    pub fn uniform(points: Vec<Vec<f64>>) -> Result<Self> {
        let n = points.len().max(1);
        Self::new(points, alloc::vec![1.0 / n as f64; n])
    }

    /// A single atom at `c`.
    pub fn dirac(c: Vec<f64>) -> Result<Self> {
        Self::new(alloc::vec![c], alloc::vec![1.0])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

impl GaussianMixtureDensity {
    /// Builds a mixture; every covariance must be symmetric and admit a
    /// Cholesky factorization.
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, covariances: Vec<DMatrix<f64>>) -> Result<Self> {
        let first = means.first().ok_or(Error::EmptyDistribution)?;
        let dim = first.len();
        check_dim(dim)?;
        let k = means.len();
        if weights.len() != k {
            return Err(Error::LengthMismatch {
                what: "weights",
                expected: k,
                got: weights.len(),
            });
        }
        if covariances.len() != k {
            return Err(Error::LengthMismatch {
                what: "covariances",
                expected: k,
                got: covariances.len(),
            });
        }
        for m in &means {
            check_point(dim, m)?;
        }
        check_weights(&weights)?;

        let mut factors = Vec::with_capacity(k);
        let mut log_normalizers = Vec::with_capacity(k);
        for (index, cov) in covariances.iter().enumerate() {
            if cov.nrows() != dim || cov.ncols() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: cov.nrows(),
                });
            }
            if cov.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteInput);
            }
            let scale = cov.amax().max(f64::MIN_POSITIVE);
            for i in 0..dim {
                for j in 0..i {
                    if (cov[(i, j)] - cov[(j, i)]).abs() > 1e-12 * scale {
                        return Err(Error::AsymmetricCovariance { index });
                    }
                }
            }
            let chol = Cholesky::new(cov.clone()).ok_or(Error::NotPositiveDefinite { index })?;
            let log_det: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|&d| libm::log(d)).sum::<f64>();
            if !log_det.is_finite() {
                return Err(Error::NotPositiveDefinite { index });
            }
            log_normalizers.push(-0.5 * (dim as f64 * libm::log(2.0 * PI) + log_det));
            factors.push(chol);
        }

        let log_weights = weights
            .iter()
            .map(|&w| if w > 0.0 { libm::log(w) } else { f64::NEG_INFINITY })
            .collect();
        Ok(Self {
            dim,
            weights,
            log_weights,
            means: means.into_iter().map(DVector::from_vec).collect(),
            covariances,
            factors,
            log_normalizers,
        })
    }

    /// Mixture whose components have covariance `variances[k] * I`.
    pub fn isotropic(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: &[f64]) -> Result<Self> {
        let dim = means.first().map_or(0, Vec::len);
        let covs = variances
            .iter()
            .map(|&v| DMatrix::from_diagonal_element(dim, dim, v))
            .collect();
        Self::new(weights, means, covs)
    }

    /// Single Gaussian `N(mean, cov)`.
    pub fn gaussian(mean: Vec<f64>, cov: DMatrix<f64>) -> Result<Self> {
        Self::new(alloc::vec![1.0], alloc::vec![mean], alloc::vec![cov])
    }

    /// Standard normal in `dim` dimensions.
    pub fn standard_normal(dim: usize) -> Result<Self> {
        Self::gaussian(alloc::vec![0.0; dim], DMatrix::identity(dim, dim))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mean(&self, k: usize) -> &[f64] {
        self.means[k].as_slice()
    }

    pub fn covariance(&self, k: usize) -> &DMatrix<f64> {
        &self.covariances[k]
    }

    /// `ln pi_k + ln N(x; mu_k, Sigma_k)` for every component.
    fn log_joint(&self, x: &DVector<f64>) -> Vec<f64> {
        (0..self.num_components())
            .map(|k| {
                if self.log_weights[k] == f64::NEG_INFINITY {
                    return f64::NEG_INFINITY;
                }
                let diff = x - &self.means[k];
                let y = self.factors[k]
                    .l_dirty()
                    .solve_lower_triangular(&diff)
                    .expect("Cholesky factor has a nonzero diagonal");
                self.log_weights[k] + self.log_normalizers[k] - 0.5 * y.norm_squared()
            })
            .collect()
    }

    fn to_vector(&self, x: &[f64]) -> Result<DVector<f64>> {
        check_point(self.dim, x)?;
        Ok(DVector::from_column_slice(x))
    }

    /// `ln sum_k pi_k N(x; mu_k, Sigma_k)` via log-sum-exp.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        let x = self.to_vector(x)?;
        Ok(stats::log_sum_exp(&self.log_joint(&x)))
    }

    /// Component responsibilities at `x`, normalized in log space.
    pub fn responsibilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        let x = self.to_vector(x)?;
        Ok(stats::normalize_log_weights(&self.log_joint(&x)))
    }

    /// `grad_x ln q(x) = sum_k r_k(x) Sigma_k^{-1} (mu_k - x)`.
    pub fn score(&self, x: &[f64]) -> Result<Vec<f64>> {
        let xv = self.to_vector(x)?;
        let resp = stats::normalize_log_weights(&self.log_joint(&xv));
        let mut out = DVector::zeros(self.dim);
        for (k, &r) in resp.iter().enumerate() {
            if r == 0.0 {
                continue;
            }
            let pull = self.factors[k].solve(&(&self.means[k] - &xv));
            out.axpy(r, &pull, 1.0);
        }
        Ok(out.as_slice().to_vec())
    }

    /// Draws `n` i.i.d. points: a component by weight, then a Gaussian draw.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<Vec<f64>> {
        let picker = WeightedIndex::new(&self.weights).expect("weights validated at construction");
        (0..n)
            .map(|_| {
                let k = picker.sample(rng);
                let z: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(rng)).collect();
                let l = self.factors[k].l_dirty();
                (0..self.dim)
                    .map(|i| self.means[k][i] + (0..=i).map(|j| l[(i, j)] * z[j]).sum::<f64>())
                    .collect()
            })
            .collect()
    }

    /// Per-coordinate mean and variance of the mixture.
    pub fn moments(&self) -> (Vec<f64>, Vec<f64>) {
        let mut mean = alloc::vec![0.0; self.dim];
        let mut second = alloc::vec![0.0; self.dim];
        for k in 0..self.num_components() {
            let w = self.weights[k];
            for i in 0..self.dim {
                let m = self.means[k][i];
                mean[i] += w * m;
                second[i] += w * (self.covariances[k][(i, i)] + m * m);
            }
        }
        let var = mean.iter().zip(&second).map(|(m, s)| (s - m * m).max(0.0)).collect();
        (mean, var)
    }

    /// 1D mixture CDF; panics unless `dim == 1`.
    pub fn cdf_1d(&self, x: f64) -> f64 {
        assert_eq!(self.dim, 1, "cdf_1d needs a one-dimensional mixture");
        (0..self.num_components())
            .map(|k| {
                let sd = libm::sqrt(self.covariances[k][(0, 0)]);
                self.weights[k] * stats::normal_cdf((x - self.means[k][0]) / sd)
            })
            .sum()
    }

    /// 1D mixture quantile by bisection on [`Self::cdf_1d`].
    pub fn quantile_1d(&self, p: f64) -> f64 {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for k in 0..self.num_components() {
            let sd = libm::sqrt(self.covariances[k][(0, 0)]);
            lo = lo.min(self.means[k][0] - 40.0 * sd);
            hi = hi.max(self.means[k][0] + 40.0 * sd);
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.cdf_1d(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

impl DataDistribution {
    pub fn dim(&self) -> usize {
        match self {
            Self::Discrete(p) => p.dim(),
            Self::Mixture(g) => g.dim(),
        }
    }

    /// The marginal `q(x_t)`.
    ///
    /// Atoms `x^(i)` become components `N(sqrt(ab) x^(i), (1 - ab) I)`;
    /// components `N(mu, Sigma)` become `N(sqrt(ab) mu, ab Sigma + (1 - ab) I)`.
    pub fn marginal_qt(&self, schedule: &NoiseSchedule, t: usize) -> Result<GaussianMixtureDensity> {
        schedule.check_noisy_step(t)?;
        let ab = schedule.alpha_bar(t);
        let signal = libm::sqrt(ab);
        let noise_var = 1.0 - ab;
        match self {
            Self::Discrete(p) => {
                let means = p
                    .points()
                    .iter()
                    .map(|x| x.iter().map(|v| signal * v).collect())
                    .collect();
                let variances = alloc::vec![noise_var; p.points().len()];
                GaussianMixtureDensity::isotropic(p.weights().to_vec(), means, &variances)
            }
            Self::Mixture(g) => {
                let d = g.dim();
                let means = g.means.iter().map(|m| (m * signal).as_slice().to_vec()).collect();
                let covs = g
                    .covariances
                    .iter()
                    .map(|c| c * ab + DMatrix::from_diagonal_element(d, d, noise_var))
                    .collect();
                GaussianMixtureDensity::new(g.weights.clone(), means, covs)
            }
        }
    }

    /// Draws `n` i.i.d. points from `q(x_0)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<Vec<f64>> {
        match self {
            Self::Discrete(p) => {
                let picker = WeightedIndex::new(p.weights()).expect("weights validated at construction");
                (0..n).map(|_| p.points()[picker.sample(rng)].clone()).collect()
            }
            Self::Mixture(g) => g.sample(rng, n),
        }
    }

    /// Per-coordinate mean and variance of `q(x_0)`.
    pub fn moments(&self) -> (Vec<f64>, Vec<f64>) {
        match self {
            Self::Discrete(p) => {
                let d = p.dim();
                let mut mean = alloc::vec![0.0; d];
                let mut second = alloc::vec![0.0; d];
                for (x, &w) in p.points().iter().zip(p.weights()) {
                    for i in 0..d {
                        mean[i] += w * x[i];
                        second[i] += w * x[i] * x[i];
                    }
                }
                let var = mean.iter().zip(&second).map(|(m, s)| (s - m * m).max(0.0)).collect();
                (mean, var)
            }
            Self::Mixture(g) => g.moments(),
        }
    }

    /// Quantile of a 1D data distribution.
    pub fn quantile_1d(&self, p: f64) -> Result<f64> {
        if self.dim() != 1 {
            return Err(Error::DimensionMismatch {
                expected: 1,
                got: self.dim(),
            });
        }
        Ok(match self {
            Self::Discrete(ps) => {
                let mut atoms: Vec<(f64, f64)> = ps
                    .points()
                    .iter()
                    .zip(ps.weights())
                    .map(|(x, &w)| (x[0], w))
                    .collect();
                atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
                let mut acc = 0.0;
                let mut last = atoms[0].0;
                for (x, w) in atoms {
                    if w == 0.0 {
                        continue;
                    }
                    acc += w;
                    last = x;
                    if acc >= p {
                        break;
                    }
                }
                last
            }
            Self::Mixture(g) => g.quantile_1d(p),
        })
    }
}

impl From<PointSet> for DataDistribution {
    fn from(p: PointSet) -> Self {
        Self::Discrete(p)
    }
}

impl From<GaussianMixtureDensity> for DataDistribution {
    fn from(g: GaussianMixtureDensity) -> Self {
        Self::Mixture(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derived_rng;

    fn two_point() -> DataDistribution {
        PointSet::uniform(alloc::vec![alloc::vec![-1.0], alloc::vec![1.0]])
            .unwrap()
            .into()
    }

    fn one_step(alpha_bar: f64) -> NoiseSchedule {
        NoiseSchedule::from_betas(alloc::vec![1.0 - alpha_bar]).unwrap()
    }

    #[test]
    fn standard_normal_log_density_at_origin() {
        let g = GaussianMixtureDensity::standard_normal(1).unwrap();
        let expected = -0.5 * libm::log(2.0 * PI);
        assert!((g.log_density(&[0.0]).unwrap() - expected).abs() < 1e-15);
        assert!((expected + 0.918_938_533_204_672_7).abs() < 1e-15);
    }

    #[test]
    fn single_component_matches_gaussian_formula() {
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 0.5]);
        let g = GaussianMixtureDensity::gaussian(alloc::vec![0.5, -1.0], cov.clone()).unwrap();
        let x = [1.2, 0.4];
        let d = DVector::from_column_slice(&[0.7, 1.4]);
        let inv = cov.clone().try_inverse().unwrap();
        let maha = (d.transpose() * inv * &d)[(0, 0)];
        let expected = -0.5 * (2.0 * libm::log(2.0 * PI) + libm::log(cov.determinant()) + maha);
        assert!((g.log_density(&x).unwrap() - expected).abs() < 1e-13);
    }

    #[test]
    fn far_tail_log_density_is_finite() {
        let g = GaussianMixtureDensity::isotropic(
            alloc::vec![0.5, 0.5],
            alloc::vec![alloc::vec![-1.0], alloc::vec![1.0]],
            &[1.0, 1.0],
        )
        .unwrap();
        let lp = g.log_density(&[40.0]).unwrap();
        assert!(lp.is_finite() && lp < -700.0);
        let s = g.score(&[40.0]).unwrap();
        assert!((s[0] + 39.0).abs() < 1e-9);
        let lp = g.log_density(&[1e4]).unwrap();
        assert!(lp.is_finite());
    }

    #[test]
    fn score_of_standard_normal_and_symmetric_mixture() {
        let g = GaussianMixtureDensity::standard_normal(3).unwrap();
        let s = g.score(&[0.5, -2.0, 3.0]).unwrap();
        assert_eq!(s, alloc::vec![-0.5, 2.0, -3.0]);
        let m = GaussianMixtureDensity::isotropic(
            alloc::vec![0.5, 0.5],
            alloc::vec![alloc::vec![-2.0], alloc::vec![2.0]],
            &[0.3, 0.3],
        )
        .unwrap();
        assert!(m.score(&[0.0]).unwrap()[0].abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let g = GaussianMixtureDensity::standard_normal(2).unwrap();
        assert!(matches!(
            g.log_density(&[0.0]),
            Err(Error::DimensionMismatch { expected: 2, got: 1 })
        ));
        assert!(g.score(&[0.0, 1.0, 2.0]).is_err());
    }

    #[test]
    fn construction_guards() {
        assert!(matches!(
            PointSet::new(alloc::vec![alloc::vec![0.0]; 2], alloc::vec![0.5, 0.6]),
            Err(Error::WeightsNotNormalized(_))
        ));
        assert!(matches!(
            PointSet::new(alloc::vec![alloc::vec![0.0; 9]], alloc::vec![1.0]),
            Err(Error::UnsupportedDimension(9))
        ));
        assert!(matches!(
            PointSet::new(alloc::vec![alloc::vec![0.0]; 2], alloc::vec![1.5, -0.5]),
            Err(Error::InvalidWeight { index: 1, .. })
        ));
        let not_pd = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            GaussianMixtureDensity::gaussian(alloc::vec![0.0, 0.0], not_pd),
            Err(Error::NotPositiveDefinite { index: 0 })
        ));
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.1, 1.0]);
        assert!(matches!(
            GaussianMixtureDensity::gaussian(alloc::vec![0.0, 0.0], asym),
            Err(Error::AsymmetricCovariance { index: 0 })
        ));
    }

    #[test]
    fn standard_normal_is_a_fixed_point() {
        let s = NoiseSchedule::linear(100, 1e-3, 0.2).unwrap();
        let d: DataDistribution = GaussianMixtureDensity::standard_normal(2).unwrap().into();
        for t in [1, 37, 100] {
            let m = d.marginal_qt(&s, t).unwrap();
            assert!(m.mean(0).iter().all(|v| *v == 0.0));
            let c = m.covariance(0);
            assert!((c - DMatrix::<f64>::identity(2, 2)).amax() < 1e-15);
        }
    }

    #[test]
    fn dirac_and_two_point_marginals() {
        let s = one_step(0.36);
        let dirac: DataDistribution = PointSet::dirac(alloc::vec![2.0]).unwrap().into();
        let m = dirac.marginal_qt(&s, 1).unwrap();
        assert!((m.mean(0)[0] - 1.2).abs() < 1e-15);
        assert!((m.covariance(0)[(0, 0)] - 0.64).abs() < 1e-15);

        let m = two_point().marginal_qt(&s, 1).unwrap();
        assert_eq!(m.weights(), &[0.5, 0.5]);
        assert!((m.mean(0)[0] + 0.6).abs() < 1e-15 && (m.mean(1)[0] - 0.6).abs() < 1e-15);
        assert!((m.covariance(1)[(0, 0)] - 0.64).abs() < 1e-15);
    }

    #[test]
    fn late_marginal_means_shrink() {
        let s = NoiseSchedule::linear(100, 1e-3, 0.2).unwrap();
        let pts = alloc::vec![alloc::vec![3.0, -4.0], alloc::vec![0.5, 0.5]];
        let d: DataDistribution = PointSet::uniform(pts).unwrap().into();
        let m = d.marginal_qt(&s, 100).unwrap();
        let bound = libm::sqrt(s.alpha_bar(100)) * 5.0;
        for k in 0..2 {
            let norm = libm::sqrt(stats::norm_sq(m.mean(k)));
            assert!(norm <= bound * (1.0 + 1e-12));
        }
    }

    #[test]
    fn sampling_respects_atoms_and_zero_weights() {
        let mut rng = derived_rng(3, 0, 0);
        let dirac: DataDistribution = PointSet::dirac(alloc::vec![1.5, -0.5]).unwrap().into();
        assert!(dirac.sample(&mut rng, 100).iter().all(|x| x == &[1.5, -0.5]));
        let skewed: DataDistribution =
            PointSet::new(alloc::vec![alloc::vec![1.0], alloc::vec![9.0]], alloc::vec![1.0, 0.0])
                .unwrap()
                .into();
        assert!(skewed.sample(&mut rng, 1000).iter().all(|x| x[0] == 1.0));
    }

    #[test]
    fn empirical_weights_within_clt_band() {
        let w = [0.2, 0.5, 0.3];
        let d: DataDistribution = PointSet::new(
            alloc::vec![alloc::vec![0.0], alloc::vec![1.0], alloc::vec![2.0]],
            w.to_vec(),
        )
        .unwrap()
        .into();
        let n = 100_000;
        let draws = d.sample(&mut derived_rng(11, 0, 0), n);
        for (i, &wi) in w.iter().enumerate() {
            let freq = draws.iter().filter(|x| x[0] == i as f64).count() as f64 / n as f64;
            let band = 4.0 * libm::sqrt(wi * (1.0 - wi) / n as f64);
            assert!((freq - wi).abs() <= band, "atom {i}: {freq}");
        }
    }

    #[test]
    fn quantiles_invert_the_cdf() {
        let g = GaussianMixtureDensity::isotropic(
            alloc::vec![0.3, 0.7],
            alloc::vec![alloc::vec![-2.0], alloc::vec![1.0]],
            &[0.25, 1.0],
        )
        .unwrap();
        for p in [0.01, 0.3, 0.5, 0.9] {
            let x = g.quantile_1d(p);
            assert!((g.cdf_1d(x) - p).abs() < 1e-12);
        }
        let d = two_point();
        assert_eq!(d.quantile_1d(0.25).unwrap(), -1.0);
        assert_eq!(d.quantile_1d(0.75).unwrap(), 1.0);
    }
}
