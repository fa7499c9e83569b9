//! Least-squares fits of explicit function families to the noise-prediction
//! objective at a single timestep, and checks that the minimizer is the
//! posterior mean of the noise.
//!
//! Each [`PredictorFunction`] serves exactly one timestep.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::{Cholesky, DMatrix};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::distributions::DataDistribution;
use crate::error::{Error, Result};
use crate::oracle;
use crate::schedule::NoiseSchedule;
use crate::stats;

/// A noise predictor at a fixed timestep.
pub trait Predictor {
    fn dim(&self) -> usize;

    /// Prediction at `x`, which must have length [`Predictor::dim`].
    fn eval(&self, x: &[f64]) -> Vec<f64>;

    /// True where the predictor carries no fitted information (grid cells
    /// filled from a neighbour). Such points are left out of accuracy gates.
    fn extrapolated(&self, _x: &[f64]) -> bool {
        false
    }
}

impl<P: Predictor + ?Sized> Predictor for &P {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn eval(&self, x: &[f64]) -> Vec<f64> {
        (**self).eval(x)
    }

    fn extrapolated(&self, x: &[f64]) -> bool {
        (**self).extrapolated(x)
    }
}

/// The closed-form optimum at one timestep.
#[derive(Debug, Clone, Copy)]
pub struct OraclePredictor<'a> {
    dist: &'a DataDistribution,
    alpha_bar: f64,
}

impl<'a> OraclePredictor<'a> {
    pub fn new(dist: &'a DataDistribution, schedule: &NoiseSchedule, t: usize) -> Result<Self> {
        schedule.check_noisy_step(t)?;
        Ok(Self {
            dist,
            alpha_bar: schedule.alpha_bar(t),
        })
    }
}

impl Predictor for OraclePredictor<'_> {
    fn dim(&self) -> usize {
        self.dist.dim()
    }

    fn eval(&self, x: &[f64]) -> Vec<f64> {
        oracle::epsilon_star_unchecked(self.dist, self.alpha_bar, x)
    }
}

/// `f ≡ 0`.
#[derive(Debug, Clone, Copy)]
pub struct ZeroPredictor {
    pub dim: usize,
}

impl Predictor for ZeroPredictor {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, _x: &[f64]) -> Vec<f64> {
        alloc::vec![0.0; self.dim]
    }
}

/// `f + c` for a constant vector `c`.
#[derive(Debug, Clone)]
pub struct Offset<P> {
    pub inner: P,
    pub offset: Vec<f64>,
}

impl<P: Predictor> Predictor for Offset<P> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut v = self.inner.eval(x);
        v.iter_mut().zip(&self.offset).for_each(|(a, b)| *a += b);
        v
    }
}

/// `f + s h`.
#[derive(Debug, Clone)]
pub struct Perturbed<P, H> {
    pub base: P,
    pub direction: H,
    pub scale: f64,
}

impl<P: Predictor, H: Predictor> Predictor for Perturbed<P, H> {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut v = self.base.eval(x);
        let h = self.direction.eval(x);
        v.iter_mut().zip(&h).for_each(|(a, b)| *a += self.scale * b);
        v
    }

    fn extrapolated(&self, x: &[f64]) -> bool {
        self.base.extrapolated(x)
    }
}

/// Parameters of a random smooth perturbation direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationSpec {
    pub features: usize,
    pub lengthscale: f64,
    pub amplitude: f64,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        Self {
            features: 8,
            lengthscale: 1.0,
            amplitude: 1.0,
        }
    }
}

impl PerturbationSpec {
    /// Draws `h(x) = amplitude / sqrt(M) * sum_m a_m cos(w_m . x / l + phi_m)`
    /// with Gaussian frequencies and vector amplitudes.
    pub fn generate<R: Rng + ?Sized>(&self, dim: usize, rng: &mut R) -> RandomSmoothPerturbation {
        let phase = Uniform::new(0.0, 2.0 * core::f64::consts::PI).expect("valid range");
        let features = self.features.max(1);
        let mut frequencies = Vec::with_capacity(features);
        let mut phases = Vec::with_capacity(features);
        let mut amplitudes = Vec::with_capacity(features);
        for _ in 0..features {
            frequencies.push((0..dim).map(|_| StandardNormal.sample(rng)).collect::<Vec<f64>>());
            phases.push(phase.sample(rng));
            amplitudes.push((0..dim).map(|_| StandardNormal.sample(rng)).collect::<Vec<f64>>());
        }
        RandomSmoothPerturbation {
            dim,
            frequencies,
            phases,
            amplitudes,
            lengthscale: self.lengthscale,
            scale: self.amplitude / libm::sqrt(features as f64),
        }
    }
}

/// Random Fourier-feature function `R^d -> R^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomSmoothPerturbation {
    dim: usize,
    frequencies: Vec<Vec<f64>>,
    phases: Vec<f64>,
    amplitudes: Vec<Vec<f64>>,
    lengthscale: f64,
    scale: f64,
}

impl Predictor for RandomSmoothPerturbation {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = alloc::vec![0.0; self.dim];
        for ((w, &phi), amp) in self.frequencies.iter().zip(&self.phases).zip(&self.amplitudes) {
            let arg: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() / self.lengthscale + phi;
            let c = libm::cos(arg) * self.scale;
            out.iter_mut().zip(amp).for_each(|(o, a)| *o += a * c);
        }
        out
    }
}

/// Axis-aligned box.
#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    /// `mean ± half_width_sd * sd` of `q(x_t)` per coordinate.
    pub fn around_marginal(dist: &DataDistribution, schedule: &NoiseSchedule, t: usize, half_width_sd: f64) -> Result<Self> {
        let (mean, var) = dist.marginal_qt(schedule, t)?.moments();
        let lower = mean.iter().zip(&var).map(|(m, v)| m - half_width_sd * libm::sqrt(*v)).collect();
        let upper = mean.iter().zip(&var).map(|(m, v)| m + half_width_sd * libm::sqrt(*v)).collect();
        Ok(Self { lower, upper })
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if self.lower.len() != dim || self.upper.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: self.lower.len(),
            });
        }
        if self.lower.iter().zip(&self.upper).any(|(l, u)| !(l < u) || !l.is_finite() || !u.is_finite()) {
            return Err(Error::InvalidParameter("bounds must be finite with lower < upper"));
        }
        Ok(())
    }
}

/// Default box half-width in marginal standard deviations.
pub const DEFAULT_BOX_HALF_WIDTH_SD: f64 = 4.0;

/// Default ridge term of the RBF normal equations.
pub const DEFAULT_RIDGE: f64 = 1e-8;

/// A function family and its resolution.
#[derive(Debug, Clone, PartialEq)]
pub enum FamilySpec {
    /// Piecewise-constant on a regular grid of cells.
    Grid {
        cells_per_axis: usize,
        bounds: Option<Bounds>,
    },
    /// Gaussian radial basis functions on a regular lattice of centers.
    Rbf {
        centers_per_axis: usize,
        bandwidth: Option<f64>,
        ridge: f64,
        bounds: Option<Bounds>,
    },
}

impl FamilySpec {
    pub fn grid(cells_per_axis: usize) -> Self {
        Self::Grid {
            cells_per_axis,
            bounds: None,
        }
    }

    pub fn rbf(centers_per_axis: usize) -> Self {
        Self::Rbf {
            centers_per_axis,
            bandwidth: None,
            ridge: DEFAULT_RIDGE,
            bounds: None,
        }
    }

    /// Number of scalar parameters for data of dimension `dim`.
    pub fn free_parameters(&self, dim: usize) -> usize {
        let per_axis = match self {
            Self::Grid { cells_per_axis, .. } => *cells_per_axis,
            Self::Rbf { centers_per_axis, .. } => *centers_per_axis,
        };
        per_axis.saturating_pow(dim as u32).saturating_mul(dim)
    }
}

/// Piecewise-constant predictor. Points outside the box take the value of
/// the nearest boundary cell.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPredictor {
    bounds: Bounds,
    cells: Vec<usize>,
    /// Row-major cell values, `dim` entries per cell.
    values: Vec<f64>,
    counts: Vec<u64>,
    /// Cells with no training samples, filled from the nearest populated cell.
    filled: Vec<bool>,
}

impl GridPredictor {
    /// Rebuilds a predictor from stored parts.
    pub fn from_parts(bounds: Bounds, cells: Vec<usize>, values: Vec<f64>, counts: Vec<u64>, filled: Vec<bool>) -> Result<Self> {
        let dim = cells.len();
        bounds.validate(dim)?;
        if cells.contains(&0) {
            return Err(Error::InvalidParameter("every axis needs at least one cell"));
        }
        let total: usize = cells.iter().product();
        if values.len() != total * dim {
            return Err(Error::LengthMismatch {
                what: "grid values",
                expected: total * dim,
                got: values.len(),
            });
        }
        if counts.len() != total || filled.len() != total {
            return Err(Error::LengthMismatch {
                what: "grid cell flags",
                expected: total,
                got: counts.len().min(filled.len()),
            });
        }
        Ok(Self {
            bounds,
            cells,
            values,
            counts,
            filled,
        })
    }

    pub fn bounds(&self) -> &Bounds {
        &self.bounds
    }

    pub fn cells(&self) -> &[usize] {
        &self.cells
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn filled(&self) -> &[bool] {
        &self.filled
    }

    pub fn num_cells(&self) -> usize {
        self.counts.len()
    }

    /// Row-major index of the cell containing `x`, clamped to the box.
    pub fn cell_index(&self, x: &[f64]) -> usize {
        let mut idx = 0;
        for (a, &n) in self.cells.iter().enumerate() {
            let lo = self.bounds.lower[a];
            let hi = self.bounds.upper[a];
            let pos = (x[a] - lo) / (hi - lo) * n as f64;
            let i = if pos.is_nan() || pos < 0.0 {
                0
            } else {
                (libm::floor(pos) as usize).min(n - 1)
            };
            idx = idx * n + i;
        }
        idx
    }

    /// Center of cell `index`.
    pub fn cell_center(&self, index: usize) -> Vec<f64> {
        let mut rem = index;
        let mut out = alloc::vec![0.0; self.cells.len()];
        for a in (0..self.cells.len()).rev() {
            let n = self.cells[a];
            let i = rem % n;
            rem /= n;
            let h = (self.bounds.upper[a] - self.bounds.lower[a]) / n as f64;
            out[a] = self.bounds.lower[a] + (i as f64 + 0.5) * h;
        }
        out
    }

    fn multi_index(&self, index: usize) -> Vec<usize> {
        let mut rem = index;
        let mut out = alloc::vec![0; self.cells.len()];
        for a in (0..self.cells.len()).rev() {
            out[a] = rem % self.cells[a];
            rem /= self.cells[a];
        }
        out
    }
}

impl Predictor for GridPredictor {
    fn dim(&self) -> usize {
        self.cells.len()
    }

    fn eval(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let c = self.cell_index(x);
        self.values[c * d..(c + 1) * d].to_vec()
    }

    fn extrapolated(&self, x: &[f64]) -> bool {
        self.filled[self.cell_index(x)]
    }
}

/// `f(x) = sum_j c_j exp(-|x - z_j|^2 / (2 l^2))` with vector coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct RbfPredictor {
    centers: Vec<Vec<f64>>,
    bandwidth: f64,
    coefficients: Vec<Vec<f64>>,
}

impl RbfPredictor {
    pub fn from_parts(centers: Vec<Vec<f64>>, bandwidth: f64, coefficients: Vec<Vec<f64>>) -> Result<Self> {
        if centers.is_empty() || centers.len() != coefficients.len() {
            return Err(Error::LengthMismatch {
                what: "rbf coefficients",
                expected: centers.len(),
                got: coefficients.len(),
            });
        }
        if !(bandwidth > 0.0) {
            return Err(Error::InvalidParameter("bandwidth must be positive"));
        }
        Ok(Self {
            centers,
            bandwidth,
            coefficients,
        })
    }

    pub fn centers(&self) -> &[Vec<f64>] {
        &self.centers
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn coefficients(&self) -> &[Vec<f64>] {
        &self.coefficients
    }

    fn features(&self, x: &[f64], out: &mut [f64]) {
        let inv = 1.0 / (2.0 * self.bandwidth * self.bandwidth);
        for (o, c) in out.iter_mut().zip(&self.centers) {
            let sq: f64 = c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
            *o = libm::exp(-sq * inv);
        }
    }
}

impl Predictor for RbfPredictor {
    fn dim(&self) -> usize {
        self.centers[0].len()
    }

    fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut phi = alloc::vec![0.0; self.centers.len()];
        self.features(x, &mut phi);
        let mut out = alloc::vec![0.0; self.dim()];
        for (p, c) in phi.iter().zip(&self.coefficients) {
            out.iter_mut().zip(c).for_each(|(o, v)| *o += p * v);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FittedFamily {
    Grid(GridPredictor),
    Rbf(RbfPredictor),
}

/// A fitted predictor together with the one timestep it serves.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorFunction {
    pub t: usize,
    pub family: FittedFamily,
}

impl Predictor for PredictorFunction {
    fn dim(&self) -> usize {
        match &self.family {
            FittedFamily::Grid(g) => g.dim(),
            FittedFamily::Rbf(r) => r.dim(),
        }
    }

    fn eval(&self, x: &[f64]) -> Vec<f64> {
        match &self.family {
            FittedFamily::Grid(g) => g.eval(x),
            FittedFamily::Rbf(r) => r.eval(x),
        }
    }

    fn extrapolated(&self, x: &[f64]) -> bool {
        match &self.family {
            FittedFamily::Grid(g) => g.extrapolated(x),
            FittedFamily::Rbf(_) => false,
        }
    }
}

/// Density-weighted RMSE of a predictor against the closed-form optimum.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleComparison {
    pub n_eval: usize,
    /// Over every evaluation point drawn from `q(x_t)`.
    pub rmse_all: f64,
    /// Over points with `q(x_t) >= 1%` of its maximum, outside filled cells.
    pub rmse_gate_region: f64,
    pub gate_region_count: usize,
    /// Over the five highest density deciles, outside filled cells.
    pub rmse_top_half: f64,
    /// Ten density deciles, lowest density first.
    pub deciles: Vec<DecileRmse>,
    /// Points left out of the gated figures because they fell in filled cells.
    pub excluded: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecileRmse {
    pub decile: usize,
    pub min_density: f64,
    pub count: usize,
    pub rmse: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StationaritySummary {
    pub n: usize,
    /// Mean of `|g(x_t)|` over draws from `q(x_t)`.
    pub mean_norm: f64,
    pub max_norm: f64,
    /// Mean of `q(x_t)` over the same draws.
    pub mean_density: f64,
}

impl StationaritySummary {
    /// `E_q[q |eps* - f|] / E_q[q]`: a density-weighted mean error in noise
    /// units, comparable across data scales.
    pub fn weighted_mean_error(&self) -> f64 {
        if self.mean_density > 0.0 {
            self.mean_norm / self.mean_density
        } else {
            0.0
        }
    }
}

/// Outcome of a least-squares fit.
#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub family: &'static str,
    pub t: usize,
    pub n_samples: usize,
    pub free_parameters: usize,
    /// Training-set mean squared error of the fitted function.
    pub final_loss: f64,
    /// Grid cells filled from a neighbour.
    pub flagged_cells: usize,
    /// Ridge term actually used (RBF only).
    pub ridge: Option<f64>,
    pub warnings: Vec<String>,
    pub oracle: Option<OracleComparison>,
    pub stationarity: Option<StationaritySummary>,
}

const CHUNK: usize = 4096;

/// Streams `n` training pairs `(x_t, eps)` without materializing them.
fn for_each_pair<R: Rng + ?Sized>(
    dist: &DataDistribution,
    schedule: &NoiseSchedule,
    t: usize,
    n: usize,
    rng: &mut R,
    mut visit: impl FnMut(&[f64], &[f64]),
) -> Result<()> {
    let mut left = n;
    while left > 0 {
        let take = left.min(CHUNK);
        for x0 in dist.sample(rng, take) {
            let (xt, eps) = schedule.forward_sample(&x0, t, rng)?;
            visit(&xt, &eps);
        }
        left -= take;
    }
    Ok(())
}

/// Fits `spec` to `n_samples` draws of `(x_t, eps)` at timestep `t`.
///
/// Grid: each cell takes the mean of `eps` over the draws that land in it,
/// which is the exact least-squares minimizer over piecewise-constant
/// functions. Empty cells copy the nearest populated cell and are flagged.
/// RBF: ridge-regularized normal equations; the ridge grows tenfold (with a
/// warning) while the system fails to factor.
pub fn fit_least_squares<R: Rng + ?Sized>(
    spec: &FamilySpec,
    dist: &DataDistribution,
    schedule: &NoiseSchedule,
    t: usize,
    n_samples: usize,
    rng: &mut R,
) -> Result<(PredictorFunction, FitReport)> {
    schedule.check_noisy_step(t)?;
    let d = dist.dim();
    let params = spec.free_parameters(d);
    let required = params.saturating_mul(10);
    if n_samples < required {
        return Err(Error::TooFewSamples {
            required,
            got: n_samples,
        });
    }
    match spec {
        FamilySpec::Grid { cells_per_axis, bounds } => {
            if *cells_per_axis == 0 {
                return Err(Error::InvalidParameter("cells_per_axis must be positive"));
            }
            let bounds = match bounds {
                Some(b) => b.clone(),
                None => Bounds::around_marginal(dist, schedule, t, DEFAULT_BOX_HALF_WIDTH_SD)?,
            };
            bounds.validate(d)?;
            fit_grid(bounds, *cells_per_axis, dist, schedule, t, n_samples, params, rng)
        }
        FamilySpec::Rbf {
            centers_per_axis,
            bandwidth,
            ridge,
            bounds,
        } => {
            if *centers_per_axis < 2 {
                return Err(Error::InvalidParameter("centers_per_axis must be at least 2"));
            }
            if !(*ridge >= 0.0) {
                return Err(Error::InvalidParameter("ridge must be nonnegative"));
            }
            let bounds = match bounds {
                Some(b) => b.clone(),
                None => Bounds::around_marginal(dist, schedule, t, DEFAULT_BOX_HALF_WIDTH_SD)?,
            };
            bounds.validate(d)?;
            fit_rbf(bounds, *centers_per_axis, *bandwidth, *ridge, dist, schedule, t, n_samples, params, rng)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn fit_grid<R: Rng + ?Sized>(
    bounds: Bounds,
    cells_per_axis: usize,
    dist: &DataDistribution,
    schedule: &NoiseSchedule,
    t: usize,
    n: usize,
    params: usize,
    rng: &mut R,
) -> Result<(PredictorFunction, FitReport)> {
    let d = dist.dim();
    let cells = alloc::vec![cells_per_axis; d];
    let total: usize = cells.iter().product();
    let mut grid = GridPredictor {
        bounds,
        cells,
        values: alloc::vec![0.0; total * d],
        counts: alloc::vec![0; total],
        filled: alloc::vec![false; total],
    };
    let mut sums = alloc::vec![0.0; total * d];
    let mut eps_sq = 0.0;
    for_each_pair(dist, schedule, t, n, rng, |xt, eps| {
        let c = grid.cell_index(xt);
        grid.counts[c] += 1;
        for a in 0..d {
            sums[c * d + a] += eps[a];
        }
        eps_sq += stats::norm_sq(eps);
    })?;

    let populated: Vec<usize> = (0..total).filter(|&c| grid.counts[c] > 0).collect();
    if populated.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let mut explained = 0.0;
    for &c in &populated {
        let k = grid.counts[c] as f64;
        for a in 0..d {
            let m = sums[c * d + a] / k;
            grid.values[c * d + a] = m;
            explained += k * m * m;
        }
    }
    let populated_idx: Vec<Vec<usize>> = populated.iter().map(|&c| grid.multi_index(c)).collect();
    let mut flagged = 0;
    for c in 0..total {
        if grid.counts[c] > 0 {
            continue;
        }
        let here = grid.multi_index(c);
        let nearest = populated
            .iter()
            .zip(&populated_idx)
            .min_by_key(|(_, idx)| {
                idx.iter()
                    .zip(&here)
                    .map(|(&a, &b)| {
                        let diff = a.abs_diff(b);
                        diff * diff
                    })
                    .sum::<usize>()
            })
            .map(|(&p, _)| p)
            .expect("at least one populated cell");
        for a in 0..d {
            grid.values[c * d + a] = grid.values[nearest * d + a];
        }
        grid.filled[c] = true;
        flagged += 1;
    }
    let mut warnings = Vec::new();
    if flagged > 0 {
        warnings.push(format!("{flagged} of {total} grid cells had no samples and were filled from a neighbour"));
    }
    let report = FitReport {
        family: "grid",
        t,
        n_samples: n,
        free_parameters: params,
        final_loss: ((eps_sq - explained) / n as f64).max(0.0),
        flagged_cells: flagged,
        ridge: None,
        warnings,
        oracle: None,
        stationarity: None,
    };
    Ok((
        PredictorFunction {
            t,
            family: FittedFamily::Grid(grid),
        },
        report,
    ))
}

#[allow(clippy::too_many_arguments)]
fn fit_rbf<R: Rng + ?Sized>(
    bounds: Bounds,
    centers_per_axis: usize,
    bandwidth: Option<f64>,
    ridge: f64,
    dist: &DataDistribution,
    schedule: &NoiseSchedule,
    t: usize,
    n: usize,
    params: usize,
    rng: &mut R,
) -> Result<(PredictorFunction, FitReport)> {
    let d = dist.dim();
    let m = centers_per_axis.pow(d as u32);
    let mut centers = Vec::with_capacity(m);
    for flat in 0..m {
        let mut rem = flat;
        let mut c = alloc::vec![0.0; d];
        for a in (0..d).rev() {
            let i = rem % centers_per_axis;
            rem /= centers_per_axis;
            let span = bounds.upper[a] - bounds.lower[a];
            c[a] = bounds.lower[a] + span * i as f64 / (centers_per_axis - 1) as f64;
        }
        centers.push(c);
    }
    let spacing = bounds
        .lower
        .iter()
        .zip(&bounds.upper)
        .map(|(l, u)| (u - l) / (centers_per_axis - 1) as f64)
        .fold(f64::INFINITY, f64::min);
    let bandwidth = bandwidth.unwrap_or(spacing);
    if !(bandwidth > 0.0) {
        return Err(Error::InvalidParameter("bandwidth must be positive"));
    }
    let mut model = RbfPredictor {
        centers,
        bandwidth,
        coefficients: alloc::vec![alloc::vec![0.0; d]; m],
    };

    let mut gram = DMatrix::<f64>::zeros(m, m);
    let mut rhs = DMatrix::<f64>::zeros(m, d);
    let mut eps_sq = 0.0;
    let mut phi = alloc::vec![0.0; m];
    for_each_pair(dist, schedule, t, n, rng, |xt, eps| {
        model.features(xt, &mut phi);
        for i in 0..m {
            if phi[i] < 1e-300 {
                continue;
            }
            for j in i..m {
                gram[(i, j)] += phi[i] * phi[j];
            }
            for a in 0..d {
                rhs[(i, a)] += phi[i] * eps[a];
            }
        }
        eps_sq += stats::norm_sq(eps);
    })?;
    for i in 0..m {
        for j in 0..i {
            gram[(i, j)] = gram[(j, i)];
        }
    }
    let inv_n = 1.0 / n as f64;
    gram *= inv_n;
    rhs *= inv_n;

    let mut warnings = Vec::new();
    let mut lambda = ridge;
    let mut attempts = 0;
    let coeffs = loop {
        let mut system = gram.clone();
        for i in 0..m {
            system[(i, i)] += lambda;
        }
        if let Some(chol) = Cholesky::new(system) {
            let sol = chol.solve(&rhs);
            if sol.iter().all(|v| v.is_finite()) {
                break sol;
            }
        }
        attempts += 1;
        let next = if lambda > 0.0 { lambda * 10.0 } else { 1e-12 };
        warnings.push(format!("normal equations singular at ridge {lambda:e}; retrying with {next:e}"));
        lambda = next;
        if attempts > 20 {
            return Err(Error::InvalidParameter("normal equations stayed singular"));
        }
    };
    for (j, c) in model.coefficients.iter_mut().enumerate() {
        for a in 0..d {
            c[a] = coeffs[(j, a)];
        }
    }
    // Training MSE: |eps|^2 - 2 tr(C^T B) + tr(C^T G C), per sample.
    let fit_term = (coeffs.transpose() * &gram * &coeffs).trace();
    let cross = (coeffs.transpose() * &rhs).trace();
    let final_loss = (eps_sq * inv_n - 2.0 * cross + fit_term).max(0.0);

    Ok((
        PredictorFunction {
            t,
            family: FittedFamily::Rbf(model),
        },
        FitReport {
            family: "rbf",
            t,
            n_samples: n,
            free_parameters: params,
            final_loss,
            flagged_cells: 0,
            ridge: Some(lambda),
            warnings,
            oracle: None,
            stationarity: None,
        },
    ))
}

/// Relative density threshold of the RMSE gate region.
pub const GATE_REGION_FRACTION: f64 = 0.01;

/// RMSE of `f` against the closed-form optimum at `n_eval` points drawn from
/// `q(x_t)`, overall, on the gate region and by density decile.
pub fn compare_to_oracle<P: Predictor + ?Sized, R: Rng + ?Sized>(
    f: &P,
    dist: &DataDistribution,
    schedule: &NoiseSchedule,
    t: usize,
    n_eval: usize,
    rng: &mut R,
) -> Result<OracleComparison> {
    if n_eval < 1000 {
        return Err(Error::TooFewSamples {
            required: 1000,
            got: n_eval,
        });
    }
    if f.dim() != dist.dim() {
        return Err(Error::DimensionMismatch {
            expected: dist.dim(),
            got: f.dim(),
        });
    }
    let marginal = dist.marginal_qt(schedule, t)?;
    let ab = schedule.alpha_bar(t);

    // (density, squared error, extrapolated)
    let mut rows: Vec<(f64, f64, bool)> = Vec::with_capacity(n_eval);
    for x0 in dist.sample(rng, n_eval) {
        let (xt, _) = schedule.forward_sample(&x0, t, rng)?;
        let exact = oracle::epsilon_star_unchecked(dist, ab, &xt);
        let pred = f.eval(&xt);
        let err: f64 = exact.iter().zip(&pred).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        rows.push((libm::exp(marginal.log_density(&xt)?), err, f.extrapolated(&xt)));
    }
    let mut peak = rows.iter().map(|r| r.0).fold(0.0, f64::max);
    for k in 0..marginal.num_components() {
        peak = peak.max(libm::exp(marginal.log_density(marginal.mean(k))?));
    }

    let rmse = |it: &mut dyn Iterator<Item = &(f64, f64, bool)>| -> (f64, usize) {
        let (mut s, mut c) = (0.0, 0usize);
        for r in it {
            s += r.1;
            c += 1;
        }
        (if c > 0 { libm::sqrt(s / c as f64) } else { 0.0 }, c)
    };

    let (rmse_all, _) = rmse(&mut rows.iter());
    let threshold = GATE_REGION_FRACTION * peak;
    let (rmse_gate_region, gate_region_count) = rmse(&mut rows.iter().filter(|r| r.0 >= threshold && !r.2));
    let excluded = rows.iter().filter(|r| r.2).count();

    rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut deciles = Vec::with_capacity(10);
    for k in 0..10 {
        let lo = k * n_eval / 10;
        let hi = (k + 1) * n_eval / 10;
        let slice = &rows[lo..hi];
        let (r, count) = rmse(&mut slice.iter().filter(|r| !r.2));
        deciles.push(DecileRmse {
            decile: k + 1,
            min_density: slice.first().map_or(0.0, |r| r.0),
            count,
            rmse: r,
        });
    }
    let (rmse_top_half, _) = rmse(&mut rows[n_eval / 2..].iter().filter(|r| !r.2));

    Ok(OracleComparison {
        n_eval,
        rmse_all,
        rmse_gate_region,
        gate_region_count,
        rmse_top_half,
        deciles,
        excluded,
    })
}

/// `g(x_t) = q(x_t) (eps*(x_t) - f(x_t))`, the integrand of the first
/// variation of the objective. Zero wherever `f` is optimal.
pub fn stationarity_residual<P: Predictor + ?Sized>(
    f: &P,
    dist: &DataDistribution,
    schedule: &NoiseSchedule,
    t: usize,
    xt: &[f64],
) -> Result<Vec<f64>> {
    let exact = oracle::epsilon_star(dist, schedule, t, xt)?;
    let density = libm::exp(dist.marginal_qt(schedule, t)?.log_density(xt)?);
    let pred = f.eval(xt);
    Ok(exact.iter().zip(&pred).map(|(e, p)| density * (e - p)).collect())
}

/// Mean and max of `|g(x_t)|` over `n` points drawn from `q(x_t)`.
pub fn stationarity_summary<P: Predictor + ?Sized, R: Rng + ?Sized>(
    f: &P,
    dist: &DataDistribution,
    schedule: &NoiseSchedule,
    t: usize,
    n: usize,
    rng: &mut R,
) -> Result<StationaritySummary> {
    if n == 0 {
        return Err(Error::TooFewSamples { required: 1, got: 0 });
    }
    let marginal = dist.marginal_qt(schedule, t)?;
    let ab = schedule.alpha_bar(t);
    let (mut sum, mut max, mut sum_q) = (0.0, 0.0_f64, 0.0);
    for x0 in dist.sample(rng, n) {
        let (xt, _) = schedule.forward_sample(&x0, t, rng)?;
        let density = libm::exp(marginal.log_density(&xt)?);
        let exact = oracle::epsilon_star_unchecked(dist, ab, &xt);
        let pred = f.eval(&xt);
        let norm = density * libm::sqrt(exact.iter().zip(&pred).map(|(a, b)| (a - b) * (a - b)).sum::<f64>());
        sum += norm;
        sum_q += density;
        max = max.max(norm);
    }
    Ok(StationaritySummary {
        n,
        mean_norm: sum / n as f64,
        max_norm: max,
        mean_density: sum_q / n as f64,
    })
}

/// Relative size below which the fitted linear coefficient is rounding.
pub const GATEAUX_ROUNDING: f64 = 1e-12;

/// Quadratic fit of the perturbed objective `F_h(s) = E|eps - (f + s h)(x_t)|^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct GateauxReport {
    pub s_values: Vec<f64>,
    /// Monte Carlo `F_h(s)` at each `s`, from common random numbers.
    pub objective: Vec<f64>,
    /// Constant term, approximately `F_h(0)`.
    pub constant: f64,
    /// Linear term, approximately `F_h'(0)`.
    pub linear: f64,
    pub quadratic: f64,
    pub linear_stderr: f64,
    pub quadratic_stderr: f64,
    pub n: usize,
}

impl GateauxReport {
    /// `|linear| <= z * linear_stderr`, plus a rounding floor for the case
    /// where the residual vanishes sample by sample (point-mass data).
    pub fn linear_is_zero(&self, z: f64) -> bool {
        self.linear.abs() <= z * self.linear_stderr + self.rounding_floor()
    }

    fn rounding_floor(&self) -> f64 {
        GATEAUX_ROUNDING * (self.constant.abs() + self.quadratic.abs())
    }

    /// `linear / linear_stderr`, taken as zero when the linear coefficient
    /// is below the rounding floor.
    pub fn linear_z_score(&self) -> f64 {
        if self.linear.abs() <= self.rounding_floor() {
            0.0
        } else if self.linear_stderr > 0.0 {
            self.linear / self.linear_stderr
        } else {
            f64::INFINITY
        }
    }
}

/// Estimates `F_h(s)` on a symmetric set of `s` values with the same draws
/// for every `s`, and fits `F_h(s) ≈ a + b s + c s^2` by least squares.
///
/// The fit is linear in the per-sample objectives, so each coefficient is a
/// sample mean of per-draw coefficients; the standard errors come from
/// their spread.
#[allow(clippy::too_many_arguments)]
pub fn gateaux_derivative_check<P, H, R>(
    f: &P,
    h: &H,
    dist: &DataDistribution,
    schedule: &NoiseSchedule,
    t: usize,
    s_values: &[f64],
    n: usize,
    rng: &mut R,
) -> Result<GateauxReport>
where
    P: Predictor + ?Sized,
    H: Predictor + ?Sized,
    R: Rng + ?Sized,
{
    schedule.check_noisy_step(t)?;
    if n < 2 {
        return Err(Error::TooFewSamples { required: 2, got: n });
    }
    if s_values.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidParameter("perturbation sizes must be finite"));
    }
    let symmetric = s_values
        .iter()
        .all(|&s| s_values.iter().any(|&o| (o + s).abs() <= 1e-12 * (1.0 + s.abs())));
    let mut distinct: Vec<f64> = s_values.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if !symmetric || distinct.len() < 3 {
        return Err(Error::InvalidParameter("s_values must be symmetric around 0 with at least 3 distinct values"));
    }
    if f.dim() != dist.dim() || h.dim() != dist.dim() {
        return Err(Error::DimensionMismatch {
            expected: dist.dim(),
            got: f.dim().min(h.dim()),
        });
    }

    let m = s_values.len();
    let design = DMatrix::from_fn(m, 3, |i, j| libm::pow(s_values[i], j as f64));
    let normal = design.transpose() * &design;
    let projection = normal
        .try_inverse()
        .ok_or(Error::InvalidParameter("s_values do not determine a quadratic"))?
        * design.transpose();

    let mut objective = alloc::vec![0.0; m];
    // Welford accumulators for the three per-draw coefficients.
    let mut mean = [0.0; 3];
    let mut m2 = [0.0; 3];
    let mut count = 0usize;
    let mut per_s = alloc::vec![0.0; m];
    for_each_pair(dist, schedule, t, n, rng, |xt, eps| {
        let base = f.eval(xt);
        let dir = h.eval(xt);
        for (i, &s) in s_values.iter().enumerate() {
            per_s[i] = eps
                .iter()
                .zip(&base)
                .zip(&dir)
                .map(|((e, b), d)| {
                    let r = e - b - s * d;
                    r * r
                })
                .sum();
            objective[i] += per_s[i];
        }
        count += 1;
        for k in 0..3 {
            let coef: f64 = (0..m).map(|i| projection[(k, i)] * per_s[i]).sum();
            let delta = coef - mean[k];
            mean[k] += delta / count as f64;
            m2[k] += delta * (coef - mean[k]);
        }
    })?;
    objective.iter_mut().for_each(|v| *v /= n as f64);
    let se = |k: usize| libm::sqrt(m2[k] / (n - 1) as f64 / n as f64);

    Ok(GateauxReport {
        s_values: s_values.to_vec(),
        objective,
        constant: mean[0],
        linear: mean[1],
        quadratic: mean[2],
        linear_stderr: se(1),
        quadratic_stderr: se(2),
        n,
    })
}

/// Symmetric perturbation sizes `{±0.2, ±0.1, ±0.05}`.
pub const DEFAULT_S_VALUES: [f64; 6] = [-0.2, -0.1, -0.05, 0.05, 0.1, 0.2];
