//! Ancestral reverse sampling driven by a noise model, and moment and
//! distance checks of the resulting samples against the data law.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use rand_distr::{Distribution, StandardNormal};

use crate::distributions::DataDistribution;
use crate::error::{Error, Result};
use crate::oracle;
use crate::rng::derived_rng;
use crate::schedule::NoiseSchedule;
use crate::stats;
use crate::trainer::{Predictor, PredictorFunction};

/// Reverse-step variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VarianceMode {
    /// `sigma_t^2 = beta_t`.
    #[default]
    Beta,
    /// `sigma_t^2 = (1 - abar_{t-1}) / (1 - abar_t) * beta_t`.
    BetaTilde,
}

impl VarianceMode {
    pub fn sigma(self, schedule: &NoiseSchedule, t: usize) -> f64 {
        match self {
            Self::Beta => libm::sqrt(schedule.beta(t)),
            Self::BetaTilde => libm::sqrt(schedule.beta_tilde(t)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub variance: VarianceMode,
    pub n_samples: usize,
    pub seed: u64,
}

/// Domain tag separating sampler streams from other derived streams.
const SAMPLER_DOMAIN: u64 = 0x5a4d_504c;

/// A noise prediction for every timestep of a schedule.
pub trait NoiseModel {
    fn dim(&self) -> usize;
    fn predict(&self, xt: &[f64], t: usize) -> Result<Vec<f64>>;
}

/// The closed-form optimum at every timestep.
#[derive(Debug, Clone, Copy)]
pub struct OracleModel<'a> {
    pub dist: &'a DataDistribution,
    pub schedule: &'a NoiseSchedule,
}

impl NoiseModel for OracleModel<'_> {
    fn dim(&self) -> usize {
        self.dist.dim()
    }

    fn predict(&self, xt: &[f64], t: usize) -> Result<Vec<f64>> {
        oracle::epsilon_star(self.dist, self.schedule, t, xt)
    }
}

/// Predicts zero noise everywhere.
#[derive(Debug, Clone, Copy)]
pub struct ZeroModel {
    pub dim: usize,
}

impl NoiseModel for ZeroModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn predict(&self, _xt: &[f64], _t: usize) -> Result<Vec<f64>> {
        Ok(alloc::vec![0.0; self.dim])
    }
}

/// One fitted predictor per timestep.
#[derive(Debug, Clone, Default)]
pub struct PredictorBank {
    dim: usize,
    predictors: BTreeMap<usize, PredictorFunction>,
}

impl PredictorBank {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            predictors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, f: PredictorFunction) -> Result<()> {
        if f.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: f.dim(),
            });
        }
        self.predictors.insert(f.t, f);
        Ok(())
    }

    pub fn get(&self, t: usize) -> Option<&PredictorFunction> {
        self.predictors.get(&t)
    }

    pub fn len(&self) -> usize {
        self.predictors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predictors.is_empty()
    }

    /// First timestep in `1..=steps` with no predictor.
    pub fn first_missing(&self, steps: usize) -> Option<usize> {
        (1..=steps).find(|t| !self.predictors.contains_key(t))
    }
}

impl NoiseModel for PredictorBank {
    fn dim(&self) -> usize {
        self.dim
    }

    fn predict(&self, xt: &[f64], t: usize) -> Result<Vec<f64>> {
        self.predictors.get(&t).map(|f| f.eval(xt)).ok_or(Error::MissingPredictor(t))
    }
}

/// Runs one reverse chain from `x_T ~ N(0, I)` down to `x_0`.
///
/// `x_{t-1} = (x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t) + sigma_t z`
/// with `z = 0` on the last step. Chain `i` of seed `s` is reproducible on
/// its own.
pub fn sample_chain<M: NoiseModel + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    variance: VarianceMode,
    seed: u64,
    chain: u64,
) -> Result<Vec<f64>> {
    let mut rng = derived_rng(seed, SAMPLER_DOMAIN, chain);
    let d = model.dim();
    let mut x: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
    for t in (1..=schedule.num_steps()).rev() {
        let eps = model.predict(&x, t)?;
        if eps.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: eps.len() });
        }
        if eps.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinitePrediction { t, xt: x });
        }
        let (_, noise) = schedule.signal_noise(t)?;
        let coef = schedule.beta(t) / noise;
        let inv_sqrt_alpha = 1.0 / libm::sqrt(schedule.alpha(t));
        let sigma = if t > 1 { variance.sigma(schedule, t) } else { 0.0 };
        for (xi, ei) in x.iter_mut().zip(&eps) {
            let z: f64 = if t > 1 { StandardNormal.sample(&mut rng) } else { 0.0 };
            *xi = inv_sqrt_alpha * (*xi - coef * ei) + sigma * z;
        }
    }
    Ok(x)
}

/// `config.n_samples` independent chains, in chain order.
pub fn ancestral_sample<M: NoiseModel + ?Sized>(model: &M, schedule: &NoiseSchedule, config: &SamplerConfig) -> Result<Vec<Vec<f64>>> {
    (0..config.n_samples as u64)
        .map(|i| sample_chain(model, schedule, config.variance, config.seed, i))
        .collect()
}

/// Sample statistics against the data law.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchMetrics {
    pub n: usize,
    pub sample_mean: Vec<f64>,
    pub target_mean: Vec<f64>,
    /// Sample mean minus target mean.
    pub mean_error: Vec<f64>,
    pub mean_stderr: Vec<f64>,
    pub sample_variance: Vec<f64>,
    pub target_variance: Vec<f64>,
    pub variance_error: Vec<f64>,
    /// 1-D Wasserstein-1 distance to the target, if `d == 1`.
    pub wasserstein1: Option<f64>,
    /// Fraction of samples nearest each atom, for discrete data.
    pub assignment: Option<Vec<f64>>,
    pub target_weights: Option<Vec<f64>>,
}

/// Compares samples with the data law. W1 is measured against target
/// quantiles at the midpoints `(i + 1/2) / n`.
pub fn distribution_match_report(samples: &[Vec<f64>], dist: &DataDistribution) -> Result<MatchMetrics> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::TooFewSamples { required: 2, got: n });
    }
    let d = dist.dim();
    if let Some(bad) = samples.iter().find(|s| s.len() != d) {
        return Err(Error::DimensionMismatch { expected: d, got: bad.len() });
    }
    let (target_mean, target_variance) = dist.moments();
    let mut sample_mean = Vec::with_capacity(d);
    let mut sample_variance = Vec::with_capacity(d);
    let mut mean_stderr = Vec::with_capacity(d);
    for a in 0..d {
        let col: Vec<f64> = samples.iter().map(|s| s[a]).collect();
        sample_mean.push(stats::mean(&col));
        sample_variance.push(stats::variance(&col));
        mean_stderr.push(stats::std_error(&col));
    }
    let mean_error = sample_mean.iter().zip(&target_mean).map(|(a, b)| a - b).collect();
    let variance_error = sample_variance.iter().zip(&target_variance).map(|(a, b)| a - b).collect();

    let wasserstein1 = if d == 1 {
        let mut sorted: Vec<f64> = samples.iter().map(|s| s[0]).collect();
        sorted.sort_by(f64::total_cmp);
        let mut total = 0.0;
        for (i, x) in sorted.iter().enumerate() {
            let q = dist.quantile_1d((i as f64 + 0.5) / n as f64)?;
            total += (x - q).abs();
        }
        Some(total / n as f64)
    } else {
        None
    };

    let (assignment, target_weights) = match dist {
        DataDistribution::Discrete(p) => {
            let mut counts = alloc::vec![0usize; p.points().len()];
            for s in samples {
                let nearest = p
                    .points()
                    .iter()
                    .enumerate()
                    .map(|(k, c)| (k, c.iter().zip(s).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()))
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .map(|(k, _)| k)
                    .expect("nonempty point set");
                counts[nearest] += 1;
            }
            (
                Some(counts.iter().map(|&c| c as f64 / n as f64).collect()),
                Some(p.weights().to_vec()),
            )
        }
        DataDistribution::Mixture(_) => (None, None),
    };

    Ok(MatchMetrics {
        n,
        sample_mean,
        target_mean,
        mean_error,
        mean_stderr,
        sample_variance,
        target_variance,
        variance_error,
        wasserstein1,
        assignment,
        target_weights,
    })
}

/// Acceptance thresholds for [`MatchMetrics`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchGate {
    /// Mean error floor; the bound is `max(mean_abs, mean_se_mult * se)`.
    pub mean_abs: f64,
    pub mean_se_mult: f64,
    pub wasserstein1: f64,
    /// Assignment frequencies within `assignment_se_mult * sqrt(w (1 - w) / n)`.
    pub assignment_se_mult: f64,
    /// Variance error within `variance_rel * max(var, variance_floor)`.
    pub variance_rel: f64,
    pub variance_floor: f64,
}

impl Default for MatchGate {
    fn default() -> Self {
        Self {
            mean_abs: 0.02,
            mean_se_mult: 4.0,
            wasserstein1: 0.1,
            assignment_se_mult: 4.0,
            variance_rel: 0.1,
            variance_floor: 0.1,
        }
    }
}

/// Which checks of a [`MatchGate`] passed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatchOutcome {
    pub mean: bool,
    pub variance: bool,
    pub wasserstein1: bool,
    pub assignment: bool,
}

impl MatchOutcome {
    pub fn pass(&self) -> bool {
        self.mean && self.variance && self.wasserstein1 && self.assignment
    }
}

impl MatchGate {
    pub fn evaluate(&self, m: &MatchMetrics) -> MatchOutcome {
        let mean = m
            .mean_error
            .iter()
            .zip(&m.mean_stderr)
            .all(|(e, se)| e.abs() <= self.mean_abs.max(self.mean_se_mult * se));
        let variance = m
            .variance_error
            .iter()
            .zip(&m.target_variance)
            .all(|(e, v)| e.abs() <= self.variance_rel * v.max(self.variance_floor));
        let wasserstein1 = m.wasserstein1.is_none_or(|w| w <= self.wasserstein1);
        let assignment = match (&m.assignment, &m.target_weights) {
            (Some(freq), Some(w)) => freq.iter().zip(w).all(|(f, w)| {
                let band = self.assignment_se_mult * libm::sqrt(w * (1.0 - w) / m.n as f64);
                (f - w).abs() <= band.max(1e-12)
            }),
            _ => true,
        };
        MatchOutcome {
            mean,
            variance,
            wasserstein1,
            assignment,
        }
    }
}
