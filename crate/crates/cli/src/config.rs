//! JSON experiment configuration.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use epsoracle_core::sampler::VarianceMode;
use epsoracle_core::{DMatrix, DataDistribution, GaussianMixtureDensity, NoiseSchedule, PointSet};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ScheduleSpec {
    Linear {
        #[serde(rename = "T")]
        steps: usize,
        beta_start: f64,
        beta_end: f64,
    },
    Explicit {
        betas: Vec<f64>,
    },
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        let s = match self {
            Self::Linear {
                steps,
                beta_start,
                beta_end,
            } => NoiseSchedule::linear(*steps, *beta_start, *beta_end),
            Self::Explicit { betas } => NoiseSchedule::from_betas(betas.clone()),
        };
        s.context("invalid schedule")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum DistributionSpec {
    /// Weighted atoms; uniform weights when omitted.
    Discrete {
        points: Vec<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        weights: Option<Vec<f64>>,
    },
    /// Gaussian mixture with full covariances given as nested rows.
    Gmm {
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        covs: Vec<Vec<Vec<f64>>>,
    },
}

impl DistributionSpec {
    pub fn build(&self) -> Result<DataDistribution> {
        let dist = match self {
            Self::Discrete { points, weights } => match weights {
                Some(w) => PointSet::new(points.clone(), w.clone()),
                None => PointSet::uniform(points.clone()),
            }
            .map(DataDistribution::from),
            Self::Gmm { weights, means, covs } => {
                let mut mats = Vec::with_capacity(covs.len());
                for (k, rows) in covs.iter().enumerate() {
                    let n = rows.len();
                    ensure!(rows.iter().all(|r| r.len() == n), "covariance {k} is not square");
                    mats.push(DMatrix::from_row_iterator(n, n, rows.iter().flatten().copied()));
                }
                GaussianMixtureDensity::new(weights.clone(), means.clone(), mats).map(DataDistribution::from)
            }
        };
        dist.context("invalid distribution")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSpec {
    /// Probes drawn from `q(x_t)` per timestep in the identity sweep.
    pub per_timestep: usize,
    /// Adds one probe per marginal component at 6 standard deviations.
    pub far_tail: bool,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        Self {
            per_timestep: 100,
            far_tail: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    /// Direct vs score path, `min(abs, rel)` in the max norm.
    pub identity: f64,
    /// Closed form vs quadrature; defaults to 1e-6 in 1D and 1e-4 in 2D.
    pub quadrature: Option<f64>,
    /// Analytic score vs central differences.
    pub finite_difference: f64,
    /// Monte Carlo agreement in standard errors.
    pub monte_carlo_z: f64,
    /// Fraction of Monte Carlo probes that must agree.
    pub monte_carlo_pass_fraction: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            identity: 1e-8,
            quadrature: None,
            finite_difference: 1e-5,
            monte_carlo_z: 4.0,
            monte_carlo_pass_fraction: 0.99,
        }
    }
}

impl Tolerances {
    pub fn quadrature_for(&self, dim: usize) -> f64 {
        self.quadrature.unwrap_or(if dim <= 1 { 1e-6 } else { 1e-4 })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonteCarloSpec {
    pub samples: usize,
    /// Probes per timestep that also get a Monte Carlo estimate.
    pub probes: usize,
}

impl Default for MonteCarloSpec {
    fn default() -> Self {
        Self {
            samples: 100_000,
            probes: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadratureSpec {
    /// Probes per timestep in the theorem suite.
    pub probes: usize,
    /// Odd; defaults to 2049 in 1D and 257 in 2D.
    pub nodes_per_axis: Option<usize>,
    pub half_width_sd: f64,
    /// Largest accepted change between the grid and its halved subgrid.
    pub refinement_tolerance: f64,
    /// Central-difference step for the score check.
    pub finite_difference_step: f64,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        Self {
            probes: 20,
            nodes_per_axis: None,
            half_width_sd: 8.0,
            refinement_tolerance: 1e-8,
            finite_difference_step: 1e-5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Grid,
    Rbf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateauxSpec {
    pub directions: usize,
    pub samples: usize,
    pub s_values: Vec<f64>,
    pub features: usize,
    pub lengthscale: f64,
    /// Linear coefficient counts as zero within this many standard errors.
    pub z: f64,
    /// Directions that must pass.
    pub min_pass: usize,
}

impl Default for GateauxSpec {
    fn default() -> Self {
        Self {
            directions: 10,
            samples: 20_000,
            s_values: epsoracle_core::trainer::DEFAULT_S_VALUES.to_vec(),
            features: 8,
            lengthscale: 1.0,
            z: 3.0,
            min_pass: 9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSpec {
    /// Defaults to the experiment timesteps strictly between 1 and T.
    pub timesteps: Option<Vec<usize>>,
    pub family: Family,
    /// Grid cells or RBF centers per axis.
    pub resolution: usize,
    pub bandwidth: Option<f64>,
    pub ridge: f64,
    pub n_samples: usize,
    pub n_eval: usize,
    /// RMSE vs the oracle on the region where `q(x_t) >= 1%` of its max.
    pub rmse_gate: f64,
    /// Density-weighted mean stationarity residual, in noise units.
    pub stationarity_gate: f64,
    pub stationarity_samples: usize,
    pub gateaux: GateauxSpec,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            timesteps: None,
            family: Family::Grid,
            resolution: 200,
            bandwidth: None,
            ridge: epsoracle_core::trainer::DEFAULT_RIDGE,
            n_samples: 200_000,
            n_eval: 20_000,
            rmse_gate: 0.05,
            stationarity_gate: 0.05,
            stationarity_samples: 5_000,
            gateaux: GateauxSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variance {
    Beta,
    BetaTilde,
}

impl From<Variance> for VarianceMode {
    fn from(v: Variance) -> Self {
        match v {
            Variance::Beta => Self::Beta,
            Variance::BetaTilde => Self::BetaTilde,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictorSource {
    Oracle,
    /// Predictors written by `train` for every timestep of the schedule.
    Fitted,
    /// Negative control.
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSpec {
    pub n_samples: usize,
    pub variance: Variance,
    pub predictor: PredictorSource,
    /// Directory of fitted predictors; defaults to `<out>/predictors`.
    pub predictor_dir: Option<PathBuf>,
    pub mean_abs: f64,
    pub mean_se_mult: f64,
    pub wasserstein1: f64,
    pub assignment_se_mult: f64,
    pub variance_rel: f64,
    pub variance_floor: f64,
}

impl Default for SampleSpec {
    fn default() -> Self {
        let g = epsoracle_core::sampler::MatchGate::default();
        Self {
            n_samples: 10_000,
            variance: Variance::Beta,
            predictor: PredictorSource::Oracle,
            predictor_dir: None,
            mean_abs: g.mean_abs,
            mean_se_mult: g.mean_se_mult,
            wasserstein1: g.wasserstein1,
            assignment_se_mult: g.assignment_se_mult,
            variance_rel: g.variance_rel,
            variance_floor: g.variance_floor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub schedule: ScheduleSpec,
    pub distribution: DistributionSpec,
    /// Defaults to `{1, T/4, T/2, 3T/4, T}`.
    #[serde(default)]
    pub timesteps: Option<Vec<usize>>,
    #[serde(default)]
    pub probes: ProbeSpec,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub monte_carlo: MonteCarloSpec,
    #[serde(default)]
    pub quadrature: QuadratureSpec,
    #[serde(default)]
    pub train: TrainSpec,
    #[serde(default)]
    pub sample: SampleSpec,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

/// A parsed config with its schedule and distribution built.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub schedule: NoiseSchedule,
    pub dist: DataDistribution,
    pub timesteps: Vec<usize>,
    pub train_timesteps: Vec<usize>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).context("malformed config")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("in {}", path.display()))
    }

    /// SHA-256 of the canonical JSON form, excluding the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = None;
        let canonical = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&canonical))
    }

    pub fn build(self) -> Result<Experiment> {
        let schedule = self.schedule.build()?;
        let dist = self.distribution.build()?;
        let steps = schedule.num_steps();
        let timesteps = match &self.timesteps {
            Some(ts) => ts.clone(),
            None => default_timesteps(steps),
        };
        check_timesteps(&timesteps, steps, "timesteps")?;
        let train_timesteps = match &self.train.timesteps {
            Some(ts) => ts.clone(),
            None => {
                let inner: Vec<usize> = timesteps.iter().copied().filter(|&t| t > 1 && t < steps).collect();
                if inner.is_empty() {
                    timesteps.clone()
                } else {
                    inner
                }
            }
        };
        check_timesteps(&train_timesteps, steps, "train.timesteps")?;

        let t = &self.tolerances;
        for (name, v) in [
            ("tolerances.identity", t.identity),
            ("tolerances.finite_difference", t.finite_difference),
            ("tolerances.monte_carlo_z", t.monte_carlo_z),
        ] {
            ensure!(v.is_finite() && v >= 0.0, "{name} must be a nonnegative number");
        }
        if let Some(q) = t.quadrature {
            ensure!(q.is_finite() && q >= 0.0, "tolerances.quadrature must be a nonnegative number");
        }
        ensure!(
            (0.0..=1.0).contains(&t.monte_carlo_pass_fraction),
            "tolerances.monte_carlo_pass_fraction must lie in [0, 1]"
        );
        ensure!(self.probes.per_timestep >= 1, "probes.per_timestep must be at least 1");
        ensure!(self.quadrature.probes >= 1, "quadrature.probes must be at least 1");
        ensure!(
            self.quadrature.finite_difference_step > 0.0,
            "quadrature.finite_difference_step must be positive"
        );
        if let Some(n) = self.quadrature.nodes_per_axis {
            ensure!(n >= 3 && n % 2 == 1, "quadrature.nodes_per_axis must be odd and at least 3");
        }
        ensure!(self.train.resolution >= 1, "train.resolution must be positive");
        ensure!(self.train.n_eval >= 1000, "train.n_eval must be at least 1000");
        ensure!(self.sample.n_samples >= 2, "sample.n_samples must be at least 2");
        let g = &self.train.gateaux;
        ensure!(g.directions >= 1 && g.min_pass <= g.directions, "train.gateaux.min_pass exceeds directions");

        Ok(Experiment {
            config: self,
            schedule,
            dist,
            timesteps,
            train_timesteps,
        })
    }
}

fn default_timesteps(steps: usize) -> Vec<usize> {
    let mut ts: Vec<usize> = [1, steps / 4, steps / 2, 3 * steps / 4, steps]
        .into_iter()
        .filter(|&t| t >= 1)
        .collect();
    ts.dedup();
    ts
}

fn check_timesteps(ts: &[usize], steps: usize, what: &str) -> Result<()> {
    if ts.is_empty() {
        bail!("{what} must not be empty");
    }
    if let Some(bad) = ts.iter().find(|&&t| t == 0 || t > steps) {
        bail!("{what}: timestep {bad} outside 1..={steps}");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "schedule": {"type": "linear", "T": 100, "beta_start": 0.001, "beta_end": 0.2},
        "distribution": {"type": "gmm", "weights": [1.0], "means": [[0.0, 1.0]], "covs": [[[1.0, 0.5], [0.5, 2.0]]]},
        "seed": 7
    }"#;

    #[test]
    fn minimal_config_fills_defaults() {
        let e = ExperimentConfig::from_json(MINIMAL).unwrap().build().unwrap();
        assert_eq!(e.timesteps, [1, 25, 50, 75, 100]);
        assert_eq!(e.train_timesteps, [25, 50, 75]);
        assert_eq!(e.dist.dim(), 2);
        let DataDistribution::Mixture(g) = &e.dist else { panic!() };
        assert_eq!(g.covariance(0)[(0, 1)], 0.5);
        assert_eq!(g.covariance(0)[(1, 1)], 2.0);
    }

    #[test]
    fn seed_is_mandatory() {
        let text = MINIMAL.replace(r#","seed": 7"#, "").replace("\"seed\": 7", "\"name\": \"x\"");
        assert!(ExperimentConfig::from_json(&text).is_err());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let text = MINIMAL.replace("\"seed\": 7", "\"seed\": 7, \"sede\": 8");
        assert!(ExperimentConfig::from_json(&text).is_err());
    }

    #[test]
    fn explicit_schedule_and_discrete_data() {
        let text = r#"{
            "schedule": {"type": "explicit", "betas": [0.1, 0.2]},
            "distribution": {"type": "discrete", "points": [[-1.0], [1.0]]},
            "timesteps": [1, 2],
            "seed": 0
        }"#;
        let e = ExperimentConfig::from_json(text).unwrap().build().unwrap();
        assert_eq!(e.schedule.num_steps(), 2);
        assert_eq!(e.train_timesteps, [1, 2]);
    }

    #[test]
    fn invalid_specs_fail_validation() {
        for (from, to) in [
            ("\"beta_end\": 0.2", "\"beta_end\": 1.5"),
            ("[[[1.0, 0.5], [0.5, 2.0]]]", "[[[1.0, 3.0], [3.0, 2.0]]]"),
            ("[[[1.0, 0.5], [0.5, 2.0]]]", "[[[1.0, 0.5]]]"),
            ("\"seed\": 7", "\"seed\": 7, \"timesteps\": [0]"),
            ("\"seed\": 7", "\"seed\": 7, \"timesteps\": [101]"),
        ] {
            let text = MINIMAL.replace(from, to);
            let parsed = ExperimentConfig::from_json(&text).and_then(ExperimentConfig::build);
            assert!(parsed.is_err(), "{to}");
        }
    }

    #[test]
    fn hash_ignores_output_directory_and_tracks_content() {
        let a = ExperimentConfig::from_json(MINIMAL).unwrap();
        let mut b = a.clone();
        b.out_dir = Some("elsewhere".into());
        assert_eq!(a.hash(), b.hash());
        b.seed = 8;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
