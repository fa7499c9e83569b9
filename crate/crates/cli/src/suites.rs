//! The four verification suites. Each writes `<suite>.jsonl`, `<suite>.csv`
//! and `<suite>_summary.json` into the output directory and returns the
//! summary. Work is spread over the current rayon pool; every probe, fit and
//! chain draws from its own generator derived from the root seed, and rows
//! are written in a fixed order by one writer.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use epsoracle_core::bruteforce::{epsilon_star_monte_carlo, epsilon_star_quadrature, score_finite_difference, GridSpec, Uncertainty};
use epsoracle_core::oracle::{self, IdentityReport};
use epsoracle_core::rng::derived_rng;
use epsoracle_core::sampler::{
    distribution_match_report, sample_chain, MatchGate, MatchMetrics, NoiseModel, OracleModel, PredictorBank, ZeroModel,
};
use epsoracle_core::stats;
use epsoracle_core::trainer::{
    compare_to_oracle, fit_least_squares, gateaux_derivative_check, stationarity_summary, FamilySpec, OraclePredictor,
    PerturbationSpec,
};
use epsoracle_core::{DataDistribution, Error, LatentPoint};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{Experiment, Family, PredictorSource};
use crate::output::{self, Gate, JsonlWriter, Row, StoredPredictor, Summary};

/// Run-time overrides from the command line.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Replaces the suite's headline tolerance.
    pub tol: Option<f64>,
    /// Scales the score path of the identity sweep by 1.01.
    pub corrupt_score: bool,
}

// Stream domains for derived generators.
const THEOREM_PROBES: u64 = 1;
const THEOREM_MC: u64 = 2;
const IDENTITY_PROBES: u64 = 3;
const TRAIN_FIT: u64 = 4;
const TRAIN_EVAL: u64 = 5;
const TRAIN_STATIONARITY: u64 = 6;
const TRAIN_DIRECTION: u64 = 7;
const TRAIN_GATEAUX: u64 = 8;

/// Largest stationarity residual accepted at the closed-form oracle.
pub const ORACLE_STATIONARITY_TOL: f64 = 1e-12;

const CORRUPTION: f64 = 1.01;

struct Comparison {
    abs_err: f64,
    rel_err: f64,
    error: f64,
    pass: bool,
}

/// Max-norm absolute and relative errors; passes when `min(abs, rel) <= tol`
/// with `tol > 0`.
fn compare(value: &[f64], reference: &[f64], tol: f64) -> Comparison {
    let abs_err = stats::max_abs_diff(value, reference);
    let scale = stats::max_abs(reference);
    let rel_err = if scale > 0.0 {
        abs_err / scale
    } else if abs_err == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    let error = abs_err.min(rel_err);
    Comparison {
        abs_err,
        rel_err,
        error,
        pass: tol > 0.0 && error <= tol,
    }
}

fn tolerance_gate(name: &str, worst: f64, all_pass: bool, tol: f64) -> Gate {
    Gate {
        name: name.to_owned(),
        pass: all_pass && tol > 0.0,
        value: worst,
        threshold: tol,
    }
}

struct Writer<'a> {
    suite: &'static str,
    dir: &'a Path,
    hash: String,
    seed: u64,
    start: Instant,
}

impl<'a> Writer<'a> {
    fn new(suite: &'static str, exp: &Experiment, opts: &'a RunOptions) -> Result<Self> {
        fs::create_dir_all(&opts.out_dir).with_context(|| format!("cannot create {}", opts.out_dir.display()))?;
        Ok(Self {
            suite,
            dir: &opts.out_dir,
            hash: exp.config.hash(),
            seed: exp.config.seed,
            start: Instant::now(),
        })
    }

    fn row(&self, method: &str) -> Row {
        Row::new(self.suite, &self.hash, self.seed, method)
    }

    fn finish(self, rows: &[Row], gates: Vec<Gate>, worst_error: f64, notes: Vec<String>) -> Result<Summary> {
        let mut w = JsonlWriter::create(&output::jsonl_path(self.dir, self.suite))?;
        for r in rows {
            w.write(r)?;
        }
        let n = w.finish()?;
        let summary = Summary {
            suite: self.suite.to_owned(),
            pass: gates.iter().all(|g| g.pass),
            worst_error,
            runtime_seconds: self.start.elapsed().as_secs_f64(),
            generated_at: output::unix_now(),
            config_hash: self.hash,
            seed: self.seed,
            rows: n,
            csv_schema_version: output::CSV_SCHEMA_VERSION,
            gates,
            notes,
        };
        output::write_json(&output::summary_path(self.dir, self.suite), &summary)?;
        Ok(summary)
    }
}

fn worst<'a>(rows: impl Iterator<Item = &'a Row>) -> (f64, bool) {
    let mut max = 0.0_f64;
    let mut all = true;
    for r in rows {
        if let Some(e) = r.error {
            max = if e.is_nan() { f64::INFINITY } else { max.max(e) };
        }
        all &= r.pass == Some(true);
    }
    (max, all)
}

/// Closed form against quadrature, Monte Carlo, and (for the score) central
/// differences, at probes drawn from `q(x_t)`.
pub fn verify_theorem(exp: &Experiment, opts: &RunOptions) -> Result<Summary> {
    let w = Writer::new("theorem", exp, opts)?;
    let cfg = &exp.config;
    let dist = &exp.dist;
    let s = &exp.schedule;
    let d = dist.dim();
    let quad_tol = opts.tol.unwrap_or_else(|| cfg.tolerances.quadrature_for(d));
    let fd_tol = opts.tol.unwrap_or(cfg.tolerances.finite_difference);
    let z_tol = cfg.tolerances.monte_carlo_z;
    let grid = GridSpec {
        nodes_per_axis: cfg.quadrature.nodes_per_axis.unwrap_or(GridSpec::for_dim(d).nodes_per_axis),
        half_width_sd: cfg.quadrature.half_width_sd,
        tolerance: cfg.quadrature.refinement_tolerance,
    };
    let quadrature_supported = matches!(dist, DataDistribution::Discrete(_)) || d <= 2;
    let mut notes = Vec::new();
    if !quadrature_supported {
        notes.push(format!("quadrature skipped: dimension {d} exceeds 2"));
    }

    let mut jobs = Vec::new();
    for &t in &exp.timesteps {
        let probes = oracle::draw_probes(dist, s, t, cfg.quadrature.probes, false, &mut derived_rng(cfg.seed, THEOREM_PROBES, t as u64))?;
        jobs.extend(probes.into_iter().enumerate().map(|(i, x)| (t, i, x)));
    }
    let per_probe: Vec<Vec<Row>> = jobs
        .par_iter()
        .map(|(t, i, xt)| -> Result<Vec<Row>> {
            let (t, i) = (*t, *i);
            let mut rows = Vec::with_capacity(4);
            let base = |method: &str| {
                let mut r = w.row(method);
                r.t = Some(t);
                r.probe = Some(i);
                r.xt = Some(xt.clone());
                r
            };
            let exact = oracle::epsilon_star(dist, s, t, xt)?;
            let mut r = base("closed_form");
            r.value = Some(exact.clone());
            rows.push(r);

            if quadrature_supported {
                let mut r = base("quadrature");
                r.tol = Some(quad_tol);
                r.reference = Some(exact.clone());
                match epsilon_star_quadrature(dist, s, t, xt, &grid) {
                    Ok(est) => {
                        let c = compare(&est.value, &exact, quad_tol);
                        r.abs_err = Some(c.abs_err);
                        r.rel_err = Some(c.rel_err);
                        r.error = Some(c.error);
                        r.pass = Some(c.pass);
                        r.n_evals = Some(est.n_evals);
                        match est.uncertainty {
                            Uncertainty::Bound(b) => {
                                r.error_bound = Some(b);
                                r.note = Some("error_bound is a grid-refinement heuristic".into());
                            }
                            Uncertainty::Exact => r.note = Some("exact finite sum".into()),
                            Uncertainty::StdErr(_) => {}
                        }
                        r.value = Some(est.value);
                    }
                    Err(e @ Error::GridTooCoarse { .. }) => {
                        r.error = Some(f64::INFINITY);
                        r.pass = Some(false);
                        r.note = Some(e.to_string());
                    }
                    Err(e) => return Err(e.into()),
                }
                rows.push(r);
            }

            if i < cfg.monte_carlo.probes {
                let index = ((t as u64) << 32) | i as u64;
                let est = epsilon_star_monte_carlo(dist, s, t, xt, cfg.monte_carlo.samples, &mut derived_rng(cfg.seed, THEOREM_MC, index))?;
                let se = est.stderr();
                let mut z = 0.0_f64;
                let mut within = true;
                for ((v, r), e) in est.value.iter().zip(&exact).zip(&se) {
                    let diff = (v - r).abs();
                    within &= diff <= z_tol * e + 1e-12 * (1.0 + r.abs());
                    z = z.max(if *e > 0.0 { diff / e } else if diff == 0.0 { 0.0 } else { f64::INFINITY });
                }
                let c = compare(&est.value, &exact, 1.0);
                let mut r = base("monte_carlo");
                r.reference = Some(exact.clone());
                r.abs_err = Some(c.abs_err);
                r.rel_err = Some(c.rel_err);
                r.error = Some(z);
                r.tol = Some(z_tol);
                r.stderr = Some(se);
                r.ess = est.effective_sample_size;
                r.reliable = Some(est.reliable);
                r.n_evals = Some(est.n_evals);
                r.pass = Some(within);
                if !est.reliable {
                    r.note = Some("effective sample size below 10".into());
                }
                r.value = Some(est.value);
                rows.push(r);
            }

            let marginal = dist.marginal_qt(s, t)?;
            let analytic = marginal.score(xt)?;
            let fd = score_finite_difference(&marginal, xt, cfg.quadrature.finite_difference_step)?;
            let c = compare(&fd, &analytic, fd_tol);
            let mut r = base("finite_difference");
            r.check = Some("score".into());
            r.value = Some(fd);
            r.reference = Some(analytic);
            r.abs_err = Some(c.abs_err);
            r.rel_err = Some(c.rel_err);
            r.error = Some(c.error);
            r.tol = Some(fd_tol);
            r.pass = Some(c.pass);
            rows.push(r);
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    let rows: Vec<Row> = per_probe.into_iter().flatten().collect();

    let mut gates = Vec::new();
    let mut headline = 0.0_f64;
    if quadrature_supported {
        let (q_worst, q_all) = worst(rows.iter().filter(|r| r.method == "quadrature"));
        gates.push(tolerance_gate("quadrature_vs_closed_form", q_worst, q_all, quad_tol));
        headline = headline.max(q_worst);
    }
    let mc: Vec<&Row> = rows.iter().filter(|r| r.method == "monte_carlo").collect();
    if !mc.is_empty() {
        let within = mc.iter().filter(|r| r.pass == Some(true)).count() as f64 / mc.len() as f64;
        gates.push(Gate::at_least(
            "monte_carlo_within_z_fraction",
            within,
            cfg.tolerances.monte_carlo_pass_fraction,
        ));
        let unreliable = mc.iter().filter(|r| r.reliable == Some(false)).count();
        if unreliable > 0 {
            notes.push(format!("{unreliable} Monte Carlo probes had effective sample size below 10"));
        }
    }
    let (fd_worst, fd_all) = worst(rows.iter().filter(|r| r.method == "finite_difference"));
    gates.push(tolerance_gate("score_vs_finite_difference", fd_worst, fd_all, fd_tol));
    headline = headline.max(fd_worst);

    output::write_csv(&output::csv_path(&opts.out_dir, "theorem"), &output::aggregate(&rows, true))?;
    w.finish(&rows, gates, headline, notes)
}

/// The direct posterior path against the score path at probes drawn from
/// `q(x_t)`, optionally with far-tail probes.
pub fn verify_identity(exp: &Experiment, opts: &RunOptions) -> Result<Summary> {
    let w = Writer::new("identity", exp, opts)?;
    let cfg = &exp.config;
    let tol = opts.tol.unwrap_or(cfg.tolerances.identity);
    let mut jobs = Vec::new();
    for &t in &exp.timesteps {
        let probes = oracle::draw_probes(
            &exp.dist,
            &exp.schedule,
            t,
            cfg.probes.per_timestep,
            cfg.probes.far_tail,
            &mut derived_rng(cfg.seed, IDENTITY_PROBES, t as u64),
        )?;
        jobs.extend(probes.into_iter().enumerate().map(|(i, x)| (t, i, x)));
    }
    let rows: Vec<Row> = jobs
        .par_iter()
        .map(|(t, i, xt)| -> Result<Row> {
            let direct = oracle::epsilon_star(&exp.dist, &exp.schedule, *t, xt)?;
            let mut via_score = oracle::epsilon_from_score(&exp.dist, &exp.schedule, *t, xt)?;
            if opts.corrupt_score {
                via_score.iter_mut().for_each(|v| *v *= CORRUPTION);
            }
            let rep = IdentityReport::compare(LatentPoint { x: xt.clone(), t: *t }, direct, via_score, tol);
            let mut r = w.row("closed_form");
            r.check = Some("identity".into());
            r.t = Some(*t);
            r.probe = Some(*i);
            r.xt = Some(rep.probe.x.clone());
            r.abs_err = Some(rep.abs_err);
            r.rel_err = Some(rep.rel_err);
            r.error = Some(rep.error());
            r.tol = Some(tol);
            r.pass = Some(rep.pass);
            r.value = Some(rep.eps_direct);
            r.reference = Some(rep.eps_score);
            if *i >= cfg.probes.per_timestep {
                r.note = Some("far-tail probe".into());
            }
            Ok(r)
        })
        .collect::<Result<_>>()?;

    let (max_err, all) = worst(rows.iter());
    let mut notes = Vec::new();
    if opts.corrupt_score {
        notes.push(format!("score path deliberately scaled by {CORRUPTION}"));
    }
    output::write_csv(&output::csv_path(&opts.out_dir, "identity"), &output::aggregate(&rows, false))?;
    w.finish(&rows, vec![tolerance_gate("direct_vs_score", max_err, all, tol)], max_err, notes)
}

/// Per-timestep line of `train.csv`.
#[derive(Debug, Clone, Serialize)]
struct TrainCsvRow {
    t: usize,
    family: &'static str,
    n_samples: usize,
    free_parameters: usize,
    final_loss: f64,
    flagged_cells: usize,
    rmse_all: f64,
    rmse_gate_region: f64,
    rmse_top_half: f64,
    stationarity_weighted: f64,
    oracle_stationarity_max: f64,
    gateaux_pass: usize,
    gateaux_directions: usize,
}

#[derive(Debug, Clone, Serialize)]
struct DecileRecord {
    decile: usize,
    min_density: f64,
    count: usize,
    rmse: f64,
}

/// JSON form of a fit report.
#[derive(Debug, Clone, Serialize)]
struct FitRecord {
    t: usize,
    family: &'static str,
    n_samples: usize,
    free_parameters: usize,
    final_loss: f64,
    flagged_cells: usize,
    ridge: Option<f64>,
    warnings: Vec<String>,
    rmse_all: f64,
    rmse_gate_region: f64,
    gate_region_count: usize,
    rmse_top_half: f64,
    excluded_eval_points: usize,
    deciles: Vec<DecileRecord>,
    stationarity_mean_norm: f64,
    stationarity_max_norm: f64,
    stationarity_weighted: f64,
}

struct TrainOutcome {
    rows: Vec<Row>,
    csv: Option<TrainCsvRow>,
    record: Option<FitRecord>,
    predictor: Option<StoredPredictor>,
    warnings: Vec<String>,
    gateaux_pass: usize,
}

/// Least-squares fits per timestep, compared with the closed-form optimum,
/// plus the stationarity and first-variation checks at the oracle.
pub fn train(exp: &Experiment, opts: &RunOptions) -> Result<Summary> {
    let w = Writer::new("train", exp, opts)?;
    let cfg = &exp.config;
    let tc = &cfg.train;
    let rmse_gate = opts.tol.unwrap_or(tc.rmse_gate);
    let spec = match tc.family {
        Family::Grid => FamilySpec::Grid {
            cells_per_axis: tc.resolution,
            bounds: None,
        },
        Family::Rbf => FamilySpec::Rbf {
            centers_per_axis: tc.resolution,
            bandwidth: tc.bandwidth,
            ridge: tc.ridge,
            bounds: None,
        },
    };

    let outcomes: Vec<TrainOutcome> = exp
        .train_timesteps
        .par_iter()
        .map(|&t| train_one(exp, &w, &spec, t, rmse_gate))
        .collect::<Result<_>>()?;

    let predictor_dir = opts.out_dir.join("predictors");
    fs::create_dir_all(&predictor_dir).with_context(|| format!("cannot create {}", predictor_dir.display()))?;
    let mut rows = Vec::new();
    let mut csv_rows = Vec::new();
    let mut records = Vec::new();
    let mut notes = Vec::new();
    let mut min_gateaux = usize::MAX;
    for o in outcomes {
        for warning in &o.warnings {
            eprintln!("warning: {warning}");
        }
        notes.extend(o.warnings);
        rows.extend(o.rows);
        csv_rows.extend(o.csv);
        records.extend(o.record);
        if let Some(p) = &o.predictor {
            let t = match p {
                StoredPredictor::Grid { t, .. } | StoredPredictor::Rbf { t, .. } => *t,
            };
            output::write_json(&output::predictor_path(&predictor_dir, t), p)?;
        }
        min_gateaux = min_gateaux.min(o.gateaux_pass);
    }
    output::write_csv(&output::csv_path(&opts.out_dir, "train"), &csv_rows)?;
    output::write_json(&opts.out_dir.join("train_fits.json"), &records)?;

    let check = |name: &'static str| rows.iter().filter(move |r| r.check.as_deref() == Some(name));
    let (rmse_worst, rmse_all) = worst(check("rmse_gate_region"));
    let (stat_worst, stat_all) = worst(check("stationarity_fitted"));
    let (oracle_worst, oracle_all) = worst(check("stationarity_oracle"));
    let quadratic_positive = check("gateaux").all(|r| r.value.as_ref().is_some_and(|v| v[1] > 0.0));
    let fitted = rows.iter().any(|r| r.check.as_deref() == Some("rmse_gate_region"));
    let gates = vec![
        tolerance_gate("rmse_vs_oracle", rmse_worst, rmse_all && fitted, rmse_gate),
        tolerance_gate("stationarity_fitted", stat_worst, stat_all && fitted, tc.stationarity_gate),
        tolerance_gate("stationarity_oracle", oracle_worst, oracle_all, ORACLE_STATIONARITY_TOL),
        Gate::at_least("gateaux_linear_zero_directions", min_gateaux as f64, tc.gateaux.min_pass as f64),
        Gate::at_least("gateaux_quadratic_positive", f64::from(u8::from(quadratic_positive)), 1.0),
    ];
    w.finish(&rows, gates, rmse_worst, notes)
}

fn train_one(exp: &Experiment, w: &Writer<'_>, spec: &FamilySpec, t: usize, rmse_gate: f64) -> Result<TrainOutcome> {
    let cfg = &exp.config;
    let tc = &cfg.train;
    let dist = &exp.dist;
    let s = &exp.schedule;
    let seed = cfg.seed;
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    let row = |check: &str, method: &str| {
        let mut r = w.row(method);
        r.t = Some(t);
        r.check = Some(check.to_owned());
        r
    };

    let oracle = OraclePredictor::new(dist, s, t)?;
    let at_oracle = stationarity_summary(&oracle, dist, s, t, tc.stationarity_samples.max(1), &mut derived_rng(seed, TRAIN_STATIONARITY, t as u64))?;
    let mut r = row("stationarity_oracle", "least_squares");
    r.error = Some(at_oracle.max_norm);
    r.tol = Some(ORACLE_STATIONARITY_TOL);
    r.pass = Some(at_oracle.max_norm <= ORACLE_STATIONARITY_TOL);
    rows.push(r);

    let mut gateaux_pass = 0;
    let g = &tc.gateaux;
    let h_spec = PerturbationSpec {
        features: g.features,
        lengthscale: g.lengthscale,
        amplitude: 1.0,
    };
    for k in 0..g.directions {
        let index = (t as u64) << 32 | k as u64;
        let h = h_spec.generate(dist.dim(), &mut derived_rng(seed, TRAIN_DIRECTION, index));
        let rep = gateaux_derivative_check(&oracle, &h, dist, s, t, &g.s_values, g.samples, &mut derived_rng(seed, TRAIN_GATEAUX, index))?;
        let ok = rep.linear_is_zero(g.z) && rep.quadratic > 0.0;
        gateaux_pass += usize::from(ok);
        let mut r = row("gateaux", "monte_carlo");
        r.probe = Some(k);
        r.value = Some(vec![rep.linear, rep.quadratic]);
        r.stderr = Some(vec![rep.linear_stderr, rep.quadratic_stderr]);
        r.error = Some(rep.linear_z_score().abs());
        r.tol = Some(g.z);
        r.pass = Some(ok);
        rows.push(r);
    }

    let fit = fit_least_squares(spec, dist, s, t, tc.n_samples, &mut derived_rng(seed, TRAIN_FIT, t as u64));
    let (f, report) = match fit {
        Ok(v) => v,
        Err(e @ Error::TooFewSamples { .. }) => {
            warnings.push(format!("t={t}: {e}; fit skipped"));
            let mut r = row("rmse_gate_region", "least_squares");
            r.error = Some(f64::INFINITY);
            r.tol = Some(rmse_gate);
            r.pass = Some(false);
            r.note = Some(e.to_string());
            rows.push(r);
            return Ok(TrainOutcome {
                rows,
                csv: None,
                record: None,
                predictor: None,
                warnings,
                gateaux_pass,
            });
        }
        Err(e) => return Err(e.into()),
    };
    warnings.extend(report.warnings.iter().map(|m| format!("t={t}: {m}")));

    let cmp = compare_to_oracle(&f, dist, s, t, tc.n_eval, &mut derived_rng(seed, TRAIN_EVAL, t as u64))?;
    let mut r = row("rmse_gate_region", "least_squares");
    r.error = Some(cmp.rmse_gate_region);
    r.tol = Some(rmse_gate);
    r.pass = Some(rmse_gate > 0.0 && cmp.rmse_gate_region <= rmse_gate);
    r.n_evals = Some(cmp.gate_region_count);
    rows.push(r);
    let mut r = row("rmse_all", "least_squares");
    r.error = Some(cmp.rmse_all);
    r.n_evals = Some(cmp.n_eval);
    rows.push(r);
    let mut r = row("rmse_top_half", "least_squares");
    r.error = Some(cmp.rmse_top_half);
    rows.push(r);

    let stat = stationarity_summary(&f, dist, s, t, tc.stationarity_samples.max(1), &mut derived_rng(seed, TRAIN_STATIONARITY, t as u64))?;
    let mut r = row("stationarity_fitted", "least_squares");
    r.error = Some(stat.weighted_mean_error());
    r.tol = Some(tc.stationarity_gate);
    r.pass = Some(stat.weighted_mean_error() <= tc.stationarity_gate);
    rows.push(r);

    let csv = TrainCsvRow {
        t,
        family: report.family,
        n_samples: report.n_samples,
        free_parameters: report.free_parameters,
        final_loss: report.final_loss,
        flagged_cells: report.flagged_cells,
        rmse_all: cmp.rmse_all,
        rmse_gate_region: cmp.rmse_gate_region,
        rmse_top_half: cmp.rmse_top_half,
        stationarity_weighted: stat.weighted_mean_error(),
        oracle_stationarity_max: at_oracle.max_norm,
        gateaux_pass,
        gateaux_directions: g.directions,
    };
    let record = FitRecord {
        t,
        family: report.family,
        n_samples: report.n_samples,
        free_parameters: report.free_parameters,
        final_loss: report.final_loss,
        flagged_cells: report.flagged_cells,
        ridge: report.ridge,
        warnings: report.warnings.clone(),
        rmse_all: cmp.rmse_all,
        rmse_gate_region: cmp.rmse_gate_region,
        gate_region_count: cmp.gate_region_count,
        rmse_top_half: cmp.rmse_top_half,
        excluded_eval_points: cmp.excluded,
        deciles: cmp
            .deciles
            .iter()
            .map(|d| DecileRecord {
                decile: d.decile,
                min_density: d.min_density,
                count: d.count,
                rmse: d.rmse,
            })
            .collect(),
        stationarity_mean_norm: stat.mean_norm,
        stationarity_max_norm: stat.max_norm,
        stationarity_weighted: stat.weighted_mean_error(),
    };
    Ok(TrainOutcome {
        rows,
        csv: Some(csv),
        record: Some(record),
        predictor: Some(StoredPredictor::from(&f)),
        warnings,
        gateaux_pass,
    })
}

/// JSON form of [`MatchMetrics`] with the gate outcome.
#[derive(Debug, Clone, Serialize)]
struct MetricsRecord {
    predictor: PredictorSource,
    variance_mode: crate::config::Variance,
    n: usize,
    sample_mean: Vec<f64>,
    target_mean: Vec<f64>,
    mean_error: Vec<f64>,
    mean_stderr: Vec<f64>,
    sample_variance: Vec<f64>,
    target_variance: Vec<f64>,
    variance_error: Vec<f64>,
    wasserstein1: Option<f64>,
    assignment: Option<Vec<f64>>,
    target_weights: Option<Vec<f64>>,
    pass_mean: bool,
    pass_variance: bool,
    pass_wasserstein1: bool,
    pass_assignment: bool,
}

fn load_bank(dir: &Path, dim: usize, steps: usize) -> Result<PredictorBank> {
    let mut bank = PredictorBank::new(dim);
    for t in 1..=steps {
        let path = output::predictor_path(dir, t);
        let text = fs::read_to_string(&path)
            .with_context(|| format!("missing fitted predictor for t={t} ({}); run train over every timestep", path.display()))?;
        let stored: StoredPredictor = serde_json::from_str(&text).with_context(|| format!("malformed {}", path.display()))?;
        let f = stored.into_predictor()?;
        if f.t != t {
            bail!("{} holds a predictor for t={}", path.display(), f.t);
        }
        bank.insert(f)?;
    }
    Ok(bank)
}

/// Ancestral sampling with the configured predictor, checked against the
/// data law.
pub fn sample(exp: &Experiment, opts: &RunOptions) -> Result<Summary> {
    let w = Writer::new("sample", exp, opts)?;
    let cfg = &exp.config;
    let sc = &cfg.sample;
    let dist = &exp.dist;
    let s = &exp.schedule;
    let mode = sc.variance.into();
    let oracle_model = OracleModel { dist, schedule: s };
    let zero_model = ZeroModel { dim: dist.dim() };
    let bank;
    let model: &(dyn NoiseModel + Sync) = match sc.predictor {
        PredictorSource::Oracle => &oracle_model,
        PredictorSource::Zero => &zero_model,
        PredictorSource::Fitted => {
            let dir = sc.predictor_dir.clone().unwrap_or_else(|| opts.out_dir.join("predictors"));
            bank = load_bank(&dir, dist.dim(), s.num_steps())?;
            &bank
        }
    };

    let chains: std::result::Result<Vec<Vec<f64>>, Error> = (0..sc.n_samples as u64)
        .into_par_iter()
        .map(|i| sample_chain(model, s, mode, cfg.seed, i))
        .collect();
    let samples = match chains {
        Ok(v) => v,
        Err(e @ Error::NonFinitePrediction { .. }) => {
            let mut r = w.row("ancestral");
            r.check = Some("finite".into());
            r.pass = Some(false);
            r.note = Some(e.to_string());
            let gates = vec![Gate::at_most("non_finite_predictions", 1.0, 0.0)];
            return w.finish(&[r], gates, f64::INFINITY, vec![e.to_string()]);
        }
        Err(e) => return Err(e.into()),
    };

    let mut csv = csv::Writer::from_path(opts.out_dir.join("samples.csv")).context("cannot create samples.csv")?;
    csv.write_record((0..dist.dim()).map(|a| format!("x{a}")))?;
    for x in &samples {
        csv.write_record(x.iter().map(|v| v.to_string()))?;
    }
    csv.flush()?;

    let metrics = distribution_match_report(&samples, dist)?;
    let gate = MatchGate {
        mean_abs: sc.mean_abs,
        mean_se_mult: sc.mean_se_mult,
        wasserstein1: opts.tol.unwrap_or(sc.wasserstein1),
        assignment_se_mult: sc.assignment_se_mult,
        variance_rel: sc.variance_rel,
        variance_floor: sc.variance_floor,
    };
    let outcome = gate.evaluate(&metrics);
    let rows = match_rows(&w, &metrics, &gate);
    let record = MetricsRecord {
        predictor: sc.predictor,
        variance_mode: sc.variance,
        n: metrics.n,
        sample_mean: metrics.sample_mean.clone(),
        target_mean: metrics.target_mean.clone(),
        mean_error: metrics.mean_error.clone(),
        mean_stderr: metrics.mean_stderr.clone(),
        sample_variance: metrics.sample_variance.clone(),
        target_variance: metrics.target_variance.clone(),
        variance_error: metrics.variance_error.clone(),
        wasserstein1: metrics.wasserstein1,
        assignment: metrics.assignment.clone(),
        target_weights: metrics.target_weights.clone(),
        pass_mean: outcome.mean,
        pass_variance: outcome.variance,
        pass_wasserstein1: outcome.wasserstein1,
        pass_assignment: outcome.assignment,
    };
    output::write_json(&opts.out_dir.join("sample_metrics.json"), &record)?;

    let check_gate = |name: &str, pass: bool| {
        let (value, threshold) = rows
            .iter()
            .filter(|r| r.check.as_deref() == Some(name))
            .map(|r| (r.error.unwrap_or(0.0), r.tol.unwrap_or(0.0)))
            .fold((0.0_f64, 0.0_f64), |acc, (e, t)| (acc.0.max(e), acc.1.max(t)));
        Gate {
            name: name.to_owned(),
            pass,
            value,
            threshold,
        }
    };
    let mut gates = vec![check_gate("mean", outcome.mean), check_gate("variance", outcome.variance)];
    if metrics.wasserstein1.is_some() {
        gates.push(check_gate("wasserstein1", outcome.wasserstein1));
    }
    if metrics.assignment.is_some() {
        gates.push(check_gate("assignment", outcome.assignment));
    }
    let headline = metrics
        .wasserstein1
        .unwrap_or_else(|| stats::max_abs(&metrics.mean_error));
    let mut notes = Vec::new();
    if sc.predictor == PredictorSource::Zero {
        notes.push("zero predictor: negative control, expected to fail".into());
    }
    w.finish(&rows, gates, headline, notes)
}

fn match_rows(w: &Writer<'_>, m: &MatchMetrics, gate: &MatchGate) -> Vec<Row> {
    let mut rows = Vec::new();
    for a in 0..m.sample_mean.len() {
        let bound = gate.mean_abs.max(gate.mean_se_mult * m.mean_stderr[a]);
        let mut r = w.row("ancestral");
        r.check = Some("mean".into());
        r.probe = Some(a);
        r.value = Some(vec![m.sample_mean[a]]);
        r.reference = Some(vec![m.target_mean[a]]);
        r.stderr = Some(vec![m.mean_stderr[a]]);
        r.error = Some(m.mean_error[a].abs());
        r.tol = Some(bound);
        r.pass = Some(m.mean_error[a].abs() <= bound);
        rows.push(r);

        let bound = gate.variance_rel * m.target_variance[a].max(gate.variance_floor);
        let mut r = w.row("ancestral");
        r.check = Some("variance".into());
        r.probe = Some(a);
        r.value = Some(vec![m.sample_variance[a]]);
        r.reference = Some(vec![m.target_variance[a]]);
        r.error = Some(m.variance_error[a].abs());
        r.tol = Some(bound);
        r.pass = Some(m.variance_error[a].abs() <= bound);
        rows.push(r);
    }
    if let Some(w1) = m.wasserstein1 {
        let mut r = w.row("ancestral");
        r.check = Some("wasserstein1".into());
        r.error = Some(w1);
        r.tol = Some(gate.wasserstein1);
        r.pass = Some(w1 <= gate.wasserstein1);
        rows.push(r);
    }
    if let (Some(freq), Some(weights)) = (&m.assignment, &m.target_weights) {
        for (k, (f, wt)) in freq.iter().zip(weights).enumerate() {
            let band = (gate.assignment_se_mult * (wt * (1.0 - wt) / m.n as f64).sqrt()).max(1e-12);
            let mut r = w.row("ancestral");
            r.check = Some("assignment".into());
            r.probe = Some(k);
            r.value = Some(vec![*f]);
            r.reference = Some(vec![*wt]);
            r.error = Some((f - wt).abs());
            r.tol = Some(band);
            r.pass = Some((f - wt).abs() <= band);
            rows.push(r);
        }
    }
    rows
}
