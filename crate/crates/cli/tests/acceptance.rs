//! End-to-end acceptance checks over the bundled golden configs. Prints one
//! PASS/FAIL line per criterion and exits nonzero if any fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use anyhow::{ensure, Context, Result};
use epsoracle::config::{Experiment, ExperimentConfig};
use epsoracle_core::bruteforce::{epsilon_star_quadrature, score_finite_difference, GridSpec};
use epsoracle_core::oracle::{draw_probes, epsilon_from_score, epsilon_star};
use epsoracle_core::rng::derived_rng;
use epsoracle_core::trainer::{
    compare_to_oracle, fit_least_squares, gateaux_derivative_check, stationarity_summary, FamilySpec, OraclePredictor,
    PerturbationSpec, DEFAULT_S_VALUES,
};
use epsoracle_core::DataDistribution;
use serde_json::Value;
use tempfile::TempDir;

const GOLDEN: [&str; 5] = ["dirac", "gauss1d", "twopoint1d", "gmm3_1d", "gmm2_2d"];
const GOLDEN_1D: [&str; 4] = ["dirac", "gauss1d", "twopoint1d", "gmm3_1d"];
const MIXTURES_1D: [&str; 2] = ["gauss1d", "gmm3_1d"];
const SEED: u64 = 20240601;

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(format!("{name}.json"))
}

fn experiment(name: &str) -> Result<Experiment> {
    ExperimentConfig::load(&golden(name))?.build()
}

/// Runs the binary and returns its exit code.
fn cli(args: &[&str]) -> Result<i32> {
    let out = Command::new(env!("CARGO_BIN_EXE_epsoracle"))
        .args(args)
        .env_remove("EPSORACLE_OUT")
        .output()
        .context("cannot run epsoracle")?;
    out.status.code().context("epsoracle killed by a signal")
}

fn rows(path: &Path) -> Result<Vec<Value>> {
    fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))?
        .lines()
        .map(|l| serde_json::from_str(l).context("bad JSONL row"))
        .collect()
}

fn json(path: &Path) -> Result<Value> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

fn f64_of(v: &Value, key: &str) -> Result<f64> {
    v[key].as_f64().with_context(|| format!("missing {key}"))
}

/// `min(abs, rel)` over coordinates, worst coordinate.
fn mixed_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let abs = (x - y).abs();
            abs.min(abs / y.abs().max(f64::MIN_POSITIVE))
        })
        .fold(0.0, f64::max)
}

fn max_abs_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

type Check<'a> = Box<dyn Fn() -> Result<Verdict> + 'a>;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Result<Verdict> {
    Ok(Verdict { pass, detail })
}

fn identity_suite(tmp: &Path) -> Result<Verdict> {
    let mut worst = 0.0_f64;
    let mut probes = 0;
    let mut ok = true;
    for name in GOLDEN {
        let out = tmp.join(name);
        let code = cli(&["verify-identity", "--config", golden(name).to_str().unwrap(), "--out", out.to_str().unwrap()])?;
        ok &= code == 0;
        let exp = experiment(name)?;
        for t in &exp.timesteps {
            let at_t: Vec<Value> = rows(&out.join("identity.jsonl"))?
                .into_iter()
                .filter(|r| r["t"].as_u64() == Some(*t as u64) && r["pass"].is_boolean())
                .collect();
            ok &= at_t.len() >= 100;
            probes += at_t.len();
            for r in &at_t {
                worst = worst.max(f64_of(r, "error")?);
            }
        }
    }
    ok &= worst <= 1e-8;
    verdict(ok, format!("{probes} probes, worst min(abs,rel) {worst:.2e} <= 1e-8"))
}

fn theorem_suite(tmp: &Path) -> Result<Verdict> {
    let mut ok = true;
    let mut worst_quad = 0.0_f64;
    let mut details = Vec::new();
    for name in MIXTURES_1D {
        let out = tmp.join(name);
        let code = cli(&["verify-theorem", "--config", golden(name).to_str().unwrap(), "--out", out.to_str().unwrap()])?;
        ok &= code == 0;
        let all = rows(&out.join("theorem.jsonl"))?;
        let quad: Vec<&Value> = all.iter().filter(|r| r["method"] == "quadrature").collect();
        let mc: Vec<&Value> = all.iter().filter(|r| r["method"] == "monte_carlo").collect();
        ok &= quad.len() >= 100 && mc.len() >= 100;
        for r in &quad {
            worst_quad = worst_quad.max(f64_of(r, "error")?);
        }
        ok &= mc.iter().all(|r| r["n_evals"].as_u64() == Some(100_000));
        let within = mc.iter().filter(|r| r["error"].as_f64().is_some_and(|z| z <= 4.0)).count();
        let frac = within as f64 / mc.len().max(1) as f64;
        ok &= frac >= 0.99;
        details.push(format!("{name} MC {within}/{} within 4 se", mc.len()));
    }
    ok &= worst_quad <= 1e-6;
    verdict(ok, format!("quadrature worst {worst_quad:.2e} <= 1e-6; {}", details.join(", ")))
}

fn score_check() -> Result<Verdict> {
    let mut worst = 0.0_f64;
    let mut points = 0;
    for (k, name) in GOLDEN.iter().enumerate() {
        let exp = experiment(name)?;
        for &t in &exp.timesteps {
            let marginal = exp.dist.marginal_qt(&exp.schedule, t)?;
            let mut rng = derived_rng(SEED, 3, (k * 1000 + t) as u64);
            for x in draw_probes(&exp.dist, &exp.schedule, t, 8, false, &mut rng)? {
                let analytic = marginal.score(&x)?;
                let fd = score_finite_difference(&marginal, &x, 1e-5)?;
                worst = worst.max(mixed_error(&fd, &analytic));
                points += 1;
            }
        }
    }
    verdict(points >= 200 && worst <= 1e-5, format!("{points} points, worst min(abs,rel) {worst:.2e} <= 1e-5"))
}

fn variational_check() -> Result<Verdict> {
    let mut ok = true;
    let mut worst_g = 0.0_f64;
    let mut least = usize::MAX;
    let mut cases = 0;
    for (k, name) in GOLDEN.iter().enumerate() {
        let exp = experiment(name)?;
        for t in [25, 50, 75] {
            let oracle = OraclePredictor::new(&exp.dist, &exp.schedule, t)?;
            let mut rng = derived_rng(SEED, 4, (k * 1000 + t) as u64);
            let g = stationarity_summary(&oracle, &exp.dist, &exp.schedule, t, 2000, &mut rng)?;
            worst_g = worst_g.max(g.max_norm);
            let mut zero = 0;
            for _ in 0..10 {
                let h = PerturbationSpec::default().generate(exp.dist.dim(), &mut rng);
                let report = gateaux_derivative_check(&oracle, &h, &exp.dist, &exp.schedule, t, &DEFAULT_S_VALUES, 20_000, &mut rng)?;
                ok &= report.quadratic > 0.0;
                zero += usize::from(report.linear_is_zero(3.0));
            }
            least = least.min(zero);
            cases += 1;
        }
    }
    ok &= least >= 9 && worst_g <= 1e-12;
    verdict(
        ok,
        format!("{cases} cases, fewest zero-linear directions {least}/10 (need 9), max |g| {worst_g:.1e} <= 1e-12"),
    )
}

fn training_check() -> Result<Verdict> {
    let spec = FamilySpec::grid(200);
    let mut ok = true;
    let mut worst = 0.0_f64;
    let mut curves = Vec::new();
    for (k, name) in GOLDEN_1D.iter().enumerate() {
        let exp = experiment(name)?;
        for t in [25, 50, 75] {
            let mut rng = derived_rng(SEED, 5, (k * 1000 + t) as u64);
            let (f, _) = fit_least_squares(&spec, &exp.dist, &exp.schedule, t, 200_000, &mut rng)?;
            let mut eval_rng = derived_rng(SEED, 6, (k * 1000 + t) as u64);
            let cmp = compare_to_oracle(&f, &exp.dist, &exp.schedule, t, 20_000, &mut eval_rng)?;
            worst = worst.max(cmp.rmse_gate_region);
        }
        let t = 50;
        let mut medians = Vec::new();
        for n in [10_000, 100_000, 1_000_000] {
            let mut rmse = Vec::new();
            for seed in 0..5 {
                let mut rng = derived_rng(SEED + seed, 7, (k * 1000 + n) as u64);
                let (f, _) = fit_least_squares(&spec, &exp.dist, &exp.schedule, t, n, &mut rng)?;
                let mut eval_rng = derived_rng(SEED, 8, k as u64);
                rmse.push(compare_to_oracle(&f, &exp.dist, &exp.schedule, t, 20_000, &mut eval_rng)?.rmse_gate_region);
            }
            medians.push(median(rmse));
        }
        let decreasing = medians.windows(2).all(|w| w[1] < w[0]);
        ok &= decreasing;
        curves.push(format!("{name} {:.4e}>{:.4e}>{:.4e}", medians[0], medians[1], medians[2]));
    }
    ok &= worst <= 0.05;
    verdict(ok, format!("worst RMSE at n=2e5 {worst:.3} <= 0.05; medians {}", curves.join(", ")))
}

fn sampling_check(tmp: &Path) -> Result<Verdict> {
    let mut ok = true;
    let out = tmp.join("twopoint");
    ok &= cli(&["sample", "--config", golden("twopoint1d").to_str().unwrap(), "--out", out.to_str().unwrap()])? == 0;
    let m = json(&out.join("sample_metrics.json"))?;
    let n = f64_of(&m, "n")?;
    ensure!(n == 10_000.0, "two-point config must draw 1e4 samples");
    let freq: Vec<f64> = m["assignment"].as_array().context("no assignment")?.iter().filter_map(Value::as_f64).collect();
    let band = 4.0 * (0.25 / n).sqrt();
    let assign_dev = freq.iter().map(|p| (p - 0.5).abs()).fold(0.0, f64::max);
    let w1 = f64_of(&m, "wasserstein1")?;
    ok &= freq.len() == 2 && assign_dev <= band && w1 <= 0.1;

    let out = tmp.join("gauss");
    ok &= cli(&["sample", "--config", golden("gauss1d").to_str().unwrap(), "--out", out.to_str().unwrap()])? == 0;
    let var = json(&out.join("sample_metrics.json"))?["sample_variance"][0].as_f64().context("no variance")?;
    ok &= (0.9..=1.1).contains(&var);

    let mut cfg: Value = serde_json::from_str(&fs::read_to_string(golden("twopoint1d"))?)?;
    cfg["sample"]["predictor"] = "zero".into();
    let zero_cfg = tmp.join("zero.json");
    fs::write(&zero_cfg, cfg.to_string())?;
    let out = tmp.join("zero");
    let zero_code = cli(&["sample", "--config", zero_cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])?;
    let zero_pass = json(&out.join("sample_summary.json"))?["pass"].as_bool();
    ok &= zero_code == 2 && zero_pass == Some(false);

    verdict(
        ok,
        format!(
            "two-point max |freq-0.5| {assign_dev:.4} <= {band:.4}, W1 {w1:.4} <= 0.1; gaussian variance {var:.4}; zero predictor exit {zero_code}"
        ),
    )
}

fn anchors_check() -> Result<Verdict> {
    let dirac = experiment("dirac")?;
    let DataDistribution::Discrete(ps) = &dirac.dist else { anyhow::bail!("dirac config is not discrete") };
    let c = ps.points()[0][0];
    let gauss = experiment("gauss1d")?;
    let two = experiment("twopoint1d")?;
    let (mut dirac_err, mut gauss_err, mut tanh_err, mut tanh_closed) = (0.0_f64, 0.0_f64, 0.0_f64, 0.0_f64);
    let s = &dirac.schedule;
    let quad = GridSpec::for_dim(1);
    for t in 1..=s.num_steps() {
        let ab = s.alpha_bar(t);
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        let mut rng = derived_rng(SEED, 9, t as u64);
        for x in draw_probes(&dirac.dist, s, t, 10, true, &mut rng)? {
            let expected = [(x[0] - sa * c) / sn];
            dirac_err = dirac_err.max(max_abs_error(&epsilon_star(&dirac.dist, s, t, &x)?, &expected));
            dirac_err = dirac_err.max(max_abs_error(&epsilon_from_score(&dirac.dist, s, t, &x)?, &expected));
        }
        for x in draw_probes(&gauss.dist, s, t, 10, true, &mut rng)? {
            let expected = [sn * x[0]];
            gauss_err = gauss_err.max(max_abs_error(&epsilon_star(&gauss.dist, s, t, &x)?, &expected));
            gauss_err = gauss_err.max(max_abs_error(&epsilon_from_score(&gauss.dist, s, t, &x)?, &expected));
        }
        for x in draw_probes(&two.dist, s, t, 10, true, &mut rng)? {
            let expected = [(x[0] - sa * (sa * x[0] / (1.0 - ab)).tanh()) / sn];
            let q = epsilon_star_quadrature(&two.dist, s, t, &x, &quad)?;
            tanh_err = tanh_err.max(mixed_error(&q.value, &expected));
            tanh_closed = tanh_closed.max(mixed_error(&epsilon_star(&two.dist, s, t, &x)?, &expected));
        }
    }
    verdict(
        dirac_err <= 1e-12 && gauss_err <= 1e-12 && tanh_err <= 1e-6 && tanh_closed <= 1e-6,
        format!(
            "dirac {dirac_err:.1e} <= 1e-12, standard normal {gauss_err:.1e} <= 1e-12, two-point tanh vs quadrature {tanh_err:.1e} <= 1e-6"
        ),
    )
}

fn main() {
    let tmp = TempDir::new().expect("temp dir");
    let root = tmp.path();
    let criteria: [(&str, u64, Check); 7] = [
        ("identity across golden distributions", 10, Box::new(|| identity_suite(&root.join("c1")))),
        ("closed form vs quadrature and Monte Carlo", 60, Box::new(|| theorem_suite(&root.join("c2")))),
        ("analytic score vs finite differences", 5, Box::new(score_check)),
        ("oracle stationarity and first variation", 60, Box::new(variational_check)),
        ("least-squares fits converge to the oracle", 180, Box::new(training_check)),
        ("ancestral sampling matches the data law", 60, Box::new(|| sampling_check(&root.join("c6")))),
        ("closed-form anchors", 60, Box::new(anchors_check)),
    ];
    let mut failed = 0;
    for (i, (name, budget, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = check();
        let elapsed = start.elapsed();
        let in_time = elapsed <= Duration::from_secs(*budget);
        let (pass, detail) = match result {
            Ok(v) => (v.pass && in_time, v.detail),
            Err(e) => (false, format!("error: {e:#}")),
        };
        failed += usize::from(!pass);
        println!(
            "criterion {}: {} {name}: {detail} [{:.2} s of {budget} s]",
            i + 1,
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
