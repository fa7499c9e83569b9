//! Argument parsing and exit codes.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{ensure, Context, Result};
use clap::{Args, Parser, Subcommand};

use crate::config::{Experiment, ExperimentConfig};
use crate::output::Summary;
use crate::report;
use crate::suites::{self, RunOptions};

pub const EXIT_PASS: u8 = 0;
pub const EXIT_ERROR: u8 = 1;
pub const EXIT_GATE: u8 = 2;

/// Output directory when neither `--out`, the config nor `EPSORACLE_OUT`
/// names one.
pub const DEFAULT_OUT: &str = "epsoracle-out";

#[derive(Debug, Parser)]
#[command(name = "epsoracle", version, about = "Verify the closed-form optimal diffusion noise predictor")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory [default: config out_dir, then $EPSORACLE_OUT, then ./epsoracle-out].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the suite's headline tolerance.
    #[arg(long)]
    tol: Option<f64>,
    /// Worker threads [default: all cores].
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Closed form vs quadrature, Monte Carlo and finite differences.
    VerifyTheorem(RunArgs),
    /// Posterior path vs score path.
    VerifyIdentity {
        #[command(flatten)]
        run: RunArgs,
        /// Debug: perturb the score path so the gate must fail.
        #[arg(long, hide = true)]
        corrupt_score: bool,
    },
    /// Least-squares fits, oracle comparison and first-variation checks.
    Train(RunArgs),
    /// Ancestral sampling and distribution match.
    Sample(RunArgs),
    /// Summary table over the suites in an output directory.
    Report {
        /// Directory to read [default: $EPSORACLE_OUT, then ./epsoracle-out].
        dir: Option<PathBuf>,
    },
}

/// Parses `args` (including the program name), runs, and maps the outcome to
/// an exit code.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { EXIT_PASS };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(true) => ExitCode::from(EXIT_PASS),
        Ok(false) => ExitCode::from(EXIT_GATE),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}

fn env_out() -> Option<PathBuf> {
    std::env::var_os("EPSORACLE_OUT").filter(|v| !v.is_empty()).map(PathBuf::from)
}

fn dispatch(command: Command) -> Result<bool> {
    match command {
        Command::VerifyTheorem(a) => run_suite(&a, false, suites::verify_theorem),
        Command::VerifyIdentity { run, corrupt_score } => run_suite(&run, corrupt_score, suites::verify_identity),
        Command::Train(a) => run_suite(&a, false, suites::train),
        Command::Sample(a) => run_suite(&a, false, suites::sample),
        Command::Report { dir } => {
            let dir = dir.or_else(env_out).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
            let lines = report::collect_report(&dir)?;
            print!("{}", report::render_report(&lines));
            Ok(lines.iter().all(|l| l.status != "fail"))
        }
    }
}

fn prepare(args: &RunArgs) -> Result<(Experiment, PathBuf)> {
    let mut config = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(tol) = args.tol {
        ensure!(tol.is_finite() && tol >= 0.0, "--tol must be a nonnegative number");
    }
    ensure!(args.jobs != Some(0), "--jobs must be positive");
    let out = args
        .out
        .clone()
        .or_else(|| config.out_dir.clone())
        .or_else(env_out)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    let exp = config.build().with_context(|| format!("in {}", args.config.display()))?;
    Ok((exp, out))
}

fn run_suite(args: &RunArgs, corrupt_score: bool, suite: fn(&Experiment, &RunOptions) -> Result<Summary>) -> Result<bool> {
    let (exp, out_dir) = prepare(args)?;
    let opts = RunOptions {
        out_dir,
        tol: args.tol,
        corrupt_score,
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = args.jobs {
        pool = pool.num_threads(n);
    }
    let pool = pool.build().context("cannot start worker threads")?;
    let summary = pool.install(|| suite(&exp, &opts))?;
    print_summary(&summary, &opts.out_dir);
    Ok(summary.pass)
}

fn print_summary(s: &Summary, dir: &Path) {
    println!(
        "{}: {} (worst error {:.3e}, {:.2} s, {} rows) -> {}",
        s.suite,
        if s.pass { "PASS" } else { "FAIL" },
        s.worst_error,
        s.runtime_seconds,
        s.rows,
        dir.display()
    );
    for g in &s.gates {
        println!(
            "  {:<34} {}  value {:.3e}  threshold {:.3e}",
            g.name,
            if g.pass { "pass" } else { "FAIL" },
            g.value,
            g.threshold
        );
    }
    for n in &s.notes {
        println!("  note: {n}");
    }
}
