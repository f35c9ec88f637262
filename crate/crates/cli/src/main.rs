mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use partsel::Error;

/// Differentially private partition selection.
#[derive(Debug, Parser)]
#[command(name = "psel", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the noise scale and thresholds for a budget as JSON.
    Calibrate(CalibrateArgs),
    /// Select items from a dataset.
    Run(RunArgs),
    /// Check sensitivity, dominance or calibration empirically.
    Verify(VerifyArgs),
    /// Print dataset statistics as JSON.
    Stats(StatsArgs),
    /// Write the heavy/light gap instance as user<TAB>item lines.
    SynthGap(SynthGapArgs),
    /// Write a Zipfian corpus as user<TAB>item lines.
    SynthZipf(SynthZipfArgs),
    /// Report how much of a dataset a selection covers.
    Coverage(CoverageArgs),
}

#[derive(Debug, Args)]
struct BudgetArgs {
    #[arg(long, default_value_t = 1.0)]
    eps: f64,
    #[arg(long, default_value_t = 1e-5)]
    delta: f64,
    /// Per-user degree cap.
    #[arg(long, default_value_t = 100)]
    delta0: usize,
}

#[derive(Debug, Args)]
struct InputArgs {
    #[arg(long)]
    input: PathBuf,
    /// pairs-tsv or docs-text.
    #[arg(long, default_value = "pairs-tsv")]
    format: String,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    #[command(flatten)]
    budget: BudgetArgs,
    #[arg(long, default_value_t = 2.0)]
    beta: f64,
    /// Scale of the novel-item bound h(t) = bmax / sqrt(t).
    #[arg(long, default_value_t = 1.0)]
    bmax: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Algo {
    Basic,
    Mad,
    Mad2r,
    Dpsips,
    Policy,
    Greedy,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long, value_enum)]
    algo: Algo,
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    budget: BudgetArgs,
    /// Adaptive threshold offset in noise units (default 2, or 4 for policy and greedy).
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long, default_value_t = 50.0)]
    dmax: f64,
    /// Seed for capping, noise and user order; drawn from the OS when absent.
    #[arg(long)]
    seed: Option<u64>,
    /// Selected item names, one per line.
    #[arg(long)]
    output: PathBuf,
    /// Metrics JSON path (default: <output>.metrics.json).
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Budget fractions per round for mad2r and dpsips.
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.9")]
    split: Vec<f64>,
    #[arg(long, default_value_t = 1.0)]
    clb: f64,
    #[arg(long, default_value_t = 3.0)]
    cub: f64,
    #[arg(long, default_value_t = 0.5)]
    bmin: f64,
    #[arg(long, default_value_t = 2.0)]
    bmax: f64,
    /// Allow tau < 1 or dmax < 4, where the sensitivity bounds are not proved.
    #[arg(long = "unsafe")]
    allow_unsafe: bool,
    /// Print per-stage timings to stderr. Requires --seed.
    #[arg(long, requires = "seed")]
    benchmark: bool,
    /// Largest input accepted by the sequential baselines.
    #[arg(long, default_value_t = 500_000_000)]
    max_sequential_entries: u64,
    /// Write noisy weights to this path. The file is NOT private.
    #[arg(long)]
    dump_noisy_weights: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[command(subcommand)]
    check: VerifyCheck,
    /// Write the JSON report here instead of stdout.
    #[arg(long, global = true)]
    report: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum VerifyCheck {
    /// Exhaustive sensitivity sweep over small neighbor pairs.
    Sensitivity,
    /// Selection frequencies of Basic and MAD on random instances and the gap instance.
    Dominance {
        #[arg(long, default_value_t = 50)]
        instances: usize,
        #[arg(long, default_value_t = 10_000)]
        trials: u64,
        #[arg(long, default_value_t = 2.0)]
        beta: f64,
        #[arg(long, default_value_t = 4.0)]
        dmax: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        budget: BudgetArgs,
    },
    /// Monte Carlo estimate of the novel-item crossing probability.
    Calibration {
        #[arg(long, default_value_t = 1_000_000)]
        samples: u64,
        #[arg(long, value_delimiter = ',', default_value = "1,2,10,50,100")]
        ts: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        budget: BudgetArgs,
    },
}

#[derive(Debug, Args)]
struct StatsArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Recount from a second scan and fail on any mismatch.
    #[arg(long)]
    strict: bool,
}

#[derive(Debug, Args)]
struct SynthGapArgs {
    #[arg(long, default_value_t = 15_000)]
    n: usize,
    #[arg(long, default_value_t = 1000)]
    m: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Debug, Args)]
struct SynthZipfArgs {
    /// dense, balanced or tall.
    #[arg(long, conflicts_with = "entries")]
    preset: Option<String>,
    /// Approximate number of user-item pairs.
    #[arg(long)]
    entries: Option<u64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Debug, Args)]
struct CoverageArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Selected item names, one per line.
    #[arg(long)]
    selected: PathBuf,
}

/// Exit statuses.
const EXIT_USAGE: u8 = 1;
const EXIT_VERIFY: u8 = 2;
const EXIT_IO: u8 = 3;

/// A failed verification, reported after its JSON has been written.
#[derive(Debug)]
pub struct VerificationFailed(pub String);

impl std::fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "verification failed: {}", self.0)
    }
}

impl std::error::Error for VerificationFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<VerificationFailed>() {
            return EXIT_VERIFY;
        }
        if cause.is::<std::io::Error>() {
            return EXIT_IO;
        }
        match cause.downcast_ref::<Error>() {
            Some(Error::Io { .. } | Error::Parse { .. }) => return EXIT_IO,
            Some(Error::Invariant(_)) => return EXIT_VERIFY,
            Some(_) => return EXIT_USAGE,
            None => {}
        }
    }
    EXIT_USAGE
}

fn init_workers() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("PSEL_WORKERS") {
        let n: usize = v
            .parse()
            .map_err(|_| Error::InvalidParameter(format!("PSEL_WORKERS must be a positive integer, got {v:?}")))?;
        if n == 0 {
            return Err(Error::InvalidParameter("PSEL_WORKERS must be >= 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = init_workers().and_then(|()| match cli.command {
        Command::Calibrate(a) => commands::calibrate(a),
        Command::Run(a) => commands::run(a),
        Command::Verify(a) => commands::verify(a),
        Command::Stats(a) => commands::stats(a),
        Command::SynthGap(a) => commands::synth_gap(a),
        Command::SynthZipf(a) => commands::synth_zipf(a),
        Command::Coverage(a) => commands::coverage(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
