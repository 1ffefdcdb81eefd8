//! `mmd-forge` command-line tool.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success; for `test`, H₀ not rejected |
//! | 1 | usage, configuration, data or I/O error |
//! | 2 | training diverged (last good checkpoint kept) |
//! | 3 | `test` rejected H₀ |

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mmd_forge::config::RunConfig;
use mmd_forge::eval::{self, ExperimentReport};
use mmd_forge::kernels::{Kernel, KernelSpec, RbfConvention};
use mmd_forge::{checkpoint, data, mmd, rng, training, Error};
use serde::{Deserialize, Serialize};

const EXIT_ERROR: u8 = 1;
const EXIT_DIVERGED: u8 = 2;
const EXIT_REJECT: u8 = 3;

const EXPERIMENTS: [&str; 4] = ["power", "weakstar", "timing", "coverage"];

#[derive(Parser)]
#[command(name = "mmd-forge", version, about = "MMD two-sample tests and adversarially learned kernels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a generator; writes trace.csv, checkpoint.bin and config.echo.
    Train(TrainArgs),
    /// Permutation two-sample test between two CSV files.
    Test(TestArgs),
    /// Sample from a trained checkpoint into a CSV file.
    Gen(GenArgs),
    /// Time one critic step plus one generator step across batch sizes.
    Bench(BenchArgs),
    /// Run a named experiment: power, weakstar, timing or coverage.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration; defaults apply to omitted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set train.batch_size=128`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> mmd_forge::Result<RunConfig> {
        RunConfig::load_with_overrides(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum KernelKind {
    MixtureRbf,
    Gaussian,
    Linear,
    Polynomial,
}

#[derive(Clone, Copy, ValueEnum)]
enum Convention {
    TwoSigmaSq,
    SigmaSq,
    Sigma,
}

#[derive(Args)]
struct TestArgs {
    /// Headerless CSV, one sample per row.
    x: PathBuf,
    y: PathBuf,
    #[arg(long, value_enum, default_value = "mixture-rbf")]
    kernel: KernelKind,
    /// Bandwidths for the mixture kernel.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
    sigmas: Vec<f64>,
    /// Bandwidth for the single Gaussian kernel.
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, value_enum, default_value = "two-sigma-sq")]
    convention: Convention,
    #[arg(long, default_value_t = 2)]
    degree: u32,
    #[arg(long, default_value_t = 1.0)]
    offset: f64,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = 500)]
    permutations: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Compose the kernel with the encoder stored in this checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

impl TestArgs {
    fn kernel(&self) -> Kernel {
        let convention = match self.convention {
            Convention::TwoSigmaSq => RbfConvention::TwoSigmaSq,
            Convention::SigmaSq => RbfConvention::SigmaSq,
            Convention::Sigma => RbfConvention::Sigma,
        };
        match self.kernel {
            KernelKind::MixtureRbf => Kernel::MixtureRbf {
                sigmas: self.sigmas.clone(),
                convention,
            },
            KernelKind::Gaussian => Kernel::Gaussian {
                sigma: self.sigma,
                convention,
            },
            KernelKind::Linear => Kernel::Linear,
            KernelKind::Polynomial => Kernel::Polynomial {
                degree: self.degree,
                offset: self.offset,
            },
        }
    }
}

/// Fully resolved `gen` invocation; echoed next to the output file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GenSpec {
    checkpoint: PathBuf,
    count: usize,
    seed: u64,
}

#[derive(Args)]
struct GenArgs {
    /// Re-run from a `.echo` file written by an earlier `gen`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',')]
    batch_sizes: Option<Vec<usize>>,
    #[arg(long)]
    repetitions: Option<usize>,
}

#[derive(Args)]
struct ExperimentArgs {
    /// One of power, weakstar, timing, coverage.
    name: String,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
    /// For coverage: evaluate this checkpoint instead of training one.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Core(Error),
    Usage(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Usage(m) => f.write_str(m),
        }
    }
}

type CliResult = Result<u8, CliError>;

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string(value).expect("report serializes"));
}

fn write_echo(dir: &Path, cfg: &RunConfig) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.echo"), cfg.to_toml())
}

fn cmd_train(args: &TrainArgs) -> CliResult {
    let cfg = args.config.load()?;
    write_echo(&args.out, &cfg)?;
    let outcome = training::train(&cfg, Some(&args.out))?;
    let held = outcome.trace.held_out();
    print_json(&serde_json::json!({
        "iterations": cfg.train.generator_iters,
        "rows": outcome.trace.rows.len(),
        "initial_held_out_mmd2": held.first(),
        "final_held_out_mmd2": held.last(),
    }));
    Ok(0)
}

fn cmd_test(args: &TestArgs) -> CliResult {
    let x = data::read_csv(&args.x)?;
    let y = data::read_csv(&args.y)?;
    if x.cols() != y.cols() {
        return Err(CliError::Core(Error::Dimension {
            op: "test",
            left: x.shape(),
            right: y.shape(),
        }));
    }
    let kernel = args.kernel();
    kernel.validate()?;
    let encoder = match &args.checkpoint {
        Some(p) => Some(checkpoint::load(p, 0.0)?.encoder),
        None => None,
    };
    let spec = match &encoder {
        Some(encoder) => KernelSpec::Composed { inner: &kernel, encoder },
        None => KernelSpec::Plain(&kernel),
    };
    let decision = mmd::permutation_test(&x, &y, spec, args.alpha, args.permutations, args.seed)?;
    print_json(&decision);
    Ok(if decision.reject { EXIT_REJECT } else { 0 })
}

fn cmd_gen(args: &GenArgs) -> CliResult {
    let mut spec = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            toml::from_str::<GenSpec>(&text).map_err(|e| Error::Parse {
                path: p.clone(),
                line: 0,
                message: e.message().to_string(),
            })?
        }
        None => GenSpec::default(),
    };
    if let Some(c) = &args.checkpoint {
        spec.checkpoint = c.clone();
    }
    if let Some(n) = args.count {
        spec.count = n;
    }
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    if spec.checkpoint.as_os_str().is_empty() {
        return Err(CliError::Usage("gen needs --checkpoint (or --config)".into()));
    }
    let bundle = checkpoint::load(&spec.checkpoint, 0.0)?;
    let z = bundle.noise.sample(spec.count, &mut rng::seeded(spec.seed))?;
    let samples = bundle.generate(&z)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    data::write_csv(&args.out, &samples)?;
    let mut echo = args.out.clone().into_os_string();
    echo.push(".echo");
    std::fs::write(echo, toml::to_string(&spec).expect("gen spec serializes"))?;
    Ok(0)
}

fn finish(report: &ExperimentReport, out: &Path) -> CliResult {
    report.write(out)?;
    print_json(&serde_json::json!({
        "experiment": report.name,
        "summary": report.summary,
        "seeds": report.seeds,
        "wall_clock_secs": report.wall_clock_secs,
    }));
    Ok(0)
}

fn cmd_bench(args: &BenchArgs) -> CliResult {
    let mut cfg = args.config.load()?;
    if let Some(b) = &args.batch_sizes {
        cfg.eval.timing.batch_sizes = b.clone();
    }
    if let Some(r) = args.repetitions {
        cfg.eval.timing.repetitions = r;
    }
    cfg.validate()?;
    write_echo(&args.out, &cfg)?;
    let (_, report) = eval::timing_bench(&cfg, &cfg.eval.timing, &cfg.kernel)?;
    finish(&report, &args.out)
}

fn cmd_experiment(args: &ExperimentArgs) -> CliResult {
    if !EXPERIMENTS.contains(&args.name.as_str()) {
        return Err(CliError::Usage(format!(
            "unknown experiment `{}`; valid names: {}",
            args.name,
            EXPERIMENTS.join(", ")
        )));
    }
    let cfg = args.config.load()?;
    write_echo(&args.out, &cfg)?;
    let report = match args.name.as_str() {
        "power" => eval::power_experiment(&cfg.eval.power)?.1,
        "weakstar" => eval::weakstar_experiment(&cfg.eval.weakstar)?.1,
        "timing" => eval::timing_bench(&cfg, &cfg.eval.timing, &cfg.kernel)?.1,
        _ => {
            let bundle = match &args.checkpoint {
                Some(p) => checkpoint::load(p, cfg.train.learning_rate)?,
                None => training::train(&cfg, Some(&args.out))?.bundle,
            };
            let r = cfg.eval.coverage_radius;
            eval::coverage_report(&bundle, &cfg, &[r / 2.0, r, 2.0 * r])?
        }
    };
    finish(&report, &args.out)
}

fn configure_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("MMD_FORGE_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| CliError::Usage(format!("MMD_FORGE_THREADS must be a positive integer, got `{v}`")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_ERROR } else { 0 });
        }
    };
    let result = configure_threads().and_then(|_| match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Test(a) => cmd_test(a),
        Command::Gen(a) => cmd_gen(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Experiment(a) => cmd_experiment(a),
    });
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                CliError::Core(Error::Divergence { .. }) => EXIT_DIVERGED,
                _ => EXIT_ERROR,
            })
        }
    }
}
