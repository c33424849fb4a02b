//! `moe`: simulate, fit, select, predict and summarize mixture-of-experts models.

mod commands;
mod error;
mod model_file;
mod table;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "moe",
    version,
    about = "Soft-max gated mixture-of-experts models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset plus a sidecar JSON of its parameters.
    #[command(subcommand)]
    Simulate(Simulate),
    /// Fit a model with a fixed number of components.
    Fit(FitArgs),
    /// Fit g = 1..G and keep the model with the smallest BIC.
    Select(SelectArgs),
    /// Apply a fitted model to every row of a dataset.
    Predict(PredictArgs),
    /// Print a model and optionally write its coefficient table.
    Summarize(SummarizeArgs),
}

#[derive(Debug, Subcommand)]
enum Simulate {
    /// Uniform points on [-5,5]^2 labelled by disc, squares or background.
    ThreeClass {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draws from the model in a model file.
    Moe {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Sampler::Normal)]
        sampler: Sampler,
        /// Lower bound for the uniform sampler.
        #[arg(long, default_value_t = -1.0, allow_negative_numbers = true)]
        low: f64,
        /// Upper bound for the uniform sampler.
        #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
        high: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Piecewise-quadratic signal over a time grid on [0, 1].
    SwitchSignal {
        #[arg(long, value_enum, default_value_t = Preset::Default, conflicts_with = "spec")]
        preset: Preset,
        /// JSON signal specification (n, breakpoints, regimes, seed).
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Sampler {
    Normal,
    Uniform,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    Default,
    FourRegime,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FamilyArg {
    Gaussian,
    Logistic,
    Poisson,
    Multinomial,
}

#[derive(Debug, Args)]
struct DataArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    family: FamilyArg,
    /// Number of classes for the multinomial family.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value = "y")]
    response: String,
    /// Comma-separated covariate columns; defaults to every column except
    /// the response and `z_true`.
    #[arg(long, value_delimiter = ',')]
    covariates: Option<Vec<String>>,
    /// Experts regress on x1, x1^2, ..., x1^degree instead of the raw covariates.
    #[arg(long)]
    degree: Option<usize>,
}

#[derive(Debug, Args)]
struct EstimationArgs {
    #[arg(long, default_value_t = 10)]
    starts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    max_cycles: usize,
    #[arg(long, default_value_t = 1e-8)]
    rel_tol: f64,
    #[arg(long, default_value_t = 25)]
    irls_max_inner: usize,
    #[arg(long, default_value_t = 1e-10)]
    variance_floor_factor: f64,
    /// Plain MM steps without Newton gating moves or extrapolation.
    #[arg(long)]
    no_accelerate: bool,
    #[arg(long, env = "MOE_THREADS", default_value_t = 1)]
    threads: usize,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    estimation: EstimationArgs,
    /// Number of components.
    #[arg(long)]
    g: usize,
    /// Also store the sandwich covariance in the model file.
    #[arg(long)]
    covariance: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SelectArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    estimation: EstimationArgs,
    /// Largest number of components tried.
    #[arg(long = "max-g")]
    max_g: usize,
    #[arg(long)]
    covariance: bool,
    /// Model file for the selected g.
    #[arg(long)]
    out: PathBuf,
    /// BIC table with columns g, logQL, dim, bic, converged, degenerate.
    #[arg(long)]
    bic_table: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Classify,
    ClusterPosterior,
    ClusterGate,
    Mean,
    Variance,
    MeanCi,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    mode: Mode,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SummarizeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// Coefficient table with standard errors and interval bounds.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(s) => commands::simulate(s),
        Command::Fit(a) => commands::fit(a),
        Command::Select(a) => commands::select(a),
        Command::Predict(a) => commands::predict(a),
        Command::Summarize(a) => commands::summarize(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
