use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use orthosync::solver::{Algorithm, Retraction, SolverConfig};

#[derive(Debug, Parser)]
#[command(name = "orthosync", version, about = "Orthogonal group synchronization")]
pub struct Cli {
    /// Base random seed.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Worker threads for block-level parallelism.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,

    /// Output directory (synth, solve, verify, align) or file (bench).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Format of tabular outputs.
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    pub format: Format,

    /// Run bench cells concurrently, one thread per cell.
    #[arg(long, global = true)]
    pub parallel_cells: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic instance directory.
    Synth(SynthArgs),
    /// Solve an instance directory.
    Solve(SolveArgs),
    /// Sweep a grid of synthetic instances and tabulate accuracy and time.
    Bench(BenchArgs),
    /// Run the leave-one-out and contraction checks.
    Verify(VerifyArgs),
    /// Solve an edge-list file of pairwise measurements.
    Align(AlignArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub d: usize,
    #[arg(long)]
    pub sigma: f64,
    #[arg(long)]
    pub p: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum AlgorithmArg {
    NsRgs,
    Gpm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum RetractionArg {
    NewtonSchulz,
    ExactSvd,
}

#[derive(Debug, Clone, Args)]
pub struct SolverArgs {
    #[arg(long, value_enum, default_value_t = AlgorithmArg::NsRgs)]
    pub algorithm: AlgorithmArg,
    /// Defaults to exact_svd for gpm and newton_schulz otherwise.
    #[arg(long, value_enum)]
    pub retraction: Option<RetractionArg>,
    /// Newton-Schulz depth.
    #[arg(long = "t-s", default_value_t = 1)]
    pub t_s: usize,
    /// Step size; defaults to 1/(n p).
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long, default_value_t = 100)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1e-8)]
    pub stop_tol: f64,
    /// Use observed degrees instead of n-1 in the gradient.
    #[arg(long)]
    pub degree_normalized: bool,
}

impl SolverArgs {
    pub fn config(&self, parallel: bool) -> SolverConfig {
        let algorithm = match self.algorithm {
            AlgorithmArg::NsRgs => Algorithm::NsRgs,
            AlgorithmArg::Gpm => Algorithm::Gpm,
        };
        let retraction = match (self.retraction, algorithm) {
            (Some(RetractionArg::NewtonSchulz), _) => Retraction::NewtonSchulz,
            (Some(RetractionArg::ExactSvd), _) | (None, Algorithm::Gpm) => Retraction::ExactSvd,
            (None, Algorithm::NsRgs) => Retraction::NewtonSchulz,
        };
        SolverConfig {
            mu: self.mu,
            t_s: self.t_s,
            max_iter: self.max_iter,
            stop_tol: self.stop_tol,
            retraction,
            algorithm,
            degree_normalized: self.degree_normalized,
            step_stats: true,
            parallel,
        }
    }
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    /// Instance directory written by `synth`.
    #[arg(long)]
    pub instance: PathBuf,
    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "500")]
    pub n: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "25")]
    pub d: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0.02,0.1,0.2")]
    pub sigma: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "1.0,0.8,0.5")]
    pub p: Vec<f64>,
    #[arg(long, default_value_t = 10)]
    pub trials: usize,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "ns_rgs,gpm")]
    pub algorithms: Vec<AlgorithmArg>,
    /// Newton-Schulz depths tried for ns_rgs.
    #[arg(long = "t-s", value_delimiter = ',', default_value = "1")]
    pub t_s: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1e-8)]
    pub stop_tol: f64,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Instance directory with ground truth; generated from the synthetic
    /// parameters below when absent.
    #[arg(long)]
    pub instance: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value_t = 3)]
    pub d: usize,
    #[arg(long, default_value_t = 0.05)]
    pub sigma: f64,
    #[arg(long, default_value_t = 1.0)]
    pub p: f64,
    /// Iterations tracked per sequence.
    #[arg(long, default_value_t = 20)]
    pub t_max: usize,
    /// Largest n accepted (n+1 solver runs).
    #[arg(long, default_value_t = 200)]
    pub max_n: usize,
    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    /// Edge-list file: header `# n=<n> d=<d>`, then `i j m11 ... mdd`.
    #[arg(long)]
    pub edges: PathBuf,
    /// Reference poses, one row-major block per line.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[command(flatten)]
    pub solver: SolverArgs,
}
