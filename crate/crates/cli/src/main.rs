mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Model-free 2DOF PI tuning for noisy MIMO LTI plants.
#[derive(Debug, Parser)]
#[command(name = "pi2dof", version)]
pub struct Cli {
    /// Master seed; every random stream is derived from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// JSON experiment configuration supplying defaults for every option.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Directory receiving all output files.
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,

    /// Record wall-clock times (makes outputs non-reproducible).
    #[arg(long, global = true)]
    pub timing: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a random stable plant.
    GenSystem(GenSystemArgs),
    /// Estimate the feedforward input from proportional experiments.
    Feedforward(FeedforwardArgs),
    /// Tune PI gains with zeroth-order projected gradient descent.
    Tune(TuneArgs),
    /// Identify a discrete model and tune gains on it.
    Baseline(BaselineArgs),
    /// Run the full comparison over systems and trials.
    Experiment(ExperimentArgs),
    /// Evaluate the averaged closed-loop cost of a gain.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct GenSystemArgs {
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub p: Option<usize>,
    /// Zero process and measurement noise.
    #[arg(long)]
    pub noiseless: bool,
    #[arg(long, default_value = "plant.json")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FeedforwardArgs {
    #[arg(long)]
    pub plant: PathBuf,
    /// Experiment horizon, or `auto` to derive it from a measured decay rate.
    #[arg(long = "tau-u")]
    pub tau_u: Option<String>,
    /// Probe gain: a scale of the identity or a JSON file with an m x p matrix.
    #[arg(long = "kp-probe")]
    pub kp_probe: Option<String>,
    /// Horizon of the decay experiment used by `--tau-u auto`.
    #[arg(long = "tau-large", default_value_t = 200.0)]
    pub tau_large: f64,
    /// Setpoint as comma-separated values.
    #[arg(long = "y-star")]
    pub y_star: Option<String>,
    #[arg(long, default_value = "ff.json")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    #[arg(long)]
    pub plant: PathBuf,
    /// Feedforward file; the true equilibrium input is used when omitted.
    #[arg(long)]
    pub ff: Option<PathBuf>,
    /// Frobenius radii of the K_P and K_I balls.
    #[arg(long)]
    pub omega: Option<String>,
    #[arg(long = "N")]
    pub n_dirs: Option<usize>,
    #[arg(long = "Nsub")]
    pub n_sub: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub r: Option<f64>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long = "T")]
    pub iterations: Option<usize>,
    /// Initial gain scales `k_p,k_i`.
    #[arg(long)]
    pub k0: Option<String>,
    #[arg(long)]
    pub q1: Option<f64>,
    #[arg(long)]
    pub q2: Option<f64>,
    /// Share noise between the two rollouts of each direction.
    #[arg(long = "paired-noise")]
    pub paired_noise: bool,
    #[arg(long = "no-stop-test")]
    pub no_stop_test: bool,
    #[arg(long = "y-star")]
    pub y_star: Option<String>,
    #[arg(long, default_value = "trace.json")]
    pub trace: PathBuf,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[arg(long)]
    pub plant: PathBuf,
    #[arg(long)]
    pub h: Option<f64>,
    /// Identification samples, or `auto` to match the model-free budget.
    #[arg(long = "Nid", default_value = "auto")]
    pub n_id: String,
    /// Model order, or `auto` for the largest Hankel singular-value gap.
    #[arg(long, default_value = "auto")]
    pub order: String,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub iters: Option<usize>,
    /// Feedforward file whose horizon enters the `auto` budget.
    #[arg(long)]
    pub ff: Option<PathBuf>,
    #[arg(long = "y-star")]
    pub y_star: Option<String>,
    #[arg(long, default_value = "baseline.json")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// Override the number of trials per system.
    #[arg(long)]
    pub trials: Option<usize>,
    /// Use only the first k configured system seeds.
    #[arg(long)]
    pub systems: Option<usize>,
    /// Print one line per completed row to stderr.
    #[arg(long)]
    pub progress: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub plant: PathBuf,
    /// JSON file holding a gain, a tune trace or a baseline result.
    #[arg(long)]
    pub gain: PathBuf,
    /// Feedforward file; the true equilibrium input is used when omitted.
    #[arg(long)]
    pub ff: Option<PathBuf>,
    /// `continuous` or `zoh`.
    #[arg(long, default_value = "continuous")]
    pub mode: String,
    /// Sampling period of the ZOH controller.
    #[arg(long)]
    pub h: Option<f64>,
    #[arg(long = "n-eval")]
    pub n_eval: Option<usize>,
    #[arg(long = "tau-eval")]
    pub tau_eval: Option<f64>,
    #[arg(long)]
    pub q1: Option<f64>,
    #[arg(long)]
    pub q2: Option<f64>,
    #[arg(long = "y-star")]
    pub y_star: Option<String>,
    #[arg(long, default_value = "eval.json")]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}
