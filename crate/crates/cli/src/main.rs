use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod policy;
mod spec;
mod svg;

/// Bad flags or inconsistent configuration; exits with status 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(name = "distq", version, about = "Distributional operators on categorical signed measures over tabular MDPs")]
pub struct Cli {
    /// More log output (-v info, -vv debug); RUST_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Sample a random MDP and write it as JSON.
    GenMdp(GenMdpArgs),
    /// One evaluation or control run with per-iteration logs.
    Run(RunArgs),
    /// Grid of (variant, hyperparameter, alpha, seed) runs with aggregated curves.
    Sweep(SweepArgs),
    /// Mass vectors of one entry across iterations, as bar panels.
    Figure1(Figure1Args),
    /// Contraction rates and radii.
    Analyze(AnalyzeArgs),
    /// Sample-based distributional learner.
    Learn(LearnArgs),
}

#[derive(Args, Debug, Default, Clone)]
pub struct CommonArgs {
    /// JSON experiment spec; flags override its fields.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Output directory [default: $DISTQ_OUT_DIR or ./distq-out].
    #[arg(short, long)]
    pub out_dir: Option<PathBuf>,
    /// Stem of the output files.
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Args, Debug, Default, Clone)]
pub struct MdpArgs {
    /// MDP JSON written by gen-mdp.
    #[arg(long, conflicts_with_all = ["states", "actions", "gamma", "dirichlet", "mdp_seed"])]
    pub mdp: Option<PathBuf>,
    #[arg(long)]
    pub states: Option<usize>,
    #[arg(long)]
    pub actions: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Dirichlet concentration of the transition rows.
    #[arg(long)]
    pub dirichlet: Option<f64>,
    /// Fix the generated instance instead of drawing one per run seed.
    #[arg(long)]
    pub mdp_seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct GenMdpArgs {
    #[arg(long, default_value_t = 5)]
    pub states: usize,
    #[arg(long, default_value_t = 20)]
    pub actions: usize,
    #[arg(long, default_value_t = 0.9)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0.1)]
    pub dirichlet: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output file [default: <out-dir>/mdp.json].
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(short, long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModeArg {
    Evaluate,
    Control,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverArg {
    Auto,
    Iterate,
    LinearSolve,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    SupL2,
    PtL2,
}

/// Knobs shared by `run` and `sweep`.
#[derive(Args, Debug, Default, Clone)]
pub struct RunOpts {
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub k_max: Option<usize>,
    /// Atoms of the experiment grid.
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    pub v_min: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub v_max: Option<f64>,
    /// Accept explicit bounds that miss part of the return range.
    #[arg(long)]
    pub allow_uncovered: bool,
    /// Working-grid cells per grid cell.
    #[arg(long)]
    pub refine: Option<usize>,
    #[arg(long, value_enum)]
    pub solver: Option<SolverArg>,
    /// Truncate trace series after this many terms.
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Monte-Carlo trajectories per pair for the control oracle.
    #[arg(long)]
    pub n_traj: Option<usize>,
    /// Stop once the sup-l2 step change drops below this.
    #[arg(long)]
    pub stop_tol: Option<f64>,
    /// Pair logged as pt_l2, as `x,a`.
    #[arg(long)]
    pub tracked: Option<String>,
    /// Target policy for evaluation: uniform, optimal, eps-greedy:<e>, random, mix:<a>, random-mix:<a>, radius:<f>.
    #[arg(long)]
    pub pi: Option<String>,
    /// Behavior policy: uniform, optimal, eps-greedy:<e>, random.
    #[arg(long)]
    pub mu: Option<String>,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub mdp: MdpArgs,
    #[command(flatten)]
    pub run: RunOpts,
    /// Operator, e.g. one_step, n_step:3, q_lambda:0.5, retrace:2, peng:0.5.
    #[arg(long)]
    pub trace: Option<String>,
    /// Control target mixing coefficient.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub mdp: MdpArgs,
    #[command(flatten)]
    pub run: RunOpts,
    /// Operator families: one_step, n_step, retrace, q_lambda, on_policy_lambda, peng, alt_lambda.
    #[arg(long, value_delimiter = ',')]
    pub variants: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub c_bars: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub n_steps: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub alphas: Option<Vec<f64>>,
    /// Seeds as a list and/or ranges, e.g. `0..20` or `1,4,7`.
    #[arg(long)]
    pub seeds: Option<String>,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    /// Logarithmic y axis.
    #[arg(long)]
    pub log_y: bool,
    #[arg(long, value_enum, default_value_t = Metric::SupL2)]
    pub metric: Metric,
}

#[derive(Args, Debug)]
pub struct Figure1Args {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub mdp: MdpArgs,
    #[arg(long, default_value_t = 0.7)]
    pub lambda: f64,
    /// Target policy [default: random-mix:1].
    #[arg(long)]
    pub pi: Option<String>,
    /// Behavior policy [default: random].
    #[arg(long)]
    pub mu: Option<String>,
    /// Atoms [default: 11].
    #[arg(long)]
    pub m: Option<usize>,
    /// Iterations shown as panels.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,5,20")]
    pub panels: Vec<usize>,
    /// Iterations recorded in the CSV [default: last panel].
    #[arg(long)]
    pub k_max: Option<usize>,
    #[arg(long, default_value = "0,0")]
    pub tracked: String,
    #[arg(long)]
    pub refine: Option<usize>,
    /// Try this many consecutive instances and keep the first whose masses go negative.
    #[arg(long, default_value_t = 100)]
    pub search: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub mdp: MdpArgs,
    #[arg(long, default_value_t = 0.5)]
    pub lambda: f64,
    /// Policy distance; otherwise computed from --pi and --mu on an MDP.
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub pi: Option<String>,
    #[arg(long)]
    pub mu: Option<String>,
    /// Also write the report to <out-dir>/<name>.json.
    #[arg(long)]
    pub save: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct LearnArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub mdp: MdpArgs,
    /// Operator; `--lambda l` is shorthand for q_lambda:l.
    #[arg(long, conflicts_with = "lambda")]
    pub trace: Option<String>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Learning rate.
    #[arg(long)]
    pub kappa: Option<f64>,
    /// Target network tracking rate.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Segment length.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub anneal_steps: Option<usize>,
    #[arg(long)]
    pub learn_start: Option<usize>,
    #[arg(long)]
    pub log_every: Option<usize>,
    #[arg(long)]
    pub eps_max: Option<f64>,
    #[arg(long)]
    pub eps_min: Option<f64>,
    #[arg(long)]
    pub replay_capacity: Option<usize>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// The error chain joined by `: `, skipping causes already quoted by their parent.
pub fn describe_error(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let msg = cause.to_string();
        if out.contains(&msg) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&msg);
    }
    out
}

fn is_usage(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.is::<UsageError>()
            || matches!(
                e.downcast_ref::<distq::Error>(),
                Some(
                    distq::Error::InvalidParameter { .. }
                        | distq::Error::Parse(_)
                        | distq::Error::InvalidGrid(_)
                        | distq::Error::Domain(_)
                )
            )
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match commands::dispatch(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {}", describe_error(&e));
            ExitCode::from(if is_usage(&e) { 1 } else { 2 })
        }
    }
}
