mod commands;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Empty-car routing analysis for closed ridesharing networks.
///
/// SCENARIO is a JSON scenario file or `builtin:<name>` with name one of
/// two_region, nine_region_didi, five_region_city, nine_region_shift.
/// Every command writes UTF-8 CSV led by a `# manifest:` comment line.
#[derive(Debug, Parser)]
#[command(name = "ridenet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve the fluid LP and recover the optimal static routing.
    Optimize(OptimizeArgs),
    /// Exact availabilities by mean value analysis.
    Mva(MvaArgs),
    /// Simulate one routing policy.
    Simulate(SimulateArgs),
    /// Simulated utility of several policies over fleet sizes, with the fluid bound.
    Compare(CompareArgs),
    /// Standard fluid policy versus lookahead policies on a schedule.
    LookaheadEval(LookaheadArgs),
    /// Performance of routing optimized for noisy demand estimates.
    Robustness(RobustnessArgs),
    /// Minimal fluid fleet for perfect availability.
    FleetSize(FleetArgs),
    /// Integrate the fluid equations and track convergence to equilibrium.
    Fluid(FluidArgs),
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    pub scenario: String,
    /// Reward matrix as a headerless CSV; defaults to unit rewards.
    #[arg(long)]
    pub rewards: Option<PathBuf>,
    /// Writes `<OUT>.solution.csv` and `<OUT>.q.csv` instead of printing.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MvaArgs {
    pub scenario: String,
    /// `optimal`, `stay`, or a headerless CSV routing matrix; defaults to the
    /// scenario's own matrix, else `optimal`.
    #[arg(long)]
    pub q: Option<String>,
    /// Fleet sizes; defaults to the scenario's.
    #[arg(long, value_delimiter = ',')]
    pub n_list: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    pub scenario: String,
    /// static, jlcr:<eta>, sw or lookahead:<T>,<delta>.
    #[arg(long, default_value = "static")]
    pub policy: String,
    #[arg(long)]
    pub n: Option<usize>,
    /// Defaults to 1000 for static scenarios and the schedule length otherwise.
    #[arg(long)]
    pub horizon: Option<f64>,
    /// Defaults to 10% of the horizon.
    #[arg(long)]
    pub warmup: Option<f64>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub reps: usize,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    pub scenario: String,
    #[arg(long, value_delimiter = ',')]
    pub n_list: Vec<usize>,
    /// Space-separated policy list; defaults to static, sw and jlcr for eta in {0, 0.25, 0.5, 0.75, 1}.
    #[arg(long, num_args = 1..)]
    pub policies: Vec<String>,
    /// Replications per (policy, N).
    #[arg(long, default_value_t = 10)]
    pub seeds: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub horizon: Option<f64>,
}

#[derive(Debug, Args)]
pub struct LookaheadArgs {
    pub scenario: String,
    #[arg(long = "T-list", value_delimiter = ',', default_value = "0.5")]
    pub t_list: Vec<f64>,
    #[arg(long, default_value_t = 1.0 / 60.0)]
    pub delta: f64,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, default_value_t = 10)]
    pub seeds: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct RobustnessArgs {
    pub scenario: String,
    #[arg(long, value_delimiter = ',', default_value = "0,0.05,0.1")]
    pub sigma_list: Vec<f64>,
    #[arg(long, default_value_t = 300)]
    pub reps: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct FleetArgs {
    pub scenario: String,
}

#[derive(Debug, Args)]
pub struct FluidArgs {
    pub scenario: String,
    /// `optimal`, `stay`, or a headerless CSV routing matrix.
    #[arg(long)]
    pub q: Option<String>,
    #[arg(long, default_value_t = 100.0)]
    pub t_end: f64,
    #[arg(long, default_value_t = ridenet::fluid_ode::DEFAULT_DT)]
    pub dt: f64,
    /// proportional, equilibrium or idle:<region> (1-based).
    #[arg(long, default_value = "proportional")]
    pub init: String,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Optimize(a) => commands::optimize(a),
        Command::Mva(a) => commands::mva(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::Compare(a) => commands::compare(a),
        Command::LookaheadEval(a) => commands::lookahead_eval(a),
        Command::Robustness(a) => commands::robustness(a),
        Command::FleetSize(a) => commands::fleet_size(a),
        Command::Fluid(a) => commands::fluid(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
