use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use delay_smp::cli::{
    cmd_backward, cmd_forward, cmd_gradcheck, cmd_lq, cmd_optimize, cmd_spde, cmd_utility,
    cmd_verify, exit_code_for, RunContext,
};
use delay_smp::config::ExperimentConfig;

/// Delayed stochastic control pipeline: forward/backward solvers, the
/// maximum-principle optimizer, the LQ benchmark, the SPDE demo, and an
/// aggregated verification suite. All commands are config-driven and
/// deterministic for a fixed seed at any worker count.
#[derive(Parser)]
#[command(name = "delay-smp", version)]
struct Cli {
    /// Experiment config (JSON)
    #[arg(long, global = true, env = "DELAY_SMP_CONFIG")]
    config: Option<PathBuf>,

    /// Override the config seed
    #[arg(long, global = true, env = "DELAY_SMP_SEED")]
    seed: Option<u64>,

    /// Rayon worker threads (0 = library default)
    #[arg(long, global = true, env = "DELAY_SMP_WORKERS", default_value_t = 0)]
    workers: usize,

    /// Override the output directory
    #[arg(long, global = true, env = "DELAY_SMP_OUT")]
    out: Option<PathBuf>,

    /// Suppress one-line summaries
    #[arg(long, global = true, env = "DELAY_SMP_QUIET", default_value_t = false)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the aggregated property suite; exit 0 iff every check passes
    Verify,
    /// Solve the forward equation at zero control and export the paths
    Forward,
    /// Solve the full backward pass (adjoint pair) at zero control
    Backward,
    /// Evaluate the recursive utility J at zero control
    Utility,
    /// Projected-gradient descent from zero control
    Optimize,
    /// First-order consistency ladder for the assembled gradient
    Gradcheck,
    /// LQ benchmark: fixed point, gradient descent, and the oracle
    Lq,
    /// SPDE tracking demo with field export
    Spde,
}

fn run() -> Result<i32, delay_smp::Error> {
    let cli = Cli::parse();
    if cli.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.workers)
            .build_global()
            .map_err(|e| delay_smp::Error::Config(format!("worker pool: {e}")))?;
    }
    let config_path = cli
        .config
        .ok_or_else(|| delay_smp::Error::Config("--config PATH is required".into()))?;
    let mut cfg = ExperimentConfig::from_path(&config_path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let ctx = RunContext::new(cfg, cli.out, cli.quiet);
    match cli.command {
        Command::Verify => cmd_verify(&ctx),
        Command::Forward => cmd_forward(&ctx),
        Command::Backward => cmd_backward(&ctx),
        Command::Utility => cmd_utility(&ctx),
        Command::Optimize => cmd_optimize(&ctx),
        Command::Gradcheck => cmd_gradcheck(&ctx),
        Command::Lq => cmd_lq(&ctx),
        Command::Spde => cmd_spde(&ctx),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => ExitCode::from(code as u8),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err) as u8)
        }
    }
}
