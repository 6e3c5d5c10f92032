use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;

use smp_core::commands::{self, Outcome, Run};
use smp_core::config::{ConfigFile, ScenarioConfig};
use smp_core::problem::Mutation;
use smp_core::Result;

#[derive(Parser)]
#[command(
    name = "smp",
    version,
    about = "Maximum-principle experiments for controlled stochastic evolution equations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Forward paths under the zero control.
    Simulate(Opts),
    /// Adjoint pair under the zero control, with solver comparisons.
    Adjoint(Opts),
    /// Variational checks and maximum-principle certificate at the optimizer output.
    Verify(Opts),
    /// Projected-gradient search with certificate.
    Optimize(Opts),
}

#[derive(Args)]
struct Opts {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default `out`, or `out_dir` from the config).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated, strictly decreasing perturbation sizes.
    #[arg(long, value_delimiter = ',')]
    epsilons: Option<Vec<f64>>,
    /// Fault injection: drop-sigma-nu-term or double-drift-jacobian.
    #[arg(long)]
    mutate: Option<String>,
    #[arg(long)]
    paths: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    max_iters: Option<usize>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    workers: Option<usize>,
}

fn prepare(opts: &Opts) -> Result<Run> {
    let (mut file, bytes) = match &opts.config {
        Some(path) => {
            let (f, b) = ConfigFile::load(path)?;
            (f, Some(b))
        }
        None => (ConfigFile::default(), None),
    };
    file.seed = opts.seed.or(file.seed);
    file.epsilons = opts.epsilons.clone().or(file.epsilons);
    file.n_paths = opts.paths.or(file.n_paths);
    file.n_steps = opts.steps.or(file.n_steps);
    file.max_iters = opts.max_iters.or(file.max_iters);
    file.workers = opts.workers.or(file.workers);
    let config = ScenarioConfig::resolve(&file)?;
    let mutation = opts.mutate.as_deref().map(Mutation::parse).transpose()?;
    let out_dir = opts
        .out
        .clone()
        .or_else(|| config.out_dir.clone().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    // CLI overrides change the effective inputs, so the hash covers them too
    let overridden = opts.seed.is_some()
        || opts.epsilons.is_some()
        || opts.paths.is_some()
        || opts.steps.is_some()
        || opts.max_iters.is_some();
    Ok(Run {
        config,
        config_bytes: if overridden { None } else { bytes },
        mutation,
        out_dir,
    })
}

fn execute(command: &Command) -> Result<Outcome> {
    let (opts, f): (&Opts, fn(&Run) -> Result<Outcome>) = match command {
        Command::Simulate(o) => (o, commands::simulate),
        Command::Adjoint(o) => (o, commands::adjoint),
        Command::Verify(o) => (o, commands::verify),
        Command::Optimize(o) => (o, commands::optimize_cmd),
    };
    let run = prepare(opts)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(w) = run.config.workers {
        pool = pool.num_threads(w);
    }
    let pool = pool
        .build()
        .map_err(|e| smp_core::SmpError::InvalidParameter(format!("thread pool: {e}")))?;
    pool.install(|| f(&run))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(&cli.command) {
        Ok(outcome) => {
            for c in &outcome.checks {
                println!("{:<24} {}  {}", c.check, if c.pass { "PASS" } else { "FAIL" }, c.detail);
            }
            println!("{}: wrote {} files", outcome.command, outcome.files.len());
            if outcome.pass() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
