use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use kernelscope::benchmarks::SystemKind;
use kernelscope::runner::{self, BasisChoice, RunConfig};

/// Learns interaction variables and kernels of agent-based ODE systems from
/// trajectory data, and reproduces the OD / PL / PLwDC benchmark tables.
#[derive(Parser)]
#[command(name = "kernelscope", version, about)]
struct Cli {
    /// TOML configuration file; command-line flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate and persist the training and transfer trajectory sets.
    Generate(StageArgs),
    /// Estimate the reduction map and fit both kernel models on a dataset.
    Learn(LearnArgs),
    /// Compute all error metrics for persisted models on fresh data.
    Evaluate(EvaluateArgs),
    /// Run the full pipeline over independent trials and write the
    /// aggregated benchmark table.
    Reproduce(ReproduceArgs),
}

#[derive(Args, Default)]
struct StageArgs {
    /// Benchmark system: od, pl, or plwdc.
    #[arg(long)]
    system: Option<String>,
    /// Training trajectory count.
    #[arg(long = "M")]
    m: Option<usize>,
    /// Transfer-population initial-condition count.
    #[arg(long = "M-transfer")]
    m_transfer: Option<usize>,
    /// Observation times per trajectory.
    #[arg(long = "L")]
    l: Option<usize>,
    /// Time horizon.
    #[arg(long = "T")]
    t: Option<f64>,
    /// Reduced dimension (defaults to the benchmark's known value).
    #[arg(long)]
    dprime: Option<usize>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Trial count for reproduce.
    #[arg(long)]
    trials: Option<usize>,
    /// Basis family: auto, piecewise, or bspline.
    #[arg(long)]
    basis: Option<String>,
    /// Spline degree override.
    #[arg(long)]
    degree: Option<usize>,
    /// Total basis count override.
    #[arg(long = "n-override")]
    n_override: Option<usize>,
    /// Perturbation-center count.
    #[arg(long = "mpls-k")]
    mpls_k: Option<usize>,
    /// Perturbation weight bandwidth (defaults to 1/D).
    #[arg(long = "mpls-lambda")]
    mpls_lambda: Option<f64>,
    /// Seed of the sample split and center draw.
    #[arg(long = "split-seed")]
    split_seed: Option<u64>,
    /// Skip subspace estimation; fit with the true reduction only.
    #[arg(long = "oracle-only")]
    oracle_only: bool,
    /// Output directory (env KERNELSCOPE_OUT overrides).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct LearnArgs {
    #[command(flatten)]
    stage: StageArgs,
    /// Trajectory-set file to learn from (default: <out>/<system>/train.traj).
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    stage: StageArgs,
    /// Directory holding the persisted models (default: <out>/<system>).
    #[arg(long)]
    models: Option<PathBuf>,
}

#[derive(Args)]
struct ReproduceArgs {
    /// Benchmark system: od, pl, or plwdc.
    system: String,
    #[command(flatten)]
    stage: StageArgs,
}

fn build_config(cli_config: &Option<PathBuf>, args: &StageArgs, jobs: Option<usize>) -> Result<RunConfig> {
    let mut cfg = match cli_config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            toml::from_str::<RunConfig>(&text)
                .with_context(|| format!("parsing config {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(system) = &args.system {
        cfg.system = system.parse::<SystemKind>()?;
    }
    if let Some(v) = args.m {
        cfg.m = v;
    }
    if let Some(v) = args.m_transfer {
        cfg.m_transfer = v;
    }
    if let Some(v) = args.l {
        cfg.l_times = v;
    }
    if let Some(v) = args.t {
        cfg.t_horizon = v;
    }
    if args.dprime.is_some() {
        cfg.dprime = args.dprime;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.trials {
        cfg.trials = v;
    }
    if let Some(basis) = &args.basis {
        cfg.basis = basis.parse::<BasisChoice>()?;
    }
    if args.degree.is_some() {
        cfg.degree = args.degree;
    }
    if args.n_override.is_some() {
        cfg.n_override = args.n_override;
    }
    if let Some(v) = args.mpls_k {
        cfg.mpls_k = v;
    }
    if args.mpls_lambda.is_some() {
        cfg.mpls_lambda = args.mpls_lambda;
    }
    if args.split_seed.is_some() {
        cfg.split_seed = args.split_seed;
    }
    if args.oracle_only {
        cfg.oracle_only = true;
    }
    if let Some(out) = &args.out {
        cfg.out = out.clone();
    }
    // the environment variable takes precedence over the flag
    if let Ok(env_out) = std::env::var("KERNELSCOPE_OUT") {
        if !env_out.is_empty() {
            cfg.out = PathBuf::from(env_out);
        }
    }
    if let Some(j) = jobs {
        cfg.jobs = j;
    }
    Ok(cfg)
}

fn init_threads(cfg: &RunConfig) -> Result<()> {
    if cfg.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.jobs)
            .build_global()
            .context("initializing worker pool")?;
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Generate(args) => {
            let cfg = build_config(&cli.config, args, cli.jobs)?;
            init_threads(&cfg)?;
            require_system(&cli.config, &args.system)?;
            let outputs = runner::cmd_generate(&cfg)?;
            for (path, sha) in outputs {
                println!("wrote {}  sha256={sha}", path.display());
            }
        }
        Command::Learn(args) => {
            let cfg = build_config(&cli.config, &args.stage, cli.jobs)?;
            init_threads(&cfg)?;
            require_system(&cli.config, &args.stage.system)?;
            let written = runner::cmd_learn(&cfg, args.data.as_deref())?;
            for path in written {
                println!("wrote {}", path.display());
            }
        }
        Command::Evaluate(args) => {
            let cfg = build_config(&cli.config, &args.stage, cli.jobs)?;
            init_threads(&cfg)?;
            require_system(&cli.config, &args.stage.system)?;
            let report = runner::cmd_evaluate(&cfg, args.models.as_deref())?;
            print!("{}", report.format_table());
            println!("report written to {}", cfg.system_dir().join("report.txt").display());
        }
        Command::Reproduce(args) => {
            let mut stage = StageArgs { system: Some(args.system.clone()), ..Default::default() };
            merge_stage(&mut stage, &args.stage);
            let cfg = build_config(&cli.config, &stage, cli.jobs)?;
            init_threads(&cfg)?;
            let report = runner::reproduce(&cfg)?;
            print!("{}", report.format_table());
            if !report.failures.is_empty() {
                for f in &report.failures {
                    eprintln!("FAILED {f}");
                }
                bail!("{} of {} trials failed", report.failures.len(), cfg.trials);
            }
            println!("table written to {}", cfg.system_dir().join("table.txt").display());
        }
    }
    Ok(())
}

fn require_system(config: &Option<PathBuf>, system: &Option<String>) -> Result<()> {
    if system.is_none() && config.is_none() {
        bail!("--system is required (or provide it via --config)");
    }
    Ok(())
}

fn merge_stage(dst: &mut StageArgs, src: &StageArgs) {
    dst.m = src.m;
    dst.m_transfer = src.m_transfer;
    dst.l = src.l;
    dst.t = src.t;
    dst.dprime = src.dprime;
    dst.seed = src.seed;
    dst.trials = src.trials;
    dst.basis = src.basis.clone();
    dst.degree = src.degree;
    dst.n_override = src.n_override;
    dst.mpls_k = src.mpls_k;
    dst.mpls_lambda = src.mpls_lambda;
    dst.split_seed = src.split_seed;
    dst.oracle_only = src.oracle_only;
    dst.out = src.out.clone();
}
