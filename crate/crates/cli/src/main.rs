use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use blnn::lft::SolverKind;
use blnn_cli::experiments::*;
use blnn_cli::{Outcome, RunDir};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "blnn", version, about = "Bi-Lipschitz network experiments")]
struct Cli {
    /// JSON file with the command's config; missing fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root of the run directories.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// Base seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Tightness of the learned Lipschitz constant on the step function.
    Tightness(TightnessArgs),
    /// Fit a line of the given slope under a loose bound.
    Flexibility(FlexibilityArgs),
    /// Final loss and first epoch below 0.5 across bounds.
    SummarySweep(SweepArgs),
    /// Constants of freshly initialized networks.
    InitDist(InitDistArgs),
    /// Constants of the inner-solver iterates per iteration.
    LftBench(LftBenchArgs),
    /// Fit exp(x) while relaxing the bound.
    Anneal,
    /// DUQ on two moons.
    TwoMoons(TwoMoonsArgs),
    /// Implicit gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Empirical constants of a saved model.
    Estimate(EstimateArgs),
}

#[derive(Args, Debug)]
struct TightnessArgs {
    #[arg(long, value_enum)]
    model: Option<ModelChoice>,
    #[arg(long, value_delimiter = ',')]
    bounds: Option<Vec<f64>>,
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args, Debug)]
struct FlexibilityArgs {
    #[arg(long, value_enum)]
    model: Option<ModelChoice>,
    #[arg(long)]
    bound: Option<f64>,
    #[arg(long)]
    slope: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long, value_enum)]
    model: Option<ModelChoice>,
    #[arg(long, value_delimiter = ',')]
    bounds: Option<Vec<f64>>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args, Debug)]
struct InitDistArgs {
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    trials: Option<usize>,
}

#[derive(Args, Debug)]
struct LftBenchArgs {
    #[arg(long, value_delimiter = ',')]
    solvers: Option<Vec<String>>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
}

#[derive(Args, Debug)]
struct TwoMoonsArgs {
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long)]
    nets: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
}

#[derive(Args, Debug)]
struct EstimateArgs {
    /// Saved model bundle.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    lo: Option<f64>,
    #[arg(long)]
    hi: Option<f64>,
    #[arg(long)]
    samples: Option<usize>,
}

fn load<C: DeserializeOwned + Default>(path: Option<&Path>) -> Result<C> {
    match path {
        Some(p) => {
            let text =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
        None => Ok(C::default()),
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn finish<C: Serialize>(cli: &Cli, name: &str, config: &C, outcome: Outcome) -> Result<bool> {
    let dir = RunDir::create(&cli.out, name)?;
    dir.write_run(config, &outcome)?;
    println!("{}", dir.path.display());
    for f in &outcome.failures {
        eprintln!("check failed: {f}");
    }
    Ok(outcome.passed())
}

fn run(cli: &Cli) -> Result<bool> {
    let cfg_path = cli.config.as_deref();
    match &cli.command {
        Command::Tightness(a) => {
            let mut c: TightnessConfig = load(cfg_path)?;
            set(&mut c.seed, cli.seed);
            set(&mut c.model, a.model);
            set(&mut c.bounds, a.bounds.clone());
            set(&mut c.seeds, a.seeds);
            set(&mut c.setup.epochs, a.epochs);
            let out = run_tightness(&c)?.outcome(&c)?;
            finish(cli, "tightness", &c, out)
        }
        Command::Flexibility(a) => {
            let mut c: FlexibilityConfig = load(cfg_path)?;
            set(&mut c.seed, cli.seed);
            set(&mut c.model, a.model);
            set(&mut c.bound, a.bound);
            set(&mut c.slope, a.slope);
            set(&mut c.setup.epochs, a.epochs);
            let out = run_flexibility(&c)?.outcome()?;
            finish(cli, "flexibility", &c, out)
        }
        Command::SummarySweep(a) => {
            let mut c: SweepConfig = load(cfg_path)?;
            set(&mut c.seed, cli.seed);
            set(&mut c.model, a.model);
            set(&mut c.bounds, a.bounds.clone());
            set(&mut c.setup.epochs, a.epochs);
            let out = run_summary_sweep(&c)?.outcome()?;
            finish(cli, "summary-sweep", &c, out)
        }
        Command::InitDist(a) => {
            let mut c: InitDistConfig = load(cfg_path)?;
            set(&mut c.seed, cli.seed);
            set(&mut c.alpha, a.alpha);
            set(&mut c.beta, a.beta);
            set(&mut c.trials, a.trials);
            let out = run_init_dist(&c)?.outcome(&c)?;
            finish(cli, "init-dist", &c, out)
        }
        Command::LftBench(a) => {
            let mut c: LftBenchConfig = load(cfg_path)?;
            set(&mut c.seed, cli.seed);
            if let Some(names) = &a.solvers {
                c.kinds = names
                    .iter()
                    .map(|n| n.parse::<SolverKind>())
                    .collect::<Result<_, _>>()?;
            }
            set(&mut c.beta, a.beta);
            set(&mut c.iters, a.iters);
            let out = run_lft_bench(&c)?.outcome()?;
            finish(cli, "lft-bench", &c, out)
        }
        Command::Anneal => {
            let mut c: AnnealConfig = load(cfg_path)?;
            set(&mut c.seed, cli.seed);
            let out = run_anneal(&c)?.outcome()?;
            finish(cli, "anneal", &c, out)
        }
        Command::TwoMoons(a) => {
            let mut c: TwoMoonsConfig = load(cfg_path)?;
            set(&mut c.seed, cli.seed);
            set(&mut c.alpha, a.alpha);
            set(&mut c.beta, a.beta);
            set(&mut c.seeds, a.seeds);
            set(&mut c.epochs, a.epochs);
            let out = run_two_moons(&c)?.outcome()?;
            finish(cli, "two-moons", &c, out)
        }
        Command::Gradcheck(a) => {
            let mut c: GradcheckConfig = load(cfg_path)?;
            set(&mut c.seed, cli.seed);
            set(&mut c.nets, a.nets);
            set(&mut c.dim, a.dim);
            let out = run_gradcheck(&c)?.outcome(&c)?;
            finish(cli, "gradcheck", &c, out)
        }
        Command::Estimate(a) => {
            let mut c: EstimateConfig = load(cfg_path)?;
            set(&mut c.seed, cli.seed);
            set(&mut c.model, a.model.clone());
            set(&mut c.lo, a.lo);
            set(&mut c.hi, a.hi);
            set(&mut c.n_samples, a.samples);
            let out = estimate_outcome(&run_estimate(&c)?)?;
            finish(cli, "estimate", &c, out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
