use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use wassrl::experiment::{
    plot, resolve_out_dir, run_experiment, solve_ot, split_override, ExperimentKind, LoadedConfig, RunOptions,
    SeedStatus,
};
use wassrl::measures::{CostKind, DiscreteMeasure};
use wassrl::ot::{Convention, OtConfig};
use wassrl::Error;

/// Base directory for run outputs when neither `--out` nor the config's
/// `output_dir` is given.
const OUT_ENV: &str = "WASSRL_OUT_DIR";

const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

#[derive(Parser)]
#[command(
    name = "wassrl",
    version,
    about = "Wasserstein-regularised policy gradients: seeded experiment runs, learning-curve plots and OT solves",
    after_help = "Exit codes: 0 success, 1 I/O or runtime failure, 2 invalid config or arguments, \
                  3 a run diverged (the snapshot path is printed)."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every seed of an experiment config and write per-seed CSVs plus a manifest.
    #[command(after_help = "Outputs land in --out, else the config's `output_dir`, else \
                            $WASSRL_OUT_DIR/<config name>, else runs/<config name>.\n\
                            Files: seed<k>.csv, seed<k>.params.json, manifest.json \
                            (ot_solve writes ot_result.json instead of per-seed files).")]
    Run(RunArgs),
    /// Draw the learning curves in one or more CSVs of a common schema as an SVG.
    Plot(PlotArgs),
    /// Solve entropic OT between two stored measures and print the result as JSON.
    Ot(OtArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (JSON); relative file references resolve against its directory.
    #[arg(long)]
    config: PathBuf,
    /// Run only these seeds (repeatable); replaces the config's `seeds`.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// Seeds trained concurrently.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    jobs: u64,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override a config field by dotted path, e.g. `--set wrl.lambda=0`. Values parse as JSON,
    /// falling back to a plain string.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct PlotArgs {
    /// CSV files written by `run`; runs with a manifest beside them are styled by their lambda.
    #[arg(required = true)]
    csvs: Vec<PathBuf>,
    /// SVG file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum CostArg {
    Euclidean,
    SquaredEuclidean,
    L1,
}

#[derive(Clone, Copy, ValueEnum)]
enum ConventionArg {
    KlProduct,
    EntropyH,
}

#[derive(Args)]
struct OtArgs {
    /// Source measure: `{"atoms": [[...], ...], "weights": [...]}`.
    #[arg(long)]
    mu: PathBuf,
    /// Target measure, same format.
    #[arg(long)]
    nu: PathBuf,
    /// Entropic regularisation.
    #[arg(long, default_value_t = 0.05)]
    rho: f64,
    #[arg(long, value_enum, default_value_t = CostArg::Euclidean)]
    cost: CostArg,
    #[arg(long, value_enum, default_value_t = ConventionArg::KlProduct)]
    convention: ConventionArg,
    /// Sinkhorn sweep limit.
    #[arg(long, default_value_t = 100_000)]
    max_iters: usize,
    /// Marginal residual at which Sinkhorn stops.
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Plot(a) => plot(&a.csvs, &a.out).map(|s| {
            println!("wrote {} ({} polylines)", a.out.display(), s.polylines);
        }),
        Command::Ot(a) => ot(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => EXIT_CONFIG,
                Error::Aborted { .. } => EXIT_DIVERGED,
                _ => 1,
            })
        }
    }
}

fn run(a: RunArgs) -> wassrl::Result<()> {
    let mut overrides = Vec::new();
    for s in &a.overrides {
        let (k, v) = split_override(s)?;
        overrides.push((k.to_string(), v.to_string()));
    }
    if !a.seeds.is_empty() {
        overrides.push(("seeds".into(), serde_json::to_string(&a.seeds)?));
    }
    let loaded = LoadedConfig::load(&a.config, &overrides)?;
    let env_base = std::env::var_os(OUT_ENV).map(PathBuf::from);
    let out_dir = resolve_out_dir(&loaded, a.out.as_deref(), env_base.as_deref());
    let opts = RunOptions {
        out_dir: out_dir.clone(),
        jobs: a.jobs as usize,
    };
    let manifest = run_experiment(&loaded, &opts)?;
    if loaded.config.experiment == ExperimentKind::OtSolve {
        println!("{}", serde_json::to_string_pretty(&manifest.ot)?);
    }
    for r in &manifest.runs {
        if let SeedStatus::Ok { csv, rows, .. } = &r.status {
            println!("seed {}: {rows} rows -> {} ({} ms)", r.seed, csv.display(), r.wallclock_ms);
        }
    }
    println!("manifest: {} (config {})", out_dir.join("manifest.json").display(), &manifest.config_hash[..12]);
    Ok(())
}

fn read_measure(path: &PathBuf) -> wassrl::Result<DiscreteMeasure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn ot(a: OtArgs) -> wassrl::Result<()> {
    let (mu, nu) = (read_measure(&a.mu)?, read_measure(&a.nu)?);
    let solver = OtConfig {
        rho: a.rho,
        max_iters: a.max_iters,
        tol: a.tol,
        convention: match a.convention {
            ConventionArg::KlProduct => Convention::KlProduct,
            ConventionArg::EntropyH => Convention::EntropyH,
        },
        ..OtConfig::default()
    };
    solver.validate().map_err(|e| Error::Config(e.to_string()))?;
    let cost = match a.cost {
        CostArg::Euclidean => CostKind::Euclidean,
        CostArg::SquaredEuclidean => CostKind::SquaredEuclidean,
        CostArg::L1 => CostKind::L1,
    };
    let report = solve_ot(&mu, &nu, cost, &solver)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
