use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::Value;

use super::config::{ExperimentKind, LoadedConfig, TrainerKind};
use crate::envs::Gridworld;
use crate::error::{Error, Result};
use crate::measures::{build_cost_matrix, CostKind, DiscreteMeasure, Point};
use crate::ot::{exact_emd, sinkhorn, OtConfig, EXACT_LIMIT};
use crate::rl::{grid_rbf_shape, PolicyParams, PolicyShape};
use crate::wrl::{
    reinforce_returns, train_alg1_continuous, train_alg4_semidiscrete, train_repulsive_pair, WrlConfig,
};

pub const ATTRACT_COLUMNS: [&str; 6] = [
    "seed",
    "episode",
    "return",
    "w_estimate",
    "dual_diag_saturations",
    "wallclock_ms",
];

pub const REPULSE_COLUMNS: [&str; 8] = [
    "seed",
    "iteration",
    "return_a",
    "return_b",
    "w_between_estimate",
    "mean_x_a",
    "mean_x_b",
    "wallclock_ms",
];

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Seeds trained at once.
    pub jobs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum SeedStatus {
    Ok { csv: PathBuf, params: PathBuf, rows: usize },
    Diverged { iteration: usize, reason: String, snapshot: PathBuf },
    Skipped,
}

#[derive(Clone, Debug, Serialize)]
pub struct SeedRun {
    pub seed: u64,
    pub config_hash: String,
    pub wallclock_ms: u64,
    #[serde(flatten)]
    pub status: SeedStatus,
}

#[derive(Clone, Debug, Serialize)]
pub struct Versions {
    pub wassrl: &'static str,
    pub os: &'static str,
    pub arch: &'static str,
}

impl Versions {
    pub fn current() -> Self {
        Self {
            wassrl: env!("CARGO_PKG_VERSION"),
            os: std::env::consts::OS,
            arch: std::env::consts::ARCH,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub name: String,
    pub experiment: ExperimentKind,
    pub config_hash: String,
    pub config: Value,
    pub versions: Versions,
    pub jobs: usize,
    pub wallclock_ms: u64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub runs: Vec<SeedRun>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ot: Option<OtReport>,
}

/// Sinkhorn on two stored measures, cross-checked against the exact
/// solver when the supports are small enough.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OtReport {
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    pub dual_u: Vec<f64>,
    pub dual_v: Vec<f64>,
    pub rho: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exact_value: Option<f64>,
    /// `rho * ln(n1 * n2)`: how far the entropic value may sit from the
    /// exact one.
    pub entropy_bound: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub within_bound: Option<bool>,
}

pub fn solve_ot(mu: &DiscreteMeasure, nu: &DiscreteMeasure, cost_kind: CostKind, solver: &OtConfig) -> Result<OtReport> {
    let cost = build_cost_matrix(mu, nu, cost_kind)?;
    let res = sinkhorn(mu, nu, &cost, solver)?;
    let bound = solver.rho * ((mu.len() * nu.len()) as f64).ln();
    let exact = if mu.len() <= EXACT_LIMIT && nu.len() <= EXACT_LIMIT {
        Some(exact_emd(mu, nu, &cost)?.1)
    } else {
        None
    };
    Ok(OtReport {
        value: res.primal_value,
        iterations: res.iterations,
        converged: res.converged,
        dual_u: res.dual_u,
        dual_v: res.dual_v,
        rho: solver.rho,
        exact_value: exact,
        entropy_bound: bound,
        within_bound: exact.map(|e| (res.primal_value - e).abs() <= bound + 1e-9),
    })
}

fn fmt(x: f64) -> String {
    format!("{x}")
}

struct SeedOutput {
    csv: Vec<u8>,
    rows: usize,
    params: Value,
}

fn attract_seed(l: &LoadedConfig, cfg: &WrlConfig) -> Result<SeedOutput> {
    let c = &l.config;
    let env = Gridworld::new(l.terrain.clone(), c.gridworld.timeout, c.gridworld.timeout_penalty)?;
    let nu = l.target.as_ref().expect("attract configs carry a target");
    let p0 = PolicyParams::zeros(grid_rbf_shape(env.rows(), env.cols(), c.policy.rbf_bandwidth, 4))?;
    let (params, log) = match c.trainer {
        TrainerKind::Alg1 => {
            let mut sampler = |rng: &mut dyn RngCore| -> Result<Point> { Ok(nu.sample(rng).clone()) };
            train_alg1_continuous(&env, &p0, &mut sampler, cfg)?
        }
        TrainerKind::Alg4 => train_alg4_semidiscrete(&env, &p0, nu, cfg)?,
        TrainerKind::Reinforce => reinforce_returns(&env, &p0, cfg)?,
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(ATTRACT_COLUMNS)?;
    for r in &log.records {
        let wall = if c.record_wallclock { r.wallclock_ms } else { 0 };
        w.write_record([
            cfg.seed.to_string(),
            r.iteration.to_string(),
            fmt(r.ret),
            fmt(r.w_estimate),
            r.saturations.to_string(),
            wall.to_string(),
        ])?;
    }
    Ok(SeedOutput {
        csv: w.into_inner().map_err(|e| Error::Io(e.into_error()))?,
        rows: log.records.len(),
        params: serde_json::to_value(&params)?,
    })
}

fn repulse_seed(l: &LoadedConfig, cfg: &WrlConfig) -> Result<SeedOutput> {
    let c = &l.config;
    let shape = PolicyShape::MlpGaussian {
        input: 2,
        hidden: c.policy.hidden.clone(),
        output: 2,
        stddev: c.policy.stddev,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let a0 = PolicyParams::init(shape.clone(), &mut rng)?;
    let b0 = PolicyParams::init(shape, &mut rng)?;
    let (a, b, log) = train_repulsive_pair(&c.two_goal, &a0, &b0, cfg)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(REPULSE_COLUMNS)?;
    for r in &log.records {
        let wall = if c.record_wallclock { r.wallclock_ms } else { 0 };
        w.write_record([
            cfg.seed.to_string(),
            r.iteration.to_string(),
            fmt(r.return_a),
            fmt(r.return_b),
            fmt(r.w_between),
            fmt(r.mean_x_a),
            fmt(r.mean_x_b),
            wall.to_string(),
        ])?;
    }
    Ok(SeedOutput {
        csv: w.into_inner().map_err(|e| Error::Io(e.into_error()))?,
        rows: log.records.len(),
        params: serde_json::json!({ "a": a, "b": b }),
    })
}

fn run_seed(l: &LoadedConfig, seed: u64, hash: &str, out: &Path) -> Result<SeedRun> {
    let start = Instant::now();
    let cfg = WrlConfig {
        seed,
        ..l.config.wrl.clone()
    };
    let result = match l.config.experiment {
        ExperimentKind::AttractGridworld => attract_seed(l, &cfg),
        ExperimentKind::RepulseTwogoal => repulse_seed(l, &cfg),
        ExperimentKind::OtSolve => unreachable!("ot_solve has no seeds"),
    };
    let status = match result {
        Ok(o) => {
            let csv = out.join(format!("seed{seed}.csv"));
            let params = out.join(format!("seed{seed}.params.json"));
            fs::write(&csv, &o.csv)?;
            fs::write(&params, serde_json::to_string_pretty(&o.params)?)?;
            SeedStatus::Ok {
                csv,
                params,
                rows: o.rows,
            }
        }
        Err(Error::Diverged {
            iteration,
            what,
            snapshot,
        }) => {
            let path = out.join(format!("seed{seed}.snapshot.json"));
            fs::write(&path, serde_json::to_string_pretty(&snapshot)?)?;
            SeedStatus::Diverged {
                iteration,
                reason: what,
                snapshot: path,
            }
        }
        Err(e) => return Err(e),
    };
    Ok(SeedRun {
        seed,
        config_hash: hash.to_string(),
        wallclock_ms: start.elapsed().as_millis() as u64,
        status,
    })
}

/// Trains every seed of the config, at most `jobs` at a time, and writes
/// `seed<k>.csv`, `seed<k>.params.json` and `manifest.json` under the
/// output directory. Pending seeds are skipped once one diverges; that
/// run's snapshot is written next to the CSVs and reported as
/// [`Error::Aborted`].
pub fn run_experiment(l: &LoadedConfig, opts: &RunOptions) -> Result<Manifest> {
    let start = Instant::now();
    fs::create_dir_all(&opts.out_dir)?;
    let hash = l.config_hash();
    let jobs = opts.jobs.max(1);
    let mut manifest = Manifest {
        name: l.name.clone(),
        experiment: l.config.experiment,
        config_hash: hash.clone(),
        config: l.effective(),
        versions: Versions::current(),
        jobs,
        wallclock_ms: 0,
        runs: Vec::new(),
        ot: None,
    };
    if l.config.experiment == ExperimentKind::OtSolve {
        let (mu, nu) = (l.mu.as_ref().expect("loaded"), l.nu.as_ref().expect("loaded"));
        let report = solve_ot(mu, nu, l.config.ot.cost_kind, &l.config.ot.solver)?;
        fs::write(opts.out_dir.join("ot_result.json"), serde_json::to_string_pretty(&report)?)?;
        manifest.ot = Some(report);
    } else {
        manifest.runs = run_seeds(l, &hash, &opts.out_dir, jobs)?;
    }
    manifest.wallclock_ms = start.elapsed().as_millis() as u64;
    fs::write(opts.out_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    if let Some(SeedRun {
        seed,
        status: SeedStatus::Diverged {
            iteration,
            reason,
            snapshot,
        },
        ..
    }) = manifest.runs.iter().find(|r| matches!(r.status, SeedStatus::Diverged { .. }))
    {
        return Err(Error::Aborted {
            seed: *seed,
            iteration: *iteration,
            reason: reason.clone(),
            snapshot: snapshot.clone(),
        });
    }
    Ok(manifest)
}

fn run_seeds(l: &LoadedConfig, hash: &str, out: &Path, jobs: usize) -> Result<Vec<SeedRun>> {
    let seeds = &l.config.seeds;
    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let slots: Mutex<Vec<Option<Result<SeedRun>>>> = Mutex::new((0..seeds.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.min(seeds.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= seeds.len() {
                    break;
                }
                let r = if stop.load(Ordering::SeqCst) {
                    Ok(SeedRun {
                        seed: seeds[i],
                        config_hash: hash.to_string(),
                        wallclock_ms: 0,
                        status: SeedStatus::Skipped,
                    })
                } else {
                    run_seed(l, seeds[i], hash, out)
                };
                if !matches!(r, Ok(SeedRun { status: SeedStatus::Ok { .. }, .. })) {
                    stop.store(true, Ordering::SeqCst);
                }
                slots.lock().expect("no worker panics while holding the lock")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("workers finished")
        .into_iter()
        .map(|r| r.expect("every seed is visited"))
        .collect()
}

/// `explicit`, else the config's `output_dir`, else `<base>/<config name>`
/// with `base` from the environment or `runs`.
pub fn resolve_out_dir(l: &LoadedConfig, explicit: Option<&Path>, env_base: Option<&Path>) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    if let Some(p) = &l.config.output_dir {
        return p.clone();
    }
    env_base.unwrap_or(Path::new("runs")).join(&l.name)
}
