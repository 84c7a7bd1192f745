//! Browser demo. Three operations, each taking plain values and returning
//! a JSON string for the page to render:
//!
//! * [`solve_transport`]: entropic and exact OT between two small measures;
//! * [`terrain_path`]: the cheapest start-to-goal path of a terrain;
//! * [`train_gridworld`]: a short attraction run with its learning curve
//!   and the final policy's visit frequencies.
//!
//! The `*_js` wrappers are the wasm exports; the plain functions are what
//! native tests call.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use wassrl::embed::{embed, target_measure_from_optimal_path, EmbeddingSpec};
use wassrl::envs::{Gridworld, Terrain};
use wassrl::experiment::{solve_ot, OtReport};
use wassrl::measures::{build_cost_matrix, CostKind, DiscreteMeasure};
use wassrl::ot::{sinkhorn, OtConfig};
use wassrl::rl::{grid_rbf_shape, rollout, trajectory_return, PolicyParams};
use wassrl::wrl::{train_alg4_semidiscrete, Baseline, StepSchedule, WrlConfig};

/// Longest training run the page may request.
pub const MAX_EPISODES: usize = 12_000;

const SAMPLE_ROLLOUTS: u64 = 200;

fn cost_kind(name: &str) -> Result<CostKind, String> {
    match name {
        "euclidean" => Ok(CostKind::Euclidean),
        "squared_euclidean" => Ok(CostKind::SquaredEuclidean),
        "l1" => Ok(CostKind::L1),
        other => Err(format!("unknown cost `{other}`")),
    }
}

#[derive(Serialize)]
struct Transport {
    #[serde(flatten)]
    report: OtReport,
    coupling: Vec<Vec<f64>>,
}

/// Sinkhorn at `rho` between two measures given as
/// `{"atoms": [[...], ...], "weights": [...]}`, with the exact value when
/// the supports are small.
pub fn solve_transport(mu: &str, nu: &str, rho: f64, cost: &str) -> Result<String, String> {
    let mu: DiscreteMeasure = serde_json::from_str(mu).map_err(|e| format!("mu: {e}"))?;
    let nu: DiscreteMeasure = serde_json::from_str(nu).map_err(|e| format!("nu: {e}"))?;
    let kind = cost_kind(cost)?;
    let cfg = OtConfig::with_rho(rho);
    cfg.validate().map_err(|e| e.to_string())?;
    let report = solve_ot(&mu, &nu, kind, &cfg).map_err(|e| e.to_string())?;
    let c = build_cost_matrix(&mu, &nu, kind).map_err(|e| e.to_string())?;
    let coupling = sinkhorn(&mu, &nu, &c, &cfg)
        .map_err(|e| e.to_string())?
        .coupling
        .mass()
        .rows()
        .into_iter()
        .map(|r| r.to_vec())
        .collect();
    serde_json::to_string(&Transport { report, coupling }).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct PathInfo {
    rows: usize,
    cols: usize,
    heights: Vec<Vec<u32>>,
    cost: f64,
    count: String,
    path: Vec<usize>,
}

fn parse_terrain(text: &str) -> Result<Terrain, String> {
    if text.trim().is_empty() {
        Ok(Terrain::default_terrain())
    } else {
        Terrain::parse(text).map_err(|e| e.to_string())
    }
}

/// Cheapest path on a terrain (rows of space-separated heights; empty
/// text means the bundled terrain). `count` is a string because it may
/// exceed what JavaScript numbers hold exactly.
pub fn terrain_path(terrain: &str, timeout: usize) -> Result<String, String> {
    let t = parse_terrain(terrain)?;
    let env = Gridworld::new(t.clone(), timeout, -10.0).map_err(|e| e.to_string())?;
    let paths = env.optimal_paths();
    let heights = (0..t.rows()).map(|r| (0..t.cols()).map(|c| t.height(r, c)).collect()).collect();
    serde_json::to_string(&PathInfo {
        rows: t.rows(),
        cols: t.cols(),
        heights,
        cost: paths.cost,
        count: paths.count.to_string(),
        path: paths.examples.first().cloned().unwrap_or_default(),
    })
    .map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Curve {
    rows: usize,
    cols: usize,
    episodes: Vec<usize>,
    returns: Vec<f64>,
    w_estimates: Vec<f64>,
    /// Mean visit frequency per cell (row-major) over fresh rollouts of
    /// the trained policy.
    visits: Vec<f64>,
    target: Vec<f64>,
    mean_return: f64,
}

/// Trains the gridworld policy on the bundled terrain (or `terrain`) with
/// the semi-dual trainer and the shipped step sizes.
pub fn train_gridworld(terrain: &str, lambda: f64, timeout: usize, episodes: usize, seed: u64) -> Result<String, String> {
    if episodes == 0 || episodes > MAX_EPISODES {
        return Err(format!("episodes must lie in 1..={MAX_EPISODES}"));
    }
    let t = parse_terrain(terrain)?;
    let env = Gridworld::new(t, timeout, -10.0).map_err(|e| e.to_string())?;
    let nu = target_measure_from_optimal_path(&env).map_err(|e| e.to_string())?;
    let embedding = EmbeddingSpec::visits(env.rows(), env.cols());
    let cfg = WrlConfig {
        lambda,
        rho: 1.0,
        embedding,
        theta_step: StepSchedule::Constant(0.01),
        baseline: Baseline::RunningMean(0.01),
        iterations: episodes,
        checkpoint_every: (episodes / 120).max(1),
        seed,
        ..WrlConfig::default()
    };
    let p0 = PolicyParams::zeros(grid_rbf_shape(env.rows(), env.cols(), 2.0, 4)).map_err(|e| e.to_string())?;
    let (params, log) = train_alg4_semidiscrete(&env, &p0, &nu, &cfg).map_err(|e| e.to_string())?;
    let mut visits = vec![0.0; env.cells()];
    let mut total = 0.0;
    for k in 0..SAMPLE_ROLLOUTS {
        let tau = rollout(&env, &params, seed.wrapping_mul(1_000_003).wrapping_add(k)).map_err(|e| e.to_string())?;
        total += trajectory_return(&tau, 1.0);
        let x = embed(&embedding, &tau).map_err(|e| e.to_string())?;
        for (v, p) in visits.iter_mut().zip(x.coords()) {
            *v += p / SAMPLE_ROLLOUTS as f64;
        }
    }
    serde_json::to_string(&Curve {
        rows: env.rows(),
        cols: env.cols(),
        episodes: log.records.iter().map(|r| r.iteration).collect(),
        returns: log.records.iter().map(|r| r.ret).collect(),
        w_estimates: log.records.iter().map(|r| r.w_estimate).collect(),
        visits,
        target: nu.atoms()[0].coords().to_vec(),
        mean_return: total / SAMPLE_ROLLOUTS as f64,
    })
    .map_err(|e| e.to_string())
}

#[wasm_bindgen(js_name = solveTransport)]
pub fn solve_transport_js(mu: &str, nu: &str, rho: f64, cost: &str) -> Result<String, JsError> {
    solve_transport(mu, nu, rho, cost).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = terrainPath)]
pub fn terrain_path_js(terrain: &str, timeout: usize) -> Result<String, JsError> {
    terrain_path(terrain, timeout).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = trainGridworld)]
pub fn train_gridworld_js(terrain: &str, lambda: f64, timeout: usize, episodes: usize, seed: u32) -> Result<String, JsError> {
    train_gridworld(terrain, lambda, timeout, episodes, seed as u64).map_err(|e| JsError::new(&e))
}

/// The bundled terrain, for pre-filling the page.
#[wasm_bindgen(js_name = defaultTerrain)]
pub fn default_terrain() -> String {
    wassrl::envs::DEFAULT_TERRAIN.to_string()
}
