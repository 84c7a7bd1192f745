
use serde::{Deserialize, Serialize};

use super::{clip_norm, diverged, rng_for, stream, BaselineState, Stopwatch, TrainLog, WrlConfig};
use crate::dual::{median_bandwidth, prop2_alpha, ExpGuard, Kernel, RkhsFunction};
use crate::embed::{embed, EmbeddingKind, EmbeddingSpec};
use crate::error::{Error, Result};
use crate::measures::{build_cost_matrix, empirical_measure, ground_cost, CostKind, Point};
use crate::ot::{sinkhorn, w1_line, OtConfig};
use crate::rl::{
    grad_of_expectation_estimate, rollout_opts, trajectory_return, Mdp, PolicyParams, RolloutOptions,
    Trajectory,
};

/// One iteration of the pair trainer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairCheckpoint {
    pub iteration: usize,
    /// Batch-mean returns.
    pub return_a: f64,
    pub return_b: f64,
    /// Transport distance between the two batches' embeddings.
    pub w_between: f64,
    /// Batch means of each trajectory's mean first state coordinate.
    pub mean_x_a: f64,
    pub mean_x_b: f64,
    pub saturations: u64,
    pub expansion: usize,
    pub wallclock_ms: u64,
}

fn batch(
    mdp: &dyn Mdp,
    params: &PolicyParams,
    rng: &mut dyn rand::RngCore,
    n: usize,
    opts: RolloutOptions,
) -> Result<Vec<Trajectory>> {
    (0..n).map(|_| rollout_opts(mdp, params, rng, opts)).collect()
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

fn mean_x(taus: &[Trajectory]) -> Result<f64> {
    let spec = EmbeddingSpec {
        kind: EmbeddingKind::MeanX,
        ..EmbeddingSpec::mean_x()
    };
    let xs = taus
        .iter()
        .map(|t| embed(&spec, t).map(|p| p.coords()[0]))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean(xs.into_iter()))
}

fn distance_between(xa: &[Point], xb: &[Point], cfg: &WrlConfig) -> Result<f64> {
    let line = xa[0].dim() == 1
        && matches!(cfg.embedding.cost_kind, CostKind::Euclidean | CostKind::L1);
    if line {
        let a: Vec<f64> = xa.iter().map(|p| p.coords()[0]).collect();
        let b: Vec<f64> = xb.iter().map(|p| p.coords()[0]).collect();
        return w1_line(&a, &b);
    }
    let mu = empirical_measure(xa)?;
    let nu = empirical_measure(xb)?;
    let c = build_cost_matrix(&mu, &nu, cfg.embedding.cost_kind)?;
    Ok(sinkhorn(&mu, &nu, &c, &OtConfig::with_rho(cfg.rho))?.primal_value)
}

/// Mean over the batch of `score(tau_k) * (w_k - baseline)`, then one step.
fn policy_step(
    params: &mut PolicyParams,
    taus: &[Trajectory],
    weights: &[f64],
    baseline: &mut BaselineState,
    cfg: &WrlConfig,
    iteration: usize,
) -> Result<()> {
    let mut it = weights.iter();
    let mut g = grad_of_expectation_estimate(taus, params, |_| {
        baseline.apply(*it.next().expect("one weight per trajectory"))
    })?;
    clip_norm(&mut g, cfg.grad_clip);
    baseline.observe(mean(weights.iter().copied()));
    let before = params.clone();
    params
        .step(&g, cfg.theta_step.at(iteration))
        .map_err(|_| diverged(iteration, "non-finite policy parameters", &before, serde_json::Value::Null))
}

/// Generator stream and rollout options of the second policy. Mirrored
/// noise replays the first policy's stream reflected in `x`.
fn second_side(cfg: &WrlConfig) -> (u64, RolloutOptions) {
    let opts = RolloutOptions {
        mirror_x_noise: cfg.mirror_noise,
    };
    if cfg.mirror_noise {
        (stream::ROLLOUT, opts)
    } else {
        (stream::ROLLOUT_B, opts)
    }
}

/// Batch REINFORCE, the reference for the pair trainer at `lambda = 0`:
/// `batch` rollouts per iteration from the first (`second = false`) or
/// second policy's generator stream.
pub fn reinforce_batch(
    mdp: &dyn Mdp,
    params0: &PolicyParams,
    cfg: &WrlConfig,
    second: bool,
) -> Result<(PolicyParams, TrainLog<PairCheckpoint>)> {
    cfg.validate()?;
    let start = Stopwatch::start();
    let (stream, opts) = if second {
        second_side(cfg)
    } else {
        (stream::ROLLOUT, RolloutOptions::default())
    };
    let mut rng = rng_for(cfg.seed, stream);
    let mut params = params0.clone();
    let mut baseline = BaselineState::new(cfg.baseline);
    let mut log = TrainLog::default();
    let gamma = mdp.gamma();
    for i in 1..=cfg.iterations {
        let taus = batch(mdp, &params, &mut rng, cfg.batch, opts)?;
        let weights: Vec<f64> = taus.iter().map(|t| trajectory_return(t, gamma)).collect();
        policy_step(&mut params, &taus, &weights, &mut baseline, cfg, i)?;
        if cfg.trace_theta {
            log.theta_trace.push(params.theta().to_vec());
        }
        if i % cfg.checkpoint_every == 0 {
            let r = mean(weights.iter().copied());
            let mx = mean_x(&taus)?;
            log.records.push(PairCheckpoint {
                iteration: i,
                return_a: r,
                return_b: r,
                w_between: 0.0,
                mean_x_a: mx,
                mean_x_b: mx,
                saturations: 0,
                expansion: 0,
                wallclock_ms: start.ms(),
            });
        }
    }
    Ok((params, log))
}

/// Two policies pushed apart (`lambda > 0`) in embedding space while each
/// maximises its own return. Every iteration rolls out `batch` episodes per
/// policy, grows the kernel potentials `u` (first policy's side) and `v`
/// (second policy's side) on paired samples, then takes one batch-averaged
/// gradient step per policy. A trajectory with embedding `X` of the first
/// policy gets weight `R + lambda * (u(X) - rho * mean_j exp((u(X) + v(Y_j)
/// - c(X, Y_j)) / rho))`, the `Y_j` being the other batch; symmetrically
/// for the second.
///
/// The log's `theta_trace` holds both parameter vectors concatenated.
pub fn train_repulsive_pair(
    mdp: &dyn Mdp,
    params_a0: &PolicyParams,
    params_b0: &PolicyParams,
    cfg: &WrlConfig,
) -> Result<(PolicyParams, PolicyParams, TrainLog<PairCheckpoint>)> {
    cfg.validate()?;
    if params_a0.shape() != params_b0.shape() {
        return Err(Error::InvalidParameter {
            name: "policy",
            reason: "both policies must share a shape".into(),
        });
    }
    let start = Stopwatch::start();
    let mut rng_a = rng_for(cfg.seed, stream::ROLLOUT);
    let (stream_b, opts_b) = second_side(cfg);
    let mut rng_b = rng_for(cfg.seed, stream_b);
    let (mut pa, mut pb) = (params_a0.clone(), params_b0.clone());
    let (mut base_a, mut base_b) = (BaselineState::new(cfg.baseline), BaselineState::new(cfg.baseline));
    let mut duals: Option<(RkhsFunction, RkhsFunction)> = None;
    let mut guard = ExpGuard::default();
    let mut t = 0usize;
    let mut log = TrainLog::default();
    let gamma = mdp.gamma();
    let rho = cfg.rho;
    let kind = cfg.embedding.cost_kind;
    let pairs = cfg.dual_pairs.unwrap_or(cfg.batch);

    for i in 1..=cfg.iterations {
        let ta = batch(mdp, &pa, &mut rng_a, cfg.batch, RolloutOptions::default())?;
        let tb = batch(mdp, &pb, &mut rng_b, cfg.batch, opts_b)?;
        let xa = ta.iter().map(|t| embed(&cfg.embedding, t)).collect::<Result<Vec<_>>>()?;
        let xb = tb.iter().map(|t| embed(&cfg.embedding, t)).collect::<Result<Vec<_>>>()?;

        let (u, v) = duals.get_or_insert_with(|| {
            let bw = cfg.bandwidth.unwrap_or_else(|| {
                let half = cfg.batch.min(50);
                let mut pts = xa[..half].to_vec();
                pts.extend_from_slice(&xb[..half]);
                median_bandwidth(&pts)
            });
            let k = Kernel::gaussian(bw).expect("validated bandwidth");
            (
                RkhsFunction::new(k, cfg.expansion_cap),
                RkhsFunction::new(k, cfg.expansion_cap),
            )
        });
        if cfg.reset_duals {
            u.clear();
            v.clear();
            t = 0;
        }
        if cfg.lambda != 0.0 {
            for k in 0..pairs {
                t += 1;
                let (x, y) = (&xa[k % cfg.batch], &xb[k % cfg.batch]);
                let c = ground_cost(x, y, kind)?;
                let alpha = prop2_alpha(u.eval(x), v.eval(y), c, rho, cfg.rkhs_step.at(t), cfg.radius, &mut guard);
                u.push(x.clone(), alpha);
                v.push(y.clone(), alpha);
            }
        }

        let ua: Vec<f64> = xa.iter().map(|x| u.eval(x)).collect();
        let vb: Vec<f64> = xb.iter().map(|y| v.eval(y)).collect();
        let mut cost = vec![vec![0.0; cfg.batch]; cfg.batch];
        for (a, row) in cost.iter_mut().enumerate() {
            for (b, c) in row.iter_mut().enumerate() {
                *c = ground_cost(&xa[a], &xb[b], kind)?;
            }
        }
        let n = cfg.batch as f64;
        let mut wa = Vec::with_capacity(cfg.batch);
        for (a, tau) in ta.iter().enumerate() {
            let zbar = (0..cfg.batch)
                .map(|b| guard.exp((ua[a] + vb[b] - cost[a][b]) / rho))
                .sum::<f64>()
                / n;
            wa.push(trajectory_return(tau, gamma) + cfg.lambda * (ua[a] - rho * zbar));
        }
        let mut wb = Vec::with_capacity(cfg.batch);
        for (b, tau) in tb.iter().enumerate() {
            let zbar = (0..cfg.batch)
                .map(|a| guard.exp((ua[a] + vb[b] - cost[a][b]) / rho))
                .sum::<f64>()
                / n;
            wb.push(trajectory_return(tau, gamma) + cfg.lambda * (vb[b] - rho * zbar));
        }
        if wa.iter().chain(&wb).any(|w| !w.is_finite()) {
            return Err(diverged(
                i,
                "non-finite policy-gradient weight",
                &pa,
                serde_json::json!({ "params_b": &pb, "weights_a": wa, "weights_b": wb }),
            ));
        }
        policy_step(&mut pa, &ta, &wa, &mut base_a, cfg, i)?;
        policy_step(&mut pb, &tb, &wb, &mut base_b, cfg, i)?;
        if cfg.trace_theta {
            let mut both = pa.theta().to_vec();
            both.extend_from_slice(pb.theta());
            log.theta_trace.push(both);
        }
        if i % cfg.checkpoint_every == 0 {
            log.records.push(PairCheckpoint {
                iteration: i,
                return_a: mean(ta.iter().map(|t| trajectory_return(t, gamma))),
                return_b: mean(tb.iter().map(|t| trajectory_return(t, gamma))),
                w_between: distance_between(&xa, &xb, cfg)?,
                mean_x_a: mean_x(&ta)?,
                mean_x_b: mean_x(&tb)?,
                saturations: guard.saturations,
                expansion: u.len(),
                wallclock_ms: start.ms(),
            });
        }
    }
    Ok((pa, pb, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::TwoGoal;
    use crate::rl::PolicyShape;
    use crate::wrl::{Baseline, StepSchedule};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape() -> PolicyShape {
        PolicyShape::MlpGaussian {
            input: 2,
            hidden: vec![15, 15],
            output: 2,
            stddev: 0.3,
        }
    }

    fn cfg(lambda: f64, iterations: usize) -> WrlConfig {
        WrlConfig {
            lambda,
            rho: 0.01,
            embedding: EmbeddingSpec::mean_x(),
            theta_step: StepSchedule::Constant(0.01),
            iterations,
            batch: 20,
            checkpoint_every: 1,
            baseline: Baseline::RunningMean(0.2),
            trace_theta: true,
            seed: 5,
            ..WrlConfig::default()
        }
    }

    #[test]
    fn zero_lambda_is_two_independent_runs() {
        let env = TwoGoal::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a0 = PolicyParams::init(shape(), &mut rng).unwrap();
        let b0 = PolicyParams::init(shape(), &mut rng).unwrap();
        let c = cfg(0.0, 5);
        let (a, b, log) = train_repulsive_pair(&env, &a0, &b0, &c).unwrap();
        let (ra, la) = reinforce_batch(&env, &a0, &c, false).unwrap();
        let (rb, lb) = reinforce_batch(&env, &b0, &c, true).unwrap();
        assert_eq!((a, b), (ra, rb));
        for ((both, ta), tb) in log.theta_trace.iter().zip(&la.theta_trace).zip(&lb.theta_trace) {
            assert_eq!(&both[..ta.len()], &ta[..]);
            assert_eq!(&both[ta.len()..], &tb[..]);
        }
        assert!(log.records.iter().all(|r| r.expansion == 0));
    }

    #[test]
    fn mirrored_start_stays_mirrored() {
        let env = TwoGoal::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a0 = PolicyParams::init(shape(), &mut rng).unwrap();
        let b0 = a0.mirror_x().unwrap();
        let c = WrlConfig {
            lambda: 1.0,
            mirror_noise: true,
            trace_theta: false,
            ..cfg(1.0, 10)
        };
        let (a, b, log) = train_repulsive_pair(&env, &a0, &b0, &c).unwrap();
        assert_eq!(b, a.mirror_x().unwrap());
        for r in &log.records {
            assert_eq!(r.mean_x_a, -r.mean_x_b, "{r:?}");
            assert_eq!(r.return_a, r.return_b);
        }
    }

    #[test]
    fn log_is_well_formed() {
        let env = TwoGoal::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a0 = PolicyParams::init(shape(), &mut rng).unwrap();
        let b0 = PolicyParams::init(shape(), &mut rng).unwrap();
        let (_, _, log) = train_repulsive_pair(&env, &a0, &b0, &cfg(1.0, 4)).unwrap();
        assert_eq!(log.records.len(), 4);
        assert!(log.records.windows(2).all(|w| w[0].iteration < w[1].iteration));
        assert!(log.records.iter().all(|r| r.w_between >= 0.0 && r.expansion > 0));
    }
}
