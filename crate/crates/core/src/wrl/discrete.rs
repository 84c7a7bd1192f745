use super::{diverged, rng_for, run_episodes, stream, Shaping, TrainLog, WrlConfig};
use crate::dual::{b_dual, grad_v_h, semidiscrete_h, BDual, DualVectors};
use crate::embed::{embed, nearest_atom};
use crate::error::{Error, Result};
use crate::measures::{ground_cost, CostKind, CostMatrix, DiscreteMeasure, Point};
use crate::ot::{grad_wrt_left_marginal, sinkhorn, OtConfig};
use crate::rl::{Mdp, PolicyParams};

/// Weights below this are lifted before Sinkhorn sees the estimate.
const MASS_FLOOR: f64 = 1e-12;

fn support_cost(support: &[Point], nu: &DiscreteMeasure, kind: CostKind) -> Result<CostMatrix> {
    if support.is_empty() {
        return Err(Error::Empty("support"));
    }
    let rows = support
        .iter()
        .map(|x| nu.atoms().iter().map(|y| ground_cost(x, y, kind)).collect())
        .collect::<Result<Vec<Vec<f64>>>>()?;
    CostMatrix::from_rows(&rows)
}

/// Policy gradient against a running estimate of `mu_theta` on a fixed
/// finite support: each episode is binned to its nearest support atom, the
/// estimate moves toward that atom at rate `ema_rate`, and the centred
/// left Sinkhorn potential at the bin shapes the return.
pub fn train_alg2_discrete(
    mdp: &dyn Mdp,
    params0: &PolicyParams,
    nu: &DiscreteMeasure,
    support: &[Point],
    cfg: &WrlConfig,
) -> Result<(PolicyParams, TrainLog)> {
    let cost = support_cost(support, nu, cfg.embedding.cost_kind)?;
    let n = support.len();
    let mut mu_hat = vec![1.0 / n as f64; n];
    let ot = OtConfig::with_rho(cfg.rho);
    run_episodes(mdp, params0, cfg, |_, tau| {
        let x = embed(&cfg.embedding, tau)?;
        let bin = nearest_atom(&x, support, cfg.embedding.cost_kind)?;
        for (k, m) in mu_hat.iter_mut().enumerate() {
            let hit = if k == bin { 1.0 } else { 0.0 };
            *m += cfg.ema_rate * (hit - *m);
        }
        let floored: Vec<f64> = mu_hat.iter().map(|m| m.max(MASS_FLOOR)).collect();
        let mu = DiscreteMeasure::new(support.to_vec(), floored)?;
        let r = sinkhorn(&mu, nu, &cost, &ot)?;
        let u = grad_wrt_left_marginal(&r)?;
        Ok(Shaping {
            value: u[bin],
            w_estimate: r.primal_value,
            saturations: 0,
            expansion: 0,
        })
    })
}

/// One stochastic ascent step on `<u, mu> + <v, nu> - rho (B(u, v) - 1)`
/// from a sample `bin ~ mu` and `j ~ nu`. Returns `B` at the old point.
pub(crate) fn dual_vector_step(
    uv: &mut DualVectors,
    cost: &CostMatrix,
    rho: f64,
    bin: usize,
    j: usize,
    step: f64,
) -> Result<BDual> {
    let b = b_dual(uv, cost, rho)?;
    for (k, (u, g)) in uv.u.iter_mut().zip(&b.grad_u).enumerate() {
        let hit = if k == bin { 1.0 } else { 0.0 };
        *u += step * (hit - g);
    }
    for (k, (v, g)) in uv.v.iter_mut().zip(&b.grad_v).enumerate() {
        let hit = if k == j { 1.0 } else { 0.0 };
        *v += step * (hit - g);
    }
    Ok(b)
}

/// Policy gradient with stochastic dual vectors: `mu_theta` is only ever
/// sampled. The return is shaped by `u` at the episode's bin, and `(u, v)`
/// take one ascent step per episode, scaled by `|lambda|`.
pub fn train_alg3_dual_discrete(
    mdp: &dyn Mdp,
    params0: &PolicyParams,
    nu: &DiscreteMeasure,
    support: &[Point],
    cfg: &WrlConfig,
) -> Result<(PolicyParams, TrainLog)> {
    let cost = support_cost(support, nu, cfg.embedding.cost_kind)?;
    let mut uv = DualVectors::zeros(support.len(), nu.len());
    let mut target_rng = rng_for(cfg.seed, stream::TARGET);
    run_episodes(mdp, params0, cfg, |i, tau| {
        let x = embed(&cfg.embedding, tau)?;
        let bin = nearest_atom(&x, support, cfg.embedding.cost_kind)?;
        let j = nu.sample_index(&mut target_rng);
        let shaping = uv.u[bin];
        let estimate_uv = (uv.u[bin], uv.v[j]);
        let step = cfg.dual_step.at(i) * cfg.lambda.abs();
        let b = dual_vector_step(&mut uv, &cost, cfg.rho, bin, j, step)?;
        if uv.u.iter().chain(&uv.v).any(|x| !x.is_finite()) {
            return Err(diverged(i, "non-finite dual vectors", params0, serde_json::json!({ "log_b": b.log_value })));
        }
        Ok(Shaping {
            value: shaping,
            w_estimate: estimate_uv.0 + estimate_uv.1 - cfg.rho * (b.value - 1.0),
            saturations: 0,
            expansion: 0,
        })
    })
}

/// Policy gradient with the semi-dual against a discrete target: the
/// return is shaped by `h(f(tau), v)` and `v` ascends `grad_v h`, scaled
/// by `|lambda|`.
pub fn train_alg4_semidiscrete(
    mdp: &dyn Mdp,
    params0: &PolicyParams,
    nu: &DiscreteMeasure,
    cfg: &WrlConfig,
) -> Result<(PolicyParams, TrainLog)> {
    let mut v = vec![0.0; nu.len()];
    let kind = cfg.embedding.cost_kind;
    run_episodes(mdp, params0, cfg, |i, tau| {
        let x = embed(&cfg.embedding, tau)?;
        let h = semidiscrete_h(&x, &v, nu, cfg.rho, kind)?;
        let step = cfg.dual_step.at(i) * cfg.lambda.abs();
        if step > 0.0 {
            let g = grad_v_h(&x, &v, nu, cfg.rho, kind)?;
            for (a, b) in v.iter_mut().zip(g) {
                *a += step * b;
            }
        }
        Ok(Shaping {
            value: h,
            w_estimate: h,
            saturations: 0,
            expansion: 0,
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dual::expected_h;
    use crate::embed::{EmbeddingKind, EmbeddingSpec};
    use crate::measures::build_cost_matrix;
    use crate::ot::Convention;
    use crate::rl::tabular::TabularMdp;
    use crate::rl::{trajectory_return, ActionDistribution, Trajectory};
    use crate::wrl::{reinforce, reinforce_returns, StepSchedule};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pts(xs: &[f64]) -> Vec<Point> {
        xs.iter().map(|&x| Point::scalar(x).unwrap()).collect()
    }

    fn fork_cfg(lambda: f64, seed: u64, iterations: usize) -> WrlConfig {
        WrlConfig {
            lambda,
            rho: 0.1,
            embedding: EmbeddingSpec {
                kind: EmbeddingKind::FinalX,
                cost_kind: CostKind::Euclidean,
                grid: [1, 1],
            },
            theta_step: StepSchedule::Constant(0.5),
            dual_step: StepSchedule::InvSqrt(0.5),
            iterations,
            checkpoint_every: 10,
            seed,
            ..WrlConfig::default()
        }
    }

    fn hit_rate(mdp: &TabularMdp, p: &PolicyParams, arm: usize) -> f64 {
        let ActionDistribution::Categorical(pr) = p.distribution(&mdp.reset()).unwrap() else {
            unreachable!()
        };
        pr[arm]
    }

    #[test]
    fn alg2_attracts_to_the_target_atom() {
        let mdp = TabularMdp::fork(vec![0.0, 0.0]);
        let support = pts(&[1.0, 2.0]);
        let nu = DiscreteMeasure::dirac(support[1].clone());
        for seed in 0..5 {
            let p0 = PolicyParams::zeros(mdp.policy_shape()).unwrap();
            let (p, _) = train_alg2_discrete(&mdp, &p0, &nu, &support, &fork_cfg(-1.0, seed, 2000)).unwrap();
            assert!(hit_rate(&mdp, &p, 1) > 0.9, "seed {seed}");
        }
    }

    #[test]
    fn alg2_degenerate_support_is_plain_gradient() {
        let mdp = TabularMdp::fork(vec![1.0, 0.0]);
        let support = pts(&[1.5]);
        let nu = DiscreteMeasure::dirac(support[0].clone());
        let p0 = PolicyParams::zeros(mdp.policy_shape()).unwrap();
        let cfg = WrlConfig {
            trace_theta: true,
            ..fork_cfg(-1.0, 3, 200)
        };
        let (a, la) = train_alg2_discrete(&mdp, &p0, &nu, &support, &cfg).unwrap();
        let (b, lb) = reinforce_returns(&mdp, &p0, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(la.theta_trace, lb.theta_trace);
    }

    #[test]
    fn alg3_sign_decides_direction() {
        let mdp = TabularMdp::fork(vec![0.0, 0.0]);
        let support = pts(&[1.0, 2.0]);
        let nu = DiscreteMeasure::dirac(support[1].clone());
        for seed in 0..5 {
            let p0 = PolicyParams::zeros(mdp.policy_shape()).unwrap();
            let (pull, _) =
                train_alg3_dual_discrete(&mdp, &p0, &nu, &support, &fork_cfg(-1.0, seed, 2000)).unwrap();
            let (push, _) =
                train_alg3_dual_discrete(&mdp, &p0, &nu, &support, &fork_cfg(1.0, seed, 2000)).unwrap();
            assert!(hit_rate(&mdp, &pull, 1) > 0.5, "seed {seed}");
            assert!(hit_rate(&mdp, &push, 1) < 0.5, "seed {seed}");
        }
    }

    #[test]
    fn dual_vectors_reach_the_sinkhorn_value() {
        let mu = DiscreteMeasure::new(pts(&[0.0, 1.0, 3.0]), vec![0.2, 0.5, 0.3]).unwrap();
        let nu = DiscreteMeasure::new(pts(&[0.5, 2.0, 2.5]), vec![0.4, 0.4, 0.2]).unwrap();
        let cost = build_cost_matrix(&mu, &nu, CostKind::Euclidean).unwrap();
        let rho = 0.5;
        let cfg = OtConfig {
            convention: Convention::EntropyH,
            ..OtConfig::with_rho(rho)
        };
        let exact = sinkhorn(&mu, &nu, &cost, &cfg).unwrap().primal_value;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut uv = DualVectors::zeros(3, 3);
        let mut avg = DualVectors::zeros(3, 3);
        let n = 400_000;
        for i in 1..=n {
            let bin = mu.sample_index(&mut rng);
            let j = nu.sample_index(&mut rng);
            dual_vector_step(&mut uv, &cost, rho, bin, j, 0.5 / (i as f64).sqrt()).unwrap();
            // average the second half of the iterates
            if i > n / 2 {
                let k = (i - n / 2) as f64;
                for (a, b) in avg.u.iter_mut().zip(&uv.u) {
                    *a += (b - *a) / k;
                }
                for (a, b) in avg.v.iter_mut().zip(&uv.v) {
                    *a += (b - *a) / k;
                }
            }
        }
        let d = crate::ot::dual_objective(&avg.u, &avg.v, &mu, &nu, &cost, rho, Convention::EntropyH).unwrap();
        assert!((d - exact).abs() < 1e-3, "{d} vs {exact}");
    }

    #[test]
    fn semidiscrete_ascent_reaches_the_sinkhorn_value() {
        let mu = DiscreteMeasure::new(pts(&[0.0, 1.0, 3.0]), vec![0.2, 0.5, 0.3]).unwrap();
        let nu = DiscreteMeasure::new(pts(&[0.5, 2.0, 2.5]), vec![0.4, 0.4, 0.2]).unwrap();
        let cost = build_cost_matrix(&mu, &nu, CostKind::Euclidean).unwrap();
        let rho = 0.5;
        let exact = sinkhorn(&mu, &nu, &cost, &OtConfig::with_rho(rho)).unwrap().primal_value;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut v = vec![0.0; 3];
        let mut avg = vec![0.0; 3];
        let n = 200_000;
        for i in 1..=n {
            let x = mu.sample(&mut rng);
            let g = grad_v_h(x, &v, &nu, rho, CostKind::Euclidean).unwrap();
            let step = 1.0 / (i as f64).sqrt();
            for (a, b) in v.iter_mut().zip(g) {
                *a += step * b;
            }
            if i > n / 2 {
                let k = (i - n / 2) as f64;
                for (a, b) in avg.iter_mut().zip(&v) {
                    *a += (b - *a) / k;
                }
            }
        }
        let (value, _) = expected_h(&mu, &avg, &nu, rho, CostKind::Euclidean).unwrap();
        assert!((value - exact).abs() < 1e-3, "{value} vs {exact}");
    }

    #[test]
    fn single_atom_target_is_distance_shaping() {
        let mdp = TabularMdp::fork(vec![0.3, 0.1, -0.2]);
        let y = Point::scalar(2.0).unwrap();
        let nu = DiscreteMeasure::dirac(y.clone());
        let p0 = PolicyParams::zeros(mdp.policy_shape()).unwrap();
        let cfg = WrlConfig {
            rho: 1.0,
            trace_theta: true,
            ..fork_cfg(-1.0, 4, 300)
        };
        let (a, la) = train_alg4_semidiscrete(&mdp, &p0, &nu, &cfg).unwrap();
        let shaped = |tau: &Trajectory| {
            let x = embed(&cfg.embedding, tau).unwrap();
            trajectory_return(tau, 1.0) - ground_cost(&x, &y, CostKind::Euclidean).unwrap()
        };
        let (b, lb) = reinforce(&mdp, &p0, &cfg, shaped).unwrap();
        assert_eq!(a, b);
        assert_eq!(la.theta_trace, lb.theta_trace);
    }

    #[test]
    fn zero_lambda_matches_reference() {
        let mdp = TabularMdp::fork(vec![0.3, 0.1]);
        let support = pts(&[1.0, 2.0]);
        let nu = DiscreteMeasure::new(support.clone(), vec![0.3, 0.7]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let shape = mdp.policy_shape();
        let theta = (0..shape.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p0 = PolicyParams::new(shape, theta).unwrap();
        let cfg = WrlConfig {
            trace_theta: true,
            ..fork_cfg(0.0, 9, 300)
        };
        let (r, lr) = reinforce_returns(&mdp, &p0, &cfg).unwrap();
        let runs = [
            train_alg2_discrete(&mdp, &p0, &nu, &support, &cfg).unwrap(),
            train_alg3_dual_discrete(&mdp, &p0, &nu, &support, &cfg).unwrap(),
            train_alg4_semidiscrete(&mdp, &p0, &nu, &cfg).unwrap(),
        ];
        for (p, l) in runs {
            assert_eq!(p, r);
            assert_eq!(l.theta_trace, lr.theta_trace);
        }
    }
}
