use rand::RngCore;

use super::{rng_for, run_episodes, stream, Shaping, TrainLog, WrlConfig};
use crate::dual::{median_bandwidth, prop2_alpha, ExpGuard, Kernel, RkhsFunction};
use crate::embed::embed;
use crate::error::Result;
use crate::measures::{ground_cost, Point};
use crate::rl::{rollout_with, Mdp, PolicyParams};

/// Points drawn from the initial policy and the target before training, to
/// size the kernel.
const WARMUP_POINTS: usize = 50;

/// Kernel for the expansions: the configured bandwidth, or the median
/// pairwise distance of warm-up embeddings of the initial policy and target
/// samples. Warm-up draws come from their own generator stream.
fn warmup_kernel(
    mdp: &dyn Mdp,
    params0: &PolicyParams,
    nu_sampler: &mut dyn FnMut(&mut dyn RngCore) -> Result<Point>,
    cfg: &WrlConfig,
) -> Result<Kernel> {
    if let Some(b) = cfg.bandwidth {
        return Kernel::gaussian(b);
    }
    let mut rng = rng_for(cfg.seed, stream::WARMUP);
    let mut pts = Vec::with_capacity(2 * WARMUP_POINTS);
    for _ in 0..WARMUP_POINTS {
        pts.push(embed(&cfg.embedding, &rollout_with(mdp, params0, &mut rng)?)?);
        pts.push(nu_sampler(&mut rng)?);
    }
    Kernel::gaussian(median_bandwidth(&pts))
}

/// Policy gradient against a target known only through samples. The dual
/// test functions are kernel expansions grown by one shared coefficient
/// per episode; the return is shaped by `u(X) - rho * exp((u(X) + v(Y) -
/// c(X, Y)) / rho)` with `X = f(tau)` and `Y ~ nu`.
pub fn train_alg1_continuous(
    mdp: &dyn Mdp,
    params0: &PolicyParams,
    nu_sampler: &mut dyn FnMut(&mut dyn RngCore) -> Result<Point>,
    cfg: &WrlConfig,
) -> Result<(PolicyParams, TrainLog)> {
    cfg.validate()?;
    let kernel = warmup_kernel(mdp, params0, nu_sampler, cfg)?;
    let mut u = RkhsFunction::new(kernel, cfg.expansion_cap);
    let mut v = RkhsFunction::new(kernel, cfg.expansion_cap);
    let mut guard = ExpGuard::default();
    let mut target_rng = rng_for(cfg.seed, stream::TARGET);
    let rho = cfg.rho;
    run_episodes(mdp, params0, cfg, |i, tau| {
        let x = embed(&cfg.embedding, tau)?;
        let y = nu_sampler(&mut target_rng)?;
        let ux = u.eval(&x);
        let vy = v.eval(&y);
        let c = ground_cost(&x, &y, cfg.embedding.cost_kind)?;
        let z = guard.exp((ux + vy - c) / rho);
        // z is already counted; recompute alpha without double counting
        let alpha = prop2_alpha(ux, vy, c, rho, cfg.rkhs_step.at(i), cfg.radius, &mut ExpGuard::default());
        u.push(x, alpha);
        v.push(y, alpha);
        Ok(Shaping {
            value: ux - rho * z,
            w_estimate: ux + vy - rho * z + rho,
            saturations: guard.saturations,
            expansion: u.len(),
        })
    })
}
