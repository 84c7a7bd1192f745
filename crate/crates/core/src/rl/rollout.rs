use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::mdp::{Mdp, Step, Trajectory};
use super::policy::PolicyParams;
use crate::error::{Error, Result};

/// Sample one episode with a fresh generator seeded from `seed`.
pub fn rollout(mdp: &dyn Mdp, params: &PolicyParams, seed: u64) -> Result<Trajectory> {
    rollout_with(mdp, params, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RolloutOptions {
    /// Negate the exploration noise on the first action coordinate.
    pub mirror_x_noise: bool,
}

/// Sample one episode, drawing actions and transitions from `rng`. The
/// episode ends on an absorbing state or after `mdp.horizon()` steps; a
/// time-out adds `mdp.timeout_penalty()` to the last reward.
pub fn rollout_with(
    mdp: &dyn Mdp,
    params: &PolicyParams,
    rng: &mut dyn RngCore,
) -> Result<Trajectory> {
    rollout_opts(mdp, params, rng, RolloutOptions::default())
}

pub fn rollout_opts(
    mdp: &dyn Mdp,
    params: &PolicyParams,
    rng: &mut dyn RngCore,
    opts: RolloutOptions,
) -> Result<Trajectory> {
    if params.shape().action_space() != mdp.action_space() {
        return Err(Error::InvalidParameter {
            name: "policy",
            reason: format!(
                "action space {:?} does not match the environment's {:?}",
                params.shape().action_space(),
                mdp.action_space()
            ),
        });
    }
    let horizon = mdp.horizon();
    let mut state = mdp.reset();
    let mut steps = Vec::with_capacity(horizon);
    let mut terminated = false;
    while steps.len() < horizon {
        let action = params
            .distribution(&state)?
            .sample_with(rng, opts.mirror_x_noise);
        let t = mdp.step(&state, &action, rng)?;
        if !t.reward.is_finite() {
            return Err(Error::NonFinite("reward"));
        }
        steps.push(Step {
            state,
            action,
            reward: t.reward,
        });
        state = t.state;
        if t.absorbing {
            terminated = true;
            break;
        }
    }
    if !terminated {
        if let Some(last) = steps.last_mut() {
            last.reward += mdp.timeout_penalty();
        }
    }
    Ok(Trajectory {
        steps,
        final_state: state,
        terminated,
    })
}

/// `sum_t grad_theta log pi(a_t | s_t)`.
pub fn score(tau: &Trajectory, params: &PolicyParams) -> Result<Vec<f64>> {
    let mut g = vec![0.0; params.len()];
    for s in &tau.steps {
        params.accumulate_grad_log_prob(&s.state, &s.action, &mut g)?;
    }
    Ok(g)
}

/// `weight * sum_t grad_theta log pi(a_t | s_t)`.
pub fn score_function_grad(
    tau: &Trajectory,
    params: &PolicyParams,
    weight: f64,
) -> Result<Vec<f64>> {
    let mut g = score(tau, params)?;
    for x in &mut g {
        *x *= weight;
    }
    Ok(g)
}

/// Batch mean of `score_function_grad(tau, params, g(tau))`: an unbiased
/// estimate of `grad_theta E[g(tau)]`.
pub fn grad_of_expectation_estimate<G>(
    taus: &[Trajectory],
    params: &PolicyParams,
    mut g: G,
) -> Result<Vec<f64>>
where
    G: FnMut(&Trajectory) -> f64,
{
    if taus.is_empty() {
        return Err(Error::Empty("trajectory batch"));
    }
    let mut total = vec![0.0; params.len()];
    for tau in taus {
        let s = score_function_grad(tau, params, g(tau))?;
        for (t, x) in total.iter_mut().zip(s) {
            *t += x;
        }
    }
    let n = taus.len() as f64;
    for t in &mut total {
        *t /= n;
    }
    Ok(total)
}
