//! Trainers for `max_theta V(theta) + lambda * W_rho(mu_theta, nu)`.
//!
//! `mu_theta` is the law of the embedded trajectory `f(tau)`. Negative
//! `lambda` attracts it toward the target `nu`, positive `lambda` repels.
//! The dual variables always ascend the dual of `W_rho`; only the policy
//! update carries the sign of `lambda`.
//!
//! | trainer | target | `W` machinery |
//! |---|---|---|
//! | [`train_alg1_continuous`] | sampler | kernel expansions |
//! | [`train_alg2_discrete`] | finite support | Sinkhorn on a running estimate |
//! | [`train_alg3_dual_discrete`] | finite support | stochastic dual vectors |
//! | [`train_alg4_semidiscrete`] | discrete `nu` | semi-dual `h(x, v)` |
//! | [`train_repulsive_pair`] | the other policy | kernel expansions |
//!
//! With `lambda = 0` every trainer reproduces [`reinforce`] bit for bit.

mod continuous;
mod discrete;
mod pair;

pub use continuous::train_alg1_continuous;
pub use discrete::{train_alg2_discrete, train_alg3_dual_discrete, train_alg4_semidiscrete};
pub use pair::{reinforce_batch, train_repulsive_pair, PairCheckpoint};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed::EmbeddingSpec;
use crate::error::{Error, Result};
use crate::rl::{rollout_with, score_function_grad, trajectory_return, Mdp, PolicyParams, Trajectory};

/// Generator streams; each consumer of randomness owns one so that adding
/// a consumer never perturbs another.
pub(crate) mod stream {
    pub const ROLLOUT: u64 = 0;
    pub const TARGET: u64 = 1;
    pub const ROLLOUT_B: u64 = 2;
    pub const WARMUP: u64 = 3;
}

/// Elapsed wall-clock milliseconds; reads zero on wasm, which has no
/// standard clock.
pub(crate) struct Stopwatch {
    #[cfg(not(target_arch = "wasm32"))]
    start: std::time::Instant,
}

impl Stopwatch {
    pub(crate) fn start() -> Self {
        Self {
            #[cfg(not(target_arch = "wasm32"))]
            start: std::time::Instant::now(),
        }
    }

    pub(crate) fn ms(&self) -> u64 {
        #[cfg(not(target_arch = "wasm32"))]
        return self.start.elapsed().as_millis() as u64;
        #[cfg(target_arch = "wasm32")]
        0
    }
}

pub(crate) fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Step size as a function of the 1-based iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSchedule {
    Constant(f64),
    /// `c / sqrt(i)`.
    InvSqrt(f64),
}

impl StepSchedule {
    pub fn at(&self, i: usize) -> f64 {
        match *self {
            StepSchedule::Constant(c) => c,
            StepSchedule::InvSqrt(c) => c / (i.max(1) as f64).sqrt(),
        }
    }

    fn validate(&self, name: &'static str) -> Result<()> {
        let (StepSchedule::Constant(c) | StepSchedule::InvSqrt(c)) = *self;
        if c > 0.0 && c.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidParameter {
                name,
                reason: format!("step constant must be positive, got {c}"),
            })
        }
    }
}

/// Optional constant subtracted from each policy-gradient weight.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    #[default]
    Off,
    Constant(f64),
    /// Exponential average of past weights with the given rate; it only
    /// sees earlier episodes, so the estimator stays unbiased.
    RunningMean(f64),
}

#[derive(Clone, Debug)]
pub(crate) struct BaselineState {
    kind: Baseline,
    mean: Option<f64>,
}

impl BaselineState {
    pub(crate) fn new(kind: Baseline) -> Self {
        Self { kind, mean: None }
    }

    pub(crate) fn current(&self) -> f64 {
        match self.kind {
            Baseline::Off => 0.0,
            Baseline::Constant(c) => c,
            Baseline::RunningMean(_) => self.mean.unwrap_or(0.0),
        }
    }

    pub(crate) fn apply(&self, weight: f64) -> f64 {
        match self.kind {
            Baseline::Off => weight,
            _ => weight - self.current(),
        }
    }

    pub(crate) fn observe(&mut self, weight: f64) {
        if let Baseline::RunningMean(rate) = self.kind {
            self.mean = Some(match self.mean {
                None => weight,
                Some(m) => m + rate * (weight - m),
            });
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WrlConfig {
    /// Weight of the transport term; `< 0` attracts, `> 0` repels.
    pub lambda: f64,
    /// Entropic regularisation.
    pub rho: f64,
    pub embedding: EmbeddingSpec,
    /// Policy step.
    pub theta_step: StepSchedule,
    /// Step for the dual vectors (`u`, `v`) of the discrete trainers.
    pub dual_step: StepSchedule,
    /// Step constant for new kernel coefficients.
    pub rkhs_step: StepSchedule,
    /// Clamp on each kernel coefficient.
    pub radius: f64,
    /// Kernel bandwidth; `None` picks the median pairwise distance of a
    /// warm-up sample.
    pub bandwidth: Option<f64>,
    /// Largest kernel expansion kept before pruning.
    pub expansion_cap: usize,
    /// Episodes for the single-policy trainers, iterations for the pair.
    pub iterations: usize,
    /// Rollouts per policy per iteration (pair trainer).
    pub batch: usize,
    /// Kernel coefficients added per pair iteration; `None` means `batch`.
    pub dual_pairs: Option<usize>,
    /// Record every `checkpoint_every`-th iteration.
    pub checkpoint_every: usize,
    /// Rate of the running estimate of `mu_theta` (Sinkhorn trainer).
    pub ema_rate: f64,
    pub baseline: Baseline,
    /// Rescale any policy gradient longer than this.
    pub grad_clip: Option<f64>,
    /// Clear the kernel expansions at the start of each pair iteration.
    pub reset_duals: bool,
    /// Drive the second policy with reflected exploration noise.
    pub mirror_noise: bool,
    /// Keep every parameter iterate in the log.
    pub trace_theta: bool,
    pub seed: u64,
}

impl Default for WrlConfig {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            rho: 1.0,
            embedding: EmbeddingSpec::default(),
            theta_step: StepSchedule::Constant(0.01),
            dual_step: StepSchedule::InvSqrt(0.1),
            rkhs_step: StepSchedule::InvSqrt(1.0),
            radius: 100.0,
            bandwidth: None,
            expansion_cap: 5000,
            iterations: 12_000,
            batch: 100,
            dual_pairs: None,
            checkpoint_every: 100,
            ema_rate: 0.05,
            baseline: Baseline::Off,
            grad_clip: None,
            reset_duals: false,
            mirror_noise: false,
            trace_theta: false,
            seed: 0,
        }
    }
}

impl WrlConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |name, reason: String| Err(Error::InvalidParameter { name, reason });
        if !self.lambda.is_finite() {
            return bad("lambda", "must be finite".into());
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return bad("rho", format!("must be positive, got {}", self.rho));
        }
        self.theta_step.validate("theta_step")?;
        self.dual_step.validate("dual_step")?;
        self.rkhs_step.validate("rkhs_step")?;
        if !(self.radius > 0.0) {
            return bad("radius", format!("must be positive, got {}", self.radius));
        }
        if let Some(b) = self.bandwidth {
            if !(b > 0.0 && b.is_finite()) {
                return bad("bandwidth", format!("must be positive, got {b}"));
            }
        }
        for (name, v) in [
            ("expansion_cap", self.expansion_cap),
            ("iterations", self.iterations),
            ("batch", self.batch),
            ("checkpoint_every", self.checkpoint_every),
        ] {
            if v == 0 {
                return bad(name, "must be at least 1".into());
            }
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return bad("grad_clip", format!("must be positive, got {c}"));
            }
        }
        if self.dual_pairs == Some(0) {
            return bad("dual_pairs", "must be at least 1".into());
        }
        if !(self.ema_rate > 0.0 && self.ema_rate <= 1.0) {
            return bad("ema_rate", format!("must lie in (0, 1], got {}", self.ema_rate));
        }
        if let Baseline::RunningMean(r) = self.baseline {
            if !(r > 0.0 && r <= 1.0) {
                return bad("baseline", format!("rate must lie in (0, 1], got {r}"));
            }
        }
        Ok(())
    }
}

/// Shrinks `g` onto the ball of radius `max`.
pub(crate) fn clip_norm(g: &mut [f64], max: Option<f64>) {
    let Some(max) = max else { return };
    let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > max {
        let s = max / norm;
        g.iter_mut().for_each(|x| *x *= s);
    }
}

/// One logged episode of a single-policy trainer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    /// 1-based episode index.
    pub iteration: usize,
    /// Return of this episode.
    pub ret: f64,
    /// Mean transport estimate over the episodes since the last record.
    pub w_estimate: f64,
    /// Clamped exponentials so far.
    pub saturations: u64,
    /// Kernel expansion size (0 for vector duals).
    pub expansion: usize,
    pub wallclock_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog<R = Checkpoint> {
    pub records: Vec<R>,
    /// Parameters after every update, when requested.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub theta_trace: Vec<Vec<f64>>,
}

impl<R> Default for TrainLog<R> {
    fn default() -> Self {
        Self {
            records: Vec::new(),
            theta_trace: Vec::new(),
        }
    }
}

/// What a trainer adds to the return of one episode.
pub(crate) struct Shaping {
    /// Multiplied by `lambda` and added to the return.
    pub value: f64,
    /// Transport estimate for the log.
    pub w_estimate: f64,
    pub saturations: u64,
    pub expansion: usize,
}

pub(crate) fn diverged(iteration: usize, what: &str, params: &PolicyParams, extra: serde_json::Value) -> Error {
    Error::Diverged {
        iteration,
        what: what.to_string(),
        snapshot: Box::new(serde_json::json!({
            "iteration": iteration,
            "params": params,
            "detail": extra,
        })),
    }
}

/// Single-trajectory policy-gradient loop shared by the four trainers.
/// `shape` sees each episode before the update and returns the transport
/// term for it.
pub(crate) fn run_episodes<F>(
    mdp: &dyn Mdp,
    params0: &PolicyParams,
    cfg: &WrlConfig,
    mut shape: F,
) -> Result<(PolicyParams, TrainLog)>
where
    F: FnMut(usize, &Trajectory) -> Result<Shaping>,
{
    cfg.validate()?;
    let start = Stopwatch::start();
    let mut params = params0.clone();
    let mut rng = rng_for(cfg.seed, stream::ROLLOUT);
    let mut baseline = BaselineState::new(cfg.baseline);
    let mut log = TrainLog::default();
    let mut window = (0.0, 0usize);
    for i in 1..=cfg.iterations {
        let tau = rollout_with(mdp, &params, &mut rng)?;
        let ret = trajectory_return(&tau, mdp.gamma());
        let s = shape(i, &tau)?;
        let weight = ret + cfg.lambda * s.value;
        if !weight.is_finite() {
            return Err(diverged(
                i,
                "non-finite policy-gradient weight",
                &params,
                serde_json::json!({ "return": ret, "transport_term": s.value }),
            ));
        }
        let mut g = score_function_grad(&tau, &params, baseline.apply(weight))?;
        clip_norm(&mut g, cfg.grad_clip);
        baseline.observe(weight);
        if params.step(&g, cfg.theta_step.at(i)).is_err() {
            return Err(diverged(i, "non-finite policy parameters", &params, serde_json::json!({ "weight": weight })));
        }
        if cfg.trace_theta {
            log.theta_trace.push(params.theta().to_vec());
        }
        window.0 += s.w_estimate;
        window.1 += 1;
        if i % cfg.checkpoint_every == 0 {
            log.records.push(Checkpoint {
                iteration: i,
                ret,
                w_estimate: window.0 / window.1 as f64,
                saturations: s.saturations,
                expansion: s.expansion,
                wallclock_ms: start.ms(),
            });
            window = (0.0, 0);
        }
    }
    Ok((params, log))
}

/// Reference REINFORCE: one episode per update, weight `g(tau)` minus the
/// configured baseline, step `theta_step`. Only `iterations`,
/// `checkpoint_every`, `theta_step`, `baseline`, `grad_clip`, `trace_theta`
/// and `seed` are read from `cfg`.
pub fn reinforce<G>(
    mdp: &dyn Mdp,
    params0: &PolicyParams,
    cfg: &WrlConfig,
    mut g: G,
) -> Result<(PolicyParams, TrainLog)>
where
    G: FnMut(&Trajectory) -> f64,
{
    cfg.validate()?;
    let start = Stopwatch::start();
    let mut params = params0.clone();
    let mut rng = rng_for(cfg.seed, stream::ROLLOUT);
    let mut baseline = BaselineState::new(cfg.baseline);
    let mut log = TrainLog::default();
    for i in 1..=cfg.iterations {
        let tau = rollout_with(mdp, &params, &mut rng)?;
        let weight = g(&tau);
        let mut grad = score_function_grad(&tau, &params, baseline.apply(weight))?;
        clip_norm(&mut grad, cfg.grad_clip);
        baseline.observe(weight);
        params.step(&grad, cfg.theta_step.at(i))?;
        if cfg.trace_theta {
            log.theta_trace.push(params.theta().to_vec());
        }
        if i % cfg.checkpoint_every == 0 {
            log.records.push(Checkpoint {
                iteration: i,
                ret: trajectory_return(&tau, mdp.gamma()),
                w_estimate: 0.0,
                saturations: 0,
                expansion: 0,
                wallclock_ms: start.ms(),
            });
        }
    }
    Ok((params, log))
}

/// [`reinforce`] on the plain return.
pub fn reinforce_returns(
    mdp: &dyn Mdp,
    params0: &PolicyParams,
    cfg: &WrlConfig,
) -> Result<(PolicyParams, TrainLog)> {
    let gamma = mdp.gamma();
    reinforce(mdp, params0, cfg, |tau| trajectory_return(tau, gamma))
}
