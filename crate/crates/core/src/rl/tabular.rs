//! Small deterministic tabular processes whose trajectory distributions can
//! be enumerated exactly. They serve as oracles for the stochastic
//! estimators.

use rand::RngCore;

use super::mdp::{Action, ActionSpace, Mdp, Step, Trajectory, Transition};
use super::policy::{ActionDistribution, PolicyParams, PolicyShape};
use crate::error::{Error, Result};
use crate::measures::Point;

/// States are `0..n`, embedded as the one-dimensional points `(s)`.
#[derive(Clone, Debug)]
pub struct TabularMdp {
    pub next: Vec<Vec<usize>>,
    pub reward: Vec<Vec<f64>>,
    pub absorbing: Vec<bool>,
    pub start: usize,
    pub horizon: usize,
    pub timeout_penalty: f64,
}

impl TabularMdp {
    /// Three states, two actions, two steps: from 0, action 0 goes to 1
    /// (reward 1) and action 1 to the absorbing state 2 (reward 0.2);
    /// from 1, action 0 stays (reward 0) and action 1 exits to 2 (reward 0.5).
    pub fn two_step() -> Self {
        Self {
            next: vec![vec![1, 2], vec![1, 2], vec![2, 2]],
            reward: vec![vec![1.0, 0.2], vec![0.0, 0.5], vec![0.0, 0.0]],
            absorbing: vec![false, false, true],
            start: 0,
            horizon: 2,
            timeout_penalty: 0.0,
        }
    }

    /// One state, `arms` actions, one step; reward `r[a]`.
    pub fn bandit(r: Vec<f64>) -> Self {
        let arms = r.len();
        Self {
            next: vec![vec![1; arms], vec![1; arms]],
            reward: vec![r, vec![0.0; arms]],
            absorbing: vec![false, true],
            start: 0,
            horizon: 1,
            timeout_penalty: 0.0,
        }
    }

    /// One step from state 0 into the absorbing state `1 + a`, with
    /// reward `r[a]`: the final state records the arm that was pulled.
    pub fn fork(r: Vec<f64>) -> Self {
        let arms = r.len();
        let mut next = vec![(1..=arms).collect::<Vec<_>>()];
        let mut reward = vec![r];
        let mut absorbing = vec![false];
        for s in 1..=arms {
            next.push(vec![s; arms]);
            reward.push(vec![0.0; arms]);
            absorbing.push(true);
        }
        Self {
            next,
            reward,
            absorbing,
            start: 0,
            horizon: 1,
            timeout_penalty: 0.0,
        }
    }

    pub fn states(&self) -> usize {
        self.next.len()
    }

    pub fn actions(&self) -> usize {
        self.next[0].len()
    }

    /// Softmax policy with one narrow bump per state.
    pub fn policy_shape(&self) -> PolicyShape {
        PolicyShape::RbfSoftmax {
            centers: (0..self.states()).map(point).collect(),
            bandwidth: 0.5,
            actions: self.actions(),
        }
    }

    fn index(state: &Point) -> Result<usize> {
        let x = state.coords()[0];
        if state.dim() != 1 || x < 0.0 || x.fract() != 0.0 {
            return Err(Error::IncompatibleState(format!("{:?}", state.coords())));
        }
        Ok(x as usize)
    }

    /// Every trajectory with positive probability, with that probability.
    pub fn enumerate(&self, params: &PolicyParams) -> Result<Vec<(Trajectory, f64)>> {
        let mut out = Vec::new();
        self.extend(params, self.start, Vec::new(), 1.0, &mut out)?;
        Ok(out)
    }

    fn extend(
        &self,
        params: &PolicyParams,
        s: usize,
        steps: Vec<Step>,
        prob: f64,
        out: &mut Vec<(Trajectory, f64)>,
    ) -> Result<()> {
        let done = steps.len() == self.horizon;
        if done || (self.absorbing[s] && !steps.is_empty()) {
            let mut steps = steps;
            if done && !self.absorbing[s] {
                if let Some(last) = steps.last_mut() {
                    last.reward += self.timeout_penalty;
                }
            }
            out.push((
                Trajectory {
                    steps,
                    final_state: point(s),
                    terminated: !done || self.absorbing[s],
                },
                prob,
            ));
            return Ok(());
        }
        let ActionDistribution::Categorical(pr) = params.distribution(&point(s))? else {
            return Err(Error::InvalidParameter {
                name: "policy",
                reason: "enumeration needs a discrete policy".into(),
            });
        };
        for (a, p) in pr.into_iter().enumerate() {
            let mut next_steps = steps.clone();
            next_steps.push(Step {
                state: point(s),
                action: Action::Discrete(a),
                reward: self.reward[s][a],
            });
            self.extend(params, self.next[s][a], next_steps, prob * p, out)?;
        }
        Ok(())
    }

    /// `E[g(tau)]` by enumeration.
    pub fn expectation<G: Fn(&Trajectory) -> f64>(&self, params: &PolicyParams, g: G) -> Result<f64> {
        Ok(self
            .enumerate(params)?
            .iter()
            .map(|(tau, p)| p * g(tau))
            .sum())
    }

    /// `grad_theta E[g(tau)]` by central differences of the enumerated
    /// expectation.
    pub fn exact_gradient<G: Fn(&Trajectory) -> f64>(
        &self,
        params: &PolicyParams,
        g: G,
    ) -> Result<Vec<f64>> {
        let h = 1e-6;
        let mut grad = Vec::with_capacity(params.len());
        for k in 0..params.len() {
            let mut plus = params.theta().to_vec();
            plus[k] += h;
            let mut minus = params.theta().to_vec();
            minus[k] -= h;
            let fp = self.expectation(&params.with_theta(plus)?, &g)?;
            let fm = self.expectation(&params.with_theta(minus)?, &g)?;
            grad.push((fp - fm) / (2.0 * h));
        }
        Ok(grad)
    }
}

fn point(s: usize) -> Point {
    Point::scalar(s as f64).expect("finite state index")
}

impl Mdp for TabularMdp {
    fn reset(&self) -> Point {
        point(self.start)
    }

    fn step(&self, state: &Point, action: &Action, _rng: &mut dyn RngCore) -> Result<Transition> {
        let s = Self::index(state)?;
        let Action::Discrete(a) = *action else {
            return Err(Error::InvalidAction(format!("{action:?}")));
        };
        if s >= self.states() || a >= self.actions() {
            return Err(Error::InvalidAction(format!("state {s}, action {a}")));
        }
        if self.absorbing[s] {
            return Ok(Transition {
                state: state.clone(),
                reward: 0.0,
                absorbing: true,
            });
        }
        let n = self.next[s][a];
        Ok(Transition {
            state: point(n),
            reward: self.reward[s][a],
            absorbing: self.absorbing[n],
        })
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Discrete(self.actions())
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn timeout_penalty(&self) -> f64 {
        self.timeout_penalty
    }
}
