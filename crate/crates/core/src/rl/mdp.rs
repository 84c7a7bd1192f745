use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::measures::Point;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionSpace {
    Discrete(usize),
    Continuous(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: Point,
    pub reward: f64,
    pub absorbing: bool,
}

/// An episodic decision process. Implementations must make `step` a pure
/// function of its arguments (all randomness drawn from `rng`), and an
/// absorbing state stepped again must self-loop with zero reward.
pub trait Mdp {
    fn reset(&self) -> Point;

    fn step(&self, state: &Point, action: &Action, rng: &mut dyn RngCore) -> Result<Transition>;

    fn action_space(&self) -> ActionSpace;

    fn horizon(&self) -> usize;

    fn gamma(&self) -> f64 {
        1.0
    }

    /// Added to the last reward of an episode cut off by the horizon.
    fn timeout_penalty(&self) -> f64 {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub state: Point,
    pub action: Action,
    pub reward: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    /// State reached after the last action.
    pub final_state: Point,
    /// Absorbing state reached (as opposed to a time-out).
    pub terminated: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Every visited state, the final one included.
    pub fn states(&self) -> impl Iterator<Item = &Point> {
        self.steps
            .iter()
            .map(|s| &s.state)
            .chain(std::iter::once(&self.final_state))
    }

    pub fn rewards(&self) -> impl Iterator<Item = f64> + '_ {
        self.steps.iter().map(|s| s.reward)
    }
}

pub fn trajectory_return(tau: &Trajectory, gamma: f64) -> f64 {
    let mut discount = 1.0;
    let mut total = 0.0;
    for r in tau.rewards() {
        total += discount * r;
        discount *= gamma;
    }
    total
}
