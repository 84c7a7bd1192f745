//! Episodic decision processes, policies and score-function gradients.

mod mdp;
mod policy;
mod rollout;
pub mod tabular;

pub use mdp::{trajectory_return, Action, ActionSpace, Mdp, Step, Trajectory, Transition};
pub use policy::{grid_rbf_shape, ActionDistribution, PolicyFamily, PolicyParams, PolicyShape};
pub use rollout::{
    grad_of_expectation_estimate, rollout, rollout_opts, rollout_with, score, score_function_grad,
    RolloutOptions,
};
