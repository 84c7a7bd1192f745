//! Wasserstein-regularised policy gradients.
//!
//! The crate pairs entropic optimal transport solvers with score-function
//! policy gradients, so a policy's distribution of trajectory embeddings can
//! be pulled toward a target measure (`lambda < 0`) or pushed away from
//! another policy's (`lambda > 0`).

pub mod dual;
pub mod embed;
pub mod envs;
pub mod error;
pub mod experiment;
pub mod measures;
pub mod ot;
pub mod rl;
pub mod wrl;

pub use error::{Error, Result};
