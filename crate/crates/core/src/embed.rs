//! Trajectory embeddings into a metric space.

use serde::{Deserialize, Serialize};

use crate::envs::Gridworld;
use crate::error::{Error, Result};
use crate::measures::{ground_cost, CostKind, DiscreteMeasure, Point};
use crate::rl::Trajectory;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    /// Visit frequencies over the cells of a grid (row-major), a point on
    /// the probability simplex.
    #[default]
    VisitDistribution,
    /// Mean first coordinate over the visited states.
    MeanX,
    /// First coordinate of the final state.
    FinalX,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingSpec {
    pub kind: EmbeddingKind,
    pub cost_kind: CostKind,
    /// `[rows, cols]` of the grid; only read by `visit_distribution`.
    pub grid: [usize; 2],
}

impl Default for EmbeddingSpec {
    fn default() -> Self {
        Self {
            kind: EmbeddingKind::VisitDistribution,
            cost_kind: CostKind::L1,
            grid: [7, 10],
        }
    }
}

impl EmbeddingSpec {
    pub fn visits(rows: usize, cols: usize) -> Self {
        Self {
            kind: EmbeddingKind::VisitDistribution,
            cost_kind: CostKind::L1,
            grid: [rows, cols],
        }
    }

    pub fn mean_x() -> Self {
        Self {
            kind: EmbeddingKind::MeanX,
            cost_kind: CostKind::Euclidean,
            grid: [1, 1],
        }
    }

    pub fn dim(&self) -> usize {
        match self.kind {
            EmbeddingKind::VisitDistribution => self.grid[0] * self.grid[1],
            EmbeddingKind::MeanX | EmbeddingKind::FinalX => 1,
        }
    }

    fn cell(&self, state: &Point) -> Result<usize> {
        let [rows, cols] = self.grid;
        let c = state.coords();
        let ok = c.len() == 2
            && c.iter().all(|x| *x >= 0.0 && x.fract() == 0.0)
            && (c[0] as usize) < rows
            && (c[1] as usize) < cols;
        if !ok {
            return Err(Error::IncompatibleState(format!(
                "{c:?} is not a cell of a {rows}x{cols} grid"
            )));
        }
        Ok(c[0] as usize * cols + c[1] as usize)
    }
}

/// Embed every visited state, start and final state included.
pub fn embed(spec: &EmbeddingSpec, tau: &Trajectory) -> Result<Point> {
    match spec.kind {
        EmbeddingKind::VisitDistribution => {
            let mut counts = vec![0.0; spec.dim()];
            let mut n = 0usize;
            for s in tau.states() {
                counts[spec.cell(s)?] += 1.0;
                n += 1;
            }
            for c in &mut counts {
                *c /= n as f64;
            }
            Point::new(counts)
        }
        EmbeddingKind::MeanX => {
            let (sum, n) = tau
                .states()
                .fold((0.0, 0usize), |(s, n), p| (s + p.coords()[0], n + 1));
            Point::scalar(sum / n as f64)
        }
        EmbeddingKind::FinalX => Point::scalar(tau.final_state.coords()[0]),
    }
}

/// Index of the support atom closest to `x`; first one on ties.
pub fn nearest_atom(x: &Point, support: &[Point], cost_kind: CostKind) -> Result<usize> {
    let mut best = (f64::INFINITY, None);
    for (i, y) in support.iter().enumerate() {
        let d = ground_cost(x, y, cost_kind)?;
        if d < best.0 {
            best = (d, Some(i));
        }
    }
    best.1.ok_or(Error::Empty("support"))
}

/// Dirac measure on the visit distribution of the unique cheapest
/// start-to-goal path.
pub fn target_measure_from_optimal_path(env: &Gridworld) -> Result<DiscreteMeasure> {
    let paths = env.optimal_paths();
    if paths.count != 1 {
        return Err(Error::TiedOptimalPaths {
            count: paths.count,
            cost: paths.cost,
            examples: paths.examples,
        });
    }
    let path = &paths.examples[0];
    let mut visits = vec![0.0; env.cells()];
    for &c in path {
        visits[c] += 1.0 / path.len() as f64;
    }
    Ok(DiscreteMeasure::dirac(Point::new(visits)?))
}
