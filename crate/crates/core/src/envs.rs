//! Benchmark environments: a terrain gridworld and a two-goal plane.

use std::collections::BinaryHeap;
use std::cmp::Reverse;
use std::path::Path;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::Point;
use crate::rl::{Action, ActionSpace, Mdp, Transition};

/// Terrain shipped with the crate: a free staircase corridor from the start
/// towards the top row, between a high ridge on the lower right and a
/// raised upper-left block.
pub const DEFAULT_TERRAIN: &str = include_str!("../../../data/terrain_default.txt");

/// Moves in action order.
pub const MOVES: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];
pub const ACTION_NAMES: [&str; 4] = ["up", "down", "left", "right"];

/// Terrain heights, row 0 at the top.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<u32>>", into = "Vec<Vec<u32>>")]
pub struct Terrain {
    rows: usize,
    cols: usize,
    heights: Vec<u32>,
}

impl TryFrom<Vec<Vec<u32>>> for Terrain {
    type Error = Error;

    fn try_from(grid: Vec<Vec<u32>>) -> Result<Self> {
        let rows = grid.len();
        let cols = grid.first().map_or(0, Vec::len);
        if rows == 0 || cols == 0 {
            return Err(Error::Empty("terrain"));
        }
        if let Some(bad) = grid.iter().find(|r| r.len() != cols) {
            return Err(Error::Config(format!(
                "terrain rows must all have {cols} entries, found one with {}",
                bad.len()
            )));
        }
        if rows * cols < 2 {
            return Err(Error::Config("terrain needs distinct start and goal cells".into()));
        }
        Ok(Self {
            rows,
            cols,
            heights: grid.into_iter().flatten().collect(),
        })
    }
}

impl From<Terrain> for Vec<Vec<u32>> {
    fn from(t: Terrain) -> Self {
        t.heights.chunks(t.cols).map(<[u32]>::to_vec).collect()
    }
}

impl Terrain {
    pub fn flat(rows: usize, cols: usize) -> Result<Self> {
        Self::try_from(vec![vec![0; cols]; rows])
    }

    /// Whitespace-separated non-negative integers, one grid row per line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut grid = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row = line
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<u32>().map_err(|_| {
                        Error::Config(format!(
                            "terrain line {}: `{tok}` is not a non-negative integer",
                            n + 1
                        ))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            grid.push(row);
        }
        Self::try_from(grid)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn default_terrain() -> Self {
        Self::parse(DEFAULT_TERRAIN).expect("shipped terrain parses")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn height(&self, row: usize, col: usize) -> u32 {
        self.heights[row * self.cols + col]
    }

    pub fn max_height(&self) -> u32 {
        self.heights.iter().copied().max().unwrap_or(0)
    }
}

/// Grid walk from the lower-left corner to the absorbing upper-right one.
/// Each move pays `-1 - z` of the cell it ends in; a move into a wall
/// leaves the agent in place and pays for the current cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gridworld {
    pub terrain: Terrain,
    pub timeout: usize,
    pub timeout_penalty: f64,
}

/// Outcome of the cheapest-path search.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimalPaths {
    /// Total cost (positive) of a cheapest path.
    pub cost: f64,
    /// How many distinct cheapest paths exist.
    pub count: u128,
    /// Up to three of them, as cell index sequences.
    pub examples: Vec<Vec<usize>>,
}

impl Gridworld {
    pub fn new(terrain: Terrain, timeout: usize, timeout_penalty: f64) -> Result<Self> {
        let g = Self {
            terrain,
            timeout,
            timeout_penalty,
        };
        let manhattan = g.terrain.rows - 1 + g.terrain.cols - 1;
        if timeout < manhattan {
            return Err(Error::InvalidParameter {
                name: "timeout",
                reason: format!("{timeout} is shorter than the {manhattan} moves to the goal"),
            });
        }
        if !timeout_penalty.is_finite() {
            return Err(Error::NonFinite("timeout penalty"));
        }
        Ok(g)
    }

    pub fn rows(&self) -> usize {
        self.terrain.rows
    }

    pub fn cols(&self) -> usize {
        self.terrain.cols
    }

    pub fn cells(&self) -> usize {
        self.rows() * self.cols()
    }

    pub fn start(&self) -> (usize, usize) {
        (self.rows() - 1, 0)
    }

    pub fn goal(&self) -> (usize, usize) {
        (0, self.cols() - 1)
    }

    pub fn cell_index(&self, row: usize, col: usize) -> usize {
        row * self.cols() + col
    }

    pub fn cell_point(row: usize, col: usize) -> Point {
        Point::new(vec![row as f64, col as f64]).expect("finite cell coordinates")
    }

    /// Cell of a state point, if it is one.
    pub fn cell_of(&self, state: &Point) -> Result<(usize, usize)> {
        let c = state.coords();
        let ok = c.len() == 2
            && c.iter().all(|x| *x >= 0.0 && x.fract() == 0.0)
            && (c[0] as usize) < self.rows()
            && (c[1] as usize) < self.cols();
        if !ok {
            return Err(Error::IncompatibleState(format!(
                "{c:?} is not a cell of a {}x{} grid",
                self.rows(),
                self.cols()
            )));
        }
        Ok((c[0] as usize, c[1] as usize))
    }

    /// Destination of a move, clamped to the grid.
    pub fn moved(&self, (r, c): (usize, usize), action: usize) -> Result<(usize, usize)> {
        let (dr, dc) = *MOVES
            .get(action)
            .ok_or_else(|| Error::InvalidAction(format!("{action}")))?;
        let nr = r as isize + dr;
        let nc = c as isize + dc;
        if nr < 0 || nc < 0 || nr >= self.rows() as isize || nc >= self.cols() as isize {
            return Ok((r, c));
        }
        Ok((nr as usize, nc as usize))
    }

    /// Cheapest start-to-goal paths, with tie count.
    pub fn optimal_paths(&self) -> OptimalPaths {
        let n = self.cells();
        let (sr, sc) = self.start();
        let source = self.cell_index(sr, sc);
        let (gr, gc) = self.goal();
        let target = self.cell_index(gr, gc);
        let cost_of = |i: usize| 1 + self.terrain.heights[i] as u64;

        // Integer costs, so ties are exact.
        let mut dist = vec![u64::MAX; n];
        let mut count = vec![0u128; n];
        let mut order = Vec::with_capacity(n);
        dist[source] = 0;
        count[source] = 1;
        let mut heap = BinaryHeap::new();
        heap.push(Reverse((0u64, source)));
        let mut done = vec![false; n];
        while let Some(Reverse((d, i))) = heap.pop() {
            if done[i] {
                continue;
            }
            done[i] = true;
            order.push(i);
            for j in self.neighbours(i) {
                let nd = d + cost_of(j);
                if nd < dist[j] {
                    dist[j] = nd;
                    heap.push(Reverse((nd, j)));
                }
            }
        }
        // Costs are positive, so settling order is a topological order of
        // the tight-edge graph.
        for &i in &order {
            if i == source {
                continue;
            }
            count[i] = self
                .neighbours(i)
                .filter(|&p| dist[p] != u64::MAX && dist[p] + cost_of(i) == dist[i])
                .map(|p| count[p])
                .fold(0u128, |a, b| a.saturating_add(b));
        }
        let mut examples = Vec::new();
        self.collect_paths(target, source, &dist, &mut vec![target], &mut examples);
        OptimalPaths {
            cost: dist[target] as f64,
            count: count[target],
            examples,
        }
    }

    fn neighbours(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        let (r, c) = (i / self.cols(), i % self.cols());
        (0..MOVES.len()).filter_map(move |a| {
            let (nr, nc) = self.moved((r, c), a).ok()?;
            ((nr, nc) != (r, c)).then(|| self.cell_index(nr, nc))
        })
    }

    // Walk tight edges backwards from the goal, stopping after three paths.
    fn collect_paths(
        &self,
        at: usize,
        source: usize,
        dist: &[u64],
        suffix: &mut Vec<usize>,
        out: &mut Vec<Vec<usize>>,
    ) {
        if out.len() >= 3 {
            return;
        }
        if at == source {
            out.push(suffix.iter().rev().copied().collect());
            return;
        }
        let step = 1 + self.terrain.heights[at] as u64;
        let preds: Vec<usize> = self
            .neighbours(at)
            .filter(|&p| dist[p] != u64::MAX && dist[p] + step == dist[at])
            .collect();
        for p in preds {
            suffix.push(p);
            self.collect_paths(p, source, dist, suffix, out);
            suffix.pop();
        }
    }

    /// Action sequence following a cell path.
    pub fn actions_along(&self, path: &[usize]) -> Vec<usize> {
        path.windows(2)
            .map(|w| {
                let (r, c) = (w[0] / self.cols(), w[0] % self.cols());
                (0..MOVES.len())
                    .find(|&a| {
                        self.moved((r, c), a)
                            .map(|(nr, nc)| self.cell_index(nr, nc) == w[1])
                            .unwrap_or(false)
                    })
                    .expect("consecutive path cells are adjacent")
            })
            .collect()
    }
}

impl Mdp for Gridworld {
    fn reset(&self) -> Point {
        let (r, c) = self.start();
        Self::cell_point(r, c)
    }

    fn step(&self, state: &Point, action: &Action, _rng: &mut dyn RngCore) -> Result<Transition> {
        let cell = self.cell_of(state)?;
        if cell == self.goal() {
            return Ok(Transition {
                state: state.clone(),
                reward: 0.0,
                absorbing: true,
            });
        }
        let Action::Discrete(a) = *action else {
            return Err(Error::InvalidAction(format!("{action:?}")));
        };
        let (r, c) = self.moved(cell, a)?;
        Ok(Transition {
            state: Self::cell_point(r, c),
            reward: -1.0 - self.terrain.height(r, c) as f64,
            absorbing: (r, c) == self.goal(),
        })
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Discrete(MOVES.len())
    }

    fn horizon(&self) -> usize {
        self.timeout
    }

    fn timeout_penalty(&self) -> f64 {
        self.timeout_penalty
    }
}

/// Point agent on the plane, rewarded by closeness to the nearer of two
/// goals: `scale / (1 + distance)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TwoGoal {
    pub goals: [[f64; 2]; 2],
    pub start: [f64; 2],
    pub horizon: usize,
    pub reward_scale: f64,
    /// Longest displacement per step.
    pub clip: f64,
}

impl Default for TwoGoal {
    fn default() -> Self {
        Self {
            goals: [[-2.0, 3.0], [2.0, 3.0]],
            start: [0.0, 0.0],
            horizon: 20,
            reward_scale: 1.0,
            clip: 0.5,
        }
    }
}

impl TwoGoal {
    pub fn validate(&self) -> Result<()> {
        let finite = self
            .goals
            .iter()
            .flatten()
            .chain(&self.start)
            .chain([&self.reward_scale, &self.clip])
            .all(|x| x.is_finite());
        if !finite {
            return Err(Error::NonFinite("two-goal spec"));
        }
        if self.goals[0] == self.goals[1] {
            return Err(Error::Config("the two goals coincide".into()));
        }
        if self.horizon == 0 {
            return Err(Error::InvalidParameter {
                name: "horizon",
                reason: "must be at least 1".into(),
            });
        }
        if !(self.clip > 0.0 && self.reward_scale > 0.0) {
            return Err(Error::InvalidParameter {
                name: "clip",
                reason: "clip and reward scale must be positive".into(),
            });
        }
        Ok(())
    }

    /// Distance between the goals.
    pub fn separation(&self) -> f64 {
        let [a, b] = self.goals;
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
    }

    pub fn reward_at(&self, p: &[f64]) -> f64 {
        let d = self
            .goals
            .iter()
            .map(|g| ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)).sqrt())
            .fold(f64::INFINITY, f64::min);
        self.reward_scale / (1.0 + d)
    }
}

impl Mdp for TwoGoal {
    fn reset(&self) -> Point {
        Point::new(self.start.to_vec()).expect("validated start")
    }

    fn step(&self, state: &Point, action: &Action, _rng: &mut dyn RngCore) -> Result<Transition> {
        let Action::Continuous(a) = action else {
            return Err(Error::InvalidAction(format!("{action:?}")));
        };
        if a.len() != 2 || state.dim() != 2 {
            return Err(Error::DimensionMismatch {
                expected: 2,
                got: if a.len() != 2 { a.len() } else { state.dim() },
            });
        }
        if a.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("action"));
        }
        let norm = (a[0] * a[0] + a[1] * a[1]).sqrt();
        let shrink = if norm > self.clip { self.clip / norm } else { 1.0 };
        let s = state.coords();
        let next = [s[0] + shrink * a[0], s[1] + shrink * a[1]];
        Ok(Transition {
            state: Point::new(next.to_vec())?,
            reward: self.reward_at(&next),
            absorbing: false,
        })
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Continuous(2)
    }

    fn horizon(&self) -> usize {
        self.horizon
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rl::{rollout, trajectory_return, PolicyParams, PolicyShape, Trajectory};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    fn grid(t: Terrain) -> Gridworld {
        Gridworld::new(t, 50, -10.0).unwrap()
    }

    #[test]
    fn move_costs() {
        let g = grid(Terrain::flat(7, 10).unwrap());
        let t = g
            .step(&Gridworld::cell_point(6, 0), &Action::Discrete(3), &mut rng())
            .unwrap();
        assert_eq!(t.reward, -1.0);
        assert_eq!(t.state, Gridworld::cell_point(6, 1));

        let mut rows = vec![vec![0; 10]; 7];
        rows[6][1] = 3;
        let g = grid(Terrain::try_from(rows).unwrap());
        let t = g
            .step(&Gridworld::cell_point(6, 0), &Action::Discrete(3), &mut rng())
            .unwrap();
        assert_eq!(t.reward, -4.0);
        // wall: stay put, pay for the current cell
        let t = g
            .step(&Gridworld::cell_point(6, 1), &Action::Discrete(1), &mut rng())
            .unwrap();
        assert_eq!((t.state, t.reward), (Gridworld::cell_point(6, 1), -4.0));
        assert!(g
            .step(&Gridworld::cell_point(6, 1), &Action::Discrete(4), &mut rng())
            .is_err());
    }

    #[test]
    fn goal_absorbs() {
        let g = grid(Terrain::flat(7, 10).unwrap());
        let t = g
            .step(&Gridworld::cell_point(1, 9), &Action::Discrete(0), &mut rng())
            .unwrap();
        assert!(t.absorbing);
        let again = g.step(&t.state, &Action::Discrete(2), &mut rng()).unwrap();
        assert_eq!((again.state, again.reward, again.absorbing), (t.state, 0.0, true));
    }

    #[test]
    fn terrain_parsing() {
        let t = Terrain::parse("0 1\n2 3\n").unwrap();
        assert_eq!((t.rows(), t.cols(), t.height(1, 0)), (2, 2, 2));
        assert!(Terrain::parse("0 1\n2\n").is_err());
        assert!(Terrain::parse("0 -1\n").is_err());
        assert!(Terrain::parse("").is_err());
        let d = Terrain::default_terrain();
        assert_eq!((d.rows(), d.cols()), (7, 10));
        assert!(d.max_height() <= 6);
    }

    #[test]
    fn timeout_must_cover_manhattan_distance() {
        assert!(Gridworld::new(Terrain::flat(7, 10).unwrap(), 14, -10.0).is_err());
        assert!(Gridworld::new(Terrain::flat(7, 10).unwrap(), 15, -10.0).is_ok());
    }

    #[test]
    fn flat_grid_ties() {
        let g = grid(Terrain::flat(7, 10).unwrap());
        let o = g.optimal_paths();
        assert_eq!(o.cost, 15.0);
        // monotone staircases: C(15, 6)
        assert_eq!(o.count, 5005);
        assert_eq!(o.examples.len(), 3);
    }

    fn play(g: &Gridworld, actions: &[usize]) -> Trajectory {
        // a deterministic policy: one-hot rows picked per visited cell
        let shape = crate::rl::grid_rbf_shape(g.rows(), g.cols(), 0.05, 4);
        let mut theta = vec![0.0; shape.param_count()];
        let mut cell = g.start();
        for &a in actions {
            theta[g.cell_index(cell.0, cell.1) * 4 + a] = 200.0;
            cell = g.moved(cell, a).unwrap();
        }
        let pol = PolicyParams::new(shape, theta).unwrap();
        rollout(g, &pol, 1).unwrap()
    }

    #[test]
    fn optimal_policy_costs_fifteen() {
        let g = grid(Terrain::default_terrain());
        let o = g.optimal_paths();
        assert_eq!(o.count, 1);
        assert_eq!(o.cost, 15.0);
        let tau = play(&g, &g.actions_along(&o.examples[0]));
        assert!(tau.terminated);
        assert_eq!(trajectory_return(&tau, 1.0), -15.0);
    }

    #[test]
    fn return_bounds() {
        let g = Gridworld::new(Terrain::default_terrain(), 30, -10.0).unwrap();
        let pol = PolicyParams::zeros(crate::rl::grid_rbf_shape(7, 10, 1.0, 4)).unwrap();
        let lo = 30.0 * (-1.0 - g.terrain.max_height() as f64) - 10.0;
        for seed in 0..200 {
            let r = trajectory_return(&rollout(&g, &pol, seed).unwrap(), 1.0);
            assert!(r >= lo && r <= -15.0, "{r}");
        }
    }

    #[test]
    fn two_goal_rewards() {
        let env = TwoGoal::default();
        env.validate().unwrap();
        assert_eq!(env.reward_at(&[2.0, 3.0]), 1.0);
        assert_eq!(env.reward_at(&[0.0, 3.0]), 1.0 / 3.0);
        let mid = TwoGoal {
            goals: [[-1.0, 0.0], [1.0, 0.0]],
            ..TwoGoal::default()
        };
        assert_eq!(mid.reward_at(&[0.0, 0.0]), 0.5);
        let at_goal = TwoGoal {
            start: [2.0, 3.0],
            ..TwoGoal::default()
        };
        let t = at_goal
            .step(&at_goal.reset(), &Action::Continuous(vec![0.0, 0.0]), &mut rng())
            .unwrap();
        assert_eq!((t.reward, t.absorbing), (1.0, false));
    }

    #[test]
    fn two_goal_clips_steps() {
        let env = TwoGoal {
            clip: 1.0,
            ..TwoGoal::default()
        };
        let t = env
            .step(&env.reset(), &Action::Continuous(vec![6.0, 8.0]), &mut rng())
            .unwrap();
        let c = t.state.coords();
        assert!(((c[0] * c[0] + c[1] * c[1]).sqrt() - 1.0).abs() < 1e-15);
        assert!(env
            .step(&env.reset(), &Action::Continuous(vec![f64::NAN, 0.0]), &mut rng())
            .is_err());
    }

    #[test]
    fn two_goal_rewards_stay_in_range() {
        let env = TwoGoal::default();
        let pol = PolicyParams::zeros(PolicyShape::MlpGaussian {
            input: 2,
            hidden: vec![15, 15],
            output: 2,
            stddev: 0.3,
        })
        .unwrap();
        for seed in 0..50 {
            let tau = rollout(&env, &pol, seed).unwrap();
            assert_eq!(tau.len(), 20);
            assert!(tau.rewards().all(|r| r > 0.0 && r <= 1.0));
        }
    }
}
