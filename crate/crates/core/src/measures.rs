//! Points, discrete measures, cost matrices and couplings.
//!
//! Everything here is immutable once built. Constructors validate their
//! invariants so the solvers downstream can assume finite, normalised input.

use std::collections::HashMap;

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the total mass of a normalised measure.
pub const MASS_TOL: f64 = 1e-9;

/// A finite point in an embedding space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Point(Vec<f64>);

impl Point {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::Empty("point coordinates"));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("point coordinates"));
        }
        Ok(Self(coords))
    }

    /// One-dimensional point.
    pub fn scalar(x: f64) -> Result<Self> {
        Self::new(vec![x])
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Squared Euclidean norm of `self - other`. Caller guarantees equal dims.
    pub(crate) fn sq_dist(&self, other: &Point) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    // Bit pattern key for exact-equality dedup; -0.0 and 0.0 collapse.
    fn key(&self) -> Vec<u64> {
        self.0
            .iter()
            .map(|&c| if c == 0.0 { 0u64 } else { c.to_bits() })
            .collect()
    }
}

impl TryFrom<Vec<f64>> for Point {
    type Error = Error;

    fn try_from(coords: Vec<f64>) -> Result<Self> {
        Self::new(coords)
    }
}

impl From<Point> for Vec<f64> {
    fn from(p: Point) -> Self {
        p.0
    }
}

/// Ground cost between two points.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostKind {
    Euclidean,
    SquaredEuclidean,
    #[default]
    L1,
}

pub fn ground_cost(x: &Point, y: &Point, kind: CostKind) -> Result<f64> {
    if x.dim() != y.dim() {
        return Err(Error::DimensionMismatch {
            expected: x.dim(),
            got: y.dim(),
        });
    }
    Ok(match kind {
        CostKind::Euclidean => x.sq_dist(y).sqrt(),
        CostKind::SquaredEuclidean => x.sq_dist(y),
        CostKind::L1 => x.0.iter().zip(&y.0).map(|(a, b)| (a - b).abs()).sum(),
    })
}

/// Weighted atoms. Weights are normalised on construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMeasure")]
pub struct DiscreteMeasure {
    atoms: Vec<Point>,
    weights: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMeasure {
    atoms: Vec<Point>,
    weights: Vec<f64>,
}

impl TryFrom<RawMeasure> for DiscreteMeasure {
    type Error = Error;

    fn try_from(raw: RawMeasure) -> Result<Self> {
        Self::new(raw.atoms, raw.weights)
    }
}

impl DiscreteMeasure {
    /// Builds a measure from atoms and nonnegative weights of any positive total.
    pub fn new(atoms: Vec<Point>, weights: Vec<f64>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::Empty("measure atoms"));
        }
        if atoms.len() != weights.len() {
            return Err(Error::InvalidMeasure(format!(
                "{} atoms but {} weights",
                atoms.len(),
                weights.len()
            )));
        }
        let dim = atoms[0].dim();
        if let Some(bad) = atoms.iter().find(|a| a.dim() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: bad.dim(),
            });
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("measure weights"));
        }
        if let Some(w) = weights.iter().find(|&&w| w < 0.0) {
            return Err(Error::InvalidMeasure(format!("negative weight {w}")));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::InvalidMeasure("weights sum to zero".into()));
        }
        let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let renormalised: f64 = weights.iter().sum();
        if (renormalised - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidMeasure(format!(
                "weights do not normalise (sum {renormalised} after scaling)"
            )));
        }
        Ok(Self { atoms, weights })
    }

    pub fn uniform(atoms: Vec<Point>) -> Result<Self> {
        let n = atoms.len();
        Self::new(atoms, vec![1.0; n])
    }

    pub fn dirac(atom: Point) -> Self {
        Self {
            atoms: vec![atom],
            weights: vec![1.0],
        }
    }

    pub fn atoms(&self) -> &[Point] {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.atoms[0].dim()
    }

    pub fn weights_array(&self) -> Array1<f64> {
        Array1::from(self.weights.clone())
    }

    /// Shannon entropy of the weights (0 log 0 = 0).
    pub fn entropy(&self) -> f64 {
        -self
            .weights
            .iter()
            .filter(|&&w| w > 0.0)
            .map(|w| w * w.ln())
            .sum::<f64>()
    }

    /// Index of an atom drawn with probability equal to its weight.
    pub fn sample_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return i;
            }
        }
        // rounding left u above the last partial sum
        self.weights
            .iter()
            .rposition(|&w| w > 0.0)
            .unwrap_or(self.len() - 1)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> &Point {
        &self.atoms[self.sample_index(rng)]
    }
}

/// Atoms are the distinct points (exact coordinate equality, first-seen
/// order), weights their relative frequencies.
pub fn empirical_measure(points: &[Point]) -> Result<DiscreteMeasure> {
    if points.is_empty() {
        return Err(Error::Empty("empirical measure input"));
    }
    let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut atoms = Vec::new();
    let mut counts: Vec<f64> = Vec::new();
    for p in points {
        match index.get(&p.key()) {
            Some(&i) => counts[i] += 1.0,
            None => {
                index.insert(p.key(), atoms.len());
                atoms.push(p.clone());
                counts.push(1.0);
            }
        }
    }
    DiscreteMeasure::new(atoms, counts)
}

/// Nonnegative, finite `n1 x n2` transport cost matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Array2<f64>", into = "Array2<f64>")]
pub struct CostMatrix(Array2<f64>);

impl CostMatrix {
    pub fn new(entries: Array2<f64>) -> Result<Self> {
        if entries.nrows() == 0 || entries.ncols() == 0 {
            return Err(Error::Empty("cost matrix"));
        }
        if entries.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("cost matrix"));
        }
        if let Some(c) = entries.iter().find(|&&c| c < 0.0) {
            return Err(Error::InvalidParameter {
                name: "cost",
                reason: format!("negative entry {c}"),
            });
        }
        Ok(Self(entries))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n2 = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n2) {
            return Err(Error::InvalidParameter {
                name: "cost",
                reason: "ragged rows".into(),
            });
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let entries = Array2::from_shape_vec((rows.len(), n2), flat)
            .map_err(|e| Error::Config(e.to_string()))?;
        Self::new(entries)
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(0.0, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.0.mean().unwrap_or(0.0)
    }

    pub fn median(&self) -> f64 {
        let mut v: Vec<f64> = self.0.iter().copied().collect();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    }
}

impl TryFrom<Array2<f64>> for CostMatrix {
    type Error = Error;

    fn try_from(a: Array2<f64>) -> Result<Self> {
        Self::new(a)
    }
}

impl From<CostMatrix> for Array2<f64> {
    fn from(c: CostMatrix) -> Self {
        c.0
    }
}

pub fn build_cost_matrix(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    kind: CostKind,
) -> Result<CostMatrix> {
    let mut entries = Array2::zeros((mu.len(), nu.len()));
    for (i, x) in mu.atoms().iter().enumerate() {
        for (j, y) in nu.atoms().iter().enumerate() {
            entries[[i, j]] = ground_cost(x, y, kind)?;
        }
    }
    CostMatrix::new(entries)
}

/// Joint mass matrix with unit total mass.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Coupling(Array2<f64>);

impl Coupling {
    pub fn new(mass: Array2<f64>) -> Result<Self> {
        if mass.iter().any(|m| !m.is_finite()) {
            return Err(Error::NonFinite("coupling"));
        }
        if let Some(((row, col), &value)) = mass.indexed_iter().find(|(_, &m)| m < 0.0) {
            return Err(Error::NegativeMass { row, col, value });
        }
        let total = mass.sum();
        if (total - 1.0).abs() > MASS_TOL {
            return Err(Error::InvalidMeasure(format!("coupling total mass {total}")));
        }
        Ok(Self(mass))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n2 = rows.first().map_or(0, Vec::len);
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let mass = Array2::from_shape_vec((rows.len(), n2), flat)
            .map_err(|e| Error::Config(e.to_string()))?;
        Self::new(mass)
    }

    // Solvers produce couplings whose mass is off by at most their tolerance.
    pub(crate) fn from_solver(mass: Array2<f64>) -> Self {
        Self(mass)
    }

    pub fn mass(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn row_sums(&self) -> Array1<f64> {
        self.0.sum_axis(ndarray::Axis(1))
    }

    pub fn col_sums(&self) -> Array1<f64> {
        self.0.sum_axis(ndarray::Axis(0))
    }

    /// Max row and column sum deviation from the given marginals.
    pub fn marginal_residuals(&self, mu: &[f64], nu: &[f64]) -> (f64, f64) {
        let rows = self
            .row_sums()
            .iter()
            .zip(mu)
            .map(|(r, m)| (r - m).abs())
            .fold(0.0, f64::max);
        let cols = self
            .col_sums()
            .iter()
            .zip(nu)
            .map(|(c, n)| (c - n).abs())
            .fold(0.0, f64::max);
        (rows, cols)
    }
}

pub fn check_marginals(
    kappa: &Coupling,
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    tol: f64,
) -> Result<bool> {
    if kappa.shape() != (mu.len(), nu.len()) {
        return Err(Error::ShapeMismatch {
            expected: (mu.len(), nu.len()),
            got: kappa.shape(),
        });
    }
    let (r, c) = kappa.marginal_residuals(mu.weights(), nu.weights());
    Ok(r <= tol && c <= tol)
}
