//! Stochastic (semi-)dual machinery for entropic transport.
//!
//! * `b_dual` is the exponential penalty of the discrete dual,
//!   `B(u, v) = sum_ij exp((u_i + v_j - c_ij) / rho)`.
//! * `semidiscrete_h` is the semi-dual integrand against a discrete target.
//! * [`RkhsFunction`] carries kernel expansions for the continuous case,
//!   grown one centre per stochastic step by [`prop2_alpha`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::{ground_cost, CostKind, CostMatrix, DiscreteMeasure, Point};

/// Cap on every exponent argument.
pub const EXP_CLAMP: f64 = 30.0;

/// Exponential with the argument clamped to `[-EXP_CLAMP, EXP_CLAMP]`,
/// counting how often the upper clamp was hit. Lower clamps only flush
/// negligible values and go uncounted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ExpGuard {
    pub saturations: u64,
}

impl ExpGuard {
    pub fn exp(&mut self, arg: f64) -> f64 {
        if arg > EXP_CLAMP {
            self.saturations += 1;
            EXP_CLAMP.exp()
        } else if arg < -EXP_CLAMP {
            (-EXP_CLAMP).exp()
        } else {
            arg.exp()
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    #[default]
    Gaussian,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    pub kind: KernelKind,
    pub bandwidth: f64,
}

impl Kernel {
    pub fn gaussian(bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0) || !bandwidth.is_finite() {
            return Err(Error::InvalidParameter {
                name: "bandwidth",
                reason: format!("must be positive, got {bandwidth}"),
            });
        }
        Ok(Self {
            kind: KernelKind::Gaussian,
            bandwidth,
        })
    }

    // Dimensions are the caller's responsibility.
    fn eval_unchecked(&self, x: &Point, y: &Point) -> f64 {
        match self.kind {
            KernelKind::Gaussian => {
                (-x.sq_dist(y) / (2.0 * self.bandwidth * self.bandwidth)).exp()
            }
        }
    }
}

pub fn kernel_eval(k: &Kernel, x: &Point, y: &Point) -> Result<f64> {
    if x.dim() != y.dim() {
        return Err(Error::DimensionMismatch {
            expected: x.dim(),
            got: y.dim(),
        });
    }
    Ok(k.eval_unchecked(x, y))
}

/// Median pairwise Euclidean distance over the first 100 points.
/// Falls back to 1 when the points are all identical.
pub fn median_bandwidth(points: &[Point]) -> f64 {
    let pts = &points[..points.len().min(100)];
    let mut d: Vec<f64> = Vec::new();
    for (i, a) in pts.iter().enumerate() {
        for b in &pts[i + 1..] {
            d.push(a.sq_dist(b).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let m = d[d.len() / 2];
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

/// `x -> sum_i alpha_i k(x, centre_i)`.
#[derive(Clone, Debug, Serialize)]
pub struct RkhsFunction {
    kernel: Kernel,
    centers: Vec<Point>,
    coefficients: Vec<f64>,
    cap: usize,
    pruned: usize,
}

impl RkhsFunction {
    pub fn new(kernel: Kernel, cap: usize) -> Self {
        Self {
            kernel,
            centers: Vec::new(),
            coefficients: Vec::new(),
            cap: cap.max(1),
            pruned: 0,
        }
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn centers(&self) -> &[Point] {
        &self.centers
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    /// Number of terms dropped by pruning so far.
    pub fn pruned(&self) -> usize {
        self.pruned
    }

    pub fn clear(&mut self) {
        self.centers.clear();
        self.coefficients.clear();
    }

    /// Appends one term; past the cap the smallest-|alpha| term is dropped.
    pub fn push(&mut self, center: Point, alpha: f64) {
        self.centers.push(center);
        self.coefficients.push(alpha);
        if self.centers.len() > self.cap {
            let (idx, _) = self
                .coefficients
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                .expect("non-empty expansion");
            self.centers.swap_remove(idx);
            self.coefficients.swap_remove(idx);
            if self.pruned == 0 {
                log::warn!(
                    "RKHS expansion reached its cap of {} terms; pruning smallest coefficients",
                    self.cap
                );
            }
            self.pruned += 1;
        }
    }

    pub fn eval(&self, x: &Point) -> f64 {
        rkhs_eval(self, x)
    }
}

pub fn rkhs_eval(f: &RkhsFunction, x: &Point) -> f64 {
    f.centers
        .iter()
        .zip(&f.coefficients)
        .map(|(c, a)| a * f.kernel.eval_unchecked(x, c))
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FOperands {
    pub rho: f64,
    pub cost_kind: CostKind,
}

/// `u + v - rho * exp((u + v - c(x, y)) / rho)`.
pub fn f_rho(
    x: &Point,
    y: &Point,
    u_val: f64,
    v_val: f64,
    ops: &FOperands,
    guard: &mut ExpGuard,
) -> Result<f64> {
    let c = ground_cost(x, y, ops.cost_kind)?;
    Ok(u_val + v_val - ops.rho * guard.exp((u_val + v_val - c) / ops.rho))
}

/// Coefficient of the next kernel term in the stochastic dual ascent:
/// `clamp(step * (1 - exp((u + v - c) / rho)), -radius, radius)`.
pub fn prop2_alpha(
    u_prev_at_x: f64,
    v_prev_at_y: f64,
    c_xy: f64,
    rho: f64,
    step: f64,
    radius: f64,
    guard: &mut ExpGuard,
) -> f64 {
    let z = guard.exp((u_prev_at_x + v_prev_at_y - c_xy) / rho);
    (step * (1.0 - z)).clamp(-radius, radius)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualVectors {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl DualVectors {
    pub fn new(u: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        if u.iter().chain(&v).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("dual vectors"));
        }
        Ok(Self { u, v })
    }

    pub fn zeros(n: usize, m: usize) -> Self {
        Self {
            u: vec![0.0; n],
            v: vec![0.0; m],
        }
    }
}

/// `B(u, v)` with the row and column sums of its exponential matrix
/// (`rho` times the partial derivatives).
#[derive(Clone, Debug, PartialEq)]
pub struct BDual {
    pub value: f64,
    pub log_value: f64,
    pub grad_u: Vec<f64>,
    pub grad_v: Vec<f64>,
}

pub fn b_dual(uv: &DualVectors, cost: &CostMatrix, rho: f64) -> Result<BDual> {
    let (n, m) = cost.shape();
    if (uv.u.len(), uv.v.len()) != (n, m) {
        return Err(Error::ShapeMismatch {
            expected: (n, m),
            got: (uv.u.len(), uv.v.len()),
        });
    }
    let c = cost.entries();
    let arg = |i: usize, j: usize| (uv.u[i] + uv.v[j] - c[[i, j]]) / rho;
    let mut top = f64::NEG_INFINITY;
    for i in 0..n {
        for j in 0..m {
            top = top.max(arg(i, j));
        }
    }
    // Everything relative to the largest exponent, rescaled at the end.
    let mut rows = vec![0.0; n];
    let mut cols = vec![0.0; m];
    for i in 0..n {
        for j in 0..m {
            let e = (arg(i, j) - top).exp();
            rows[i] += e;
            cols[j] += e;
        }
    }
    let rel: f64 = rows.iter().sum();
    let log_value = top + rel.ln();
    let scale = top.exp();
    Ok(BDual {
        value: log_value.exp(),
        log_value,
        grad_u: rows.iter().map(|r| r * scale).collect(),
        grad_v: cols.iter().map(|c| c * scale).collect(),
    })
}

/// Semi-dual integrand and its gradient in `v`.
fn h_and_grad(
    x: &Point,
    v: &[f64],
    nu: &DiscreteMeasure,
    rho: f64,
    cost_kind: CostKind,
) -> Result<(f64, Vec<f64>)> {
    if v.len() != nu.len() {
        return Err(Error::DimensionMismatch {
            expected: nu.len(),
            got: v.len(),
        });
    }
    if !(rho > 0.0) {
        return Err(Error::InvalidParameter {
            name: "rho",
            reason: format!("must be positive, got {rho}"),
        });
    }
    let mut logits = Vec::with_capacity(v.len());
    for ((vj, y), &w) in v.iter().zip(nu.atoms()).zip(nu.weights()) {
        logits.push(if w > 0.0 {
            (vj - ground_cost(x, y, cost_kind)?) / rho + w.ln()
        } else {
            f64::NEG_INFINITY
        });
    }
    let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - top).exp()).sum();
    let lse = top + z.ln();
    let linear: f64 = v.iter().zip(nu.weights()).map(|(a, b)| a * b).sum();
    let grad = logits
        .iter()
        .zip(nu.weights())
        .map(|(l, w)| w - (l - lse).exp())
        .collect();
    Ok((linear - rho * lse, grad))
}

/// `h(x, v) = <v, nu> - rho log sum_j exp((v_j - c(x, y_j)) / rho) nu_j`.
/// Zero-weight atoms drop out of the sum.
pub fn semidiscrete_h(
    x: &Point,
    v: &[f64],
    nu: &DiscreteMeasure,
    rho: f64,
    cost_kind: CostKind,
) -> Result<f64> {
    h_and_grad(x, v, nu, rho, cost_kind).map(|(h, _)| h)
}

/// `nu_j - softmax_j`, the softmax taken over the nu-weighted exponents.
pub fn grad_v_h(
    x: &Point,
    v: &[f64],
    nu: &DiscreteMeasure,
    rho: f64,
    cost_kind: CostKind,
) -> Result<Vec<f64>> {
    h_and_grad(x, v, nu, rho, cost_kind).map(|(_, g)| g)
}

/// `E_{X ~ mu}[h(X, v)]` for a discrete `mu`, with its gradient.
pub fn expected_h(
    mu: &DiscreteMeasure,
    v: &[f64],
    nu: &DiscreteMeasure,
    rho: f64,
    cost_kind: CostKind,
) -> Result<(f64, Vec<f64>)> {
    let mut value = 0.0;
    let mut grad = vec![0.0; v.len()];
    for (x, &w) in mu.atoms().iter().zip(mu.weights()) {
        let (h, g) = h_and_grad(x, v, nu, rho, cost_kind)?;
        value += w * h;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += w * b;
        }
    }
    Ok((value, grad))
}
