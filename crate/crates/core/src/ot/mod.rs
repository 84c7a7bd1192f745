//! Entropic optimal transport between discrete measures.
//!
//! Two value conventions are supported and tagged explicitly:
//!
//! * [`Convention::EntropyH`]: `<k, C> - rho * H(k)`
//! * [`Convention::KlProduct`]: `<k, C> + rho * KL(k || mu x nu)` with the
//!   standard KL (no `-1` in the integrand).
//!
//! Both have the same minimiser; for fixed marginals the values differ by
//! `rho * (H(mu) + H(nu))`. Dual potentials are always reported in the
//! convention of the solve, so that `coupling = exp((u + v - C) / rho)`
//! (EntropyH) or `coupling = mu nu^T exp((u + v - C) / rho)` (KlProduct).

mod exact;

pub use exact::{exact_emd, EXACT_LIMIT};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::{CostMatrix, Coupling, DiscreteMeasure};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convention {
    EntropyH,
    #[default]
    KlProduct,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OtConfig {
    pub rho: f64,
    pub max_iters: usize,
    /// L1 marginal residual threshold.
    pub tol: f64,
    pub convention: Convention,
    /// `None` picks log-domain iterations when `rho < 0.05 * median(C)`.
    pub log_domain: Option<bool>,
    /// Keep the dual objective after every sweep in [`SinkhornResult::trace`].
    pub record_trace: bool,
}

impl Default for OtConfig {
    fn default() -> Self {
        Self {
            rho: 1.0,
            max_iters: 100_000,
            tol: 1e-8,
            convention: Convention::KlProduct,
            log_domain: None,
            record_trace: false,
        }
    }
}

impl OtConfig {
    pub fn with_rho(rho: f64) -> Self {
        Self {
            rho,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0) || !self.rho.is_finite() {
            return Err(Error::InvalidParameter {
                name: "rho",
                reason: format!("must be positive, got {}", self.rho),
            });
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidParameter {
                name: "tol",
                reason: format!("must be positive, got {}", self.tol),
            });
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidParameter {
                name: "max_iters",
                reason: "must be at least 1".into(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SinkhornResult {
    pub coupling: Coupling,
    pub dual_u: Vec<f64>,
    pub dual_v: Vec<f64>,
    pub primal_value: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Final L1 marginal residual (rows + columns).
    pub residual: f64,
    pub rho: f64,
    pub convention: Convention,
    pub log_domain: bool,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<f64>,
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Sinkhorn iterations for the entropic problem. Both measures must have
/// strictly positive weights.
pub fn sinkhorn(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    cost: &CostMatrix,
    cfg: &OtConfig,
) -> Result<SinkhornResult> {
    cfg.validate()?;
    let (n1, n2) = (mu.len(), nu.len());
    if cost.shape() != (n1, n2) {
        return Err(Error::ShapeMismatch {
            expected: (n1, n2),
            got: cost.shape(),
        });
    }
    if mu.weights().iter().chain(nu.weights()).any(|&w| w <= 0.0) {
        return Err(Error::InvalidMeasure(
            "sinkhorn needs strictly positive weights".into(),
        ));
    }
    let log_domain = cfg
        .log_domain
        .unwrap_or_else(|| cfg.rho < 0.05 * cost.median());
    let solved = if log_domain {
        log_iterations(mu.weights(), nu.weights(), cost.entries(), cfg)
    } else {
        match scaling_iterations(mu.weights(), nu.weights(), cost.entries(), cfg) {
            Err(Error::ScalingOverflow { iteration }) if cfg.log_domain.is_none() => {
                log::debug!("scaling overflow at iteration {iteration}, switching to log domain");
                log_iterations(mu.weights(), nu.weights(), cost.entries(), cfg)
            }
            other => other,
        }
    }?;
    let Solved {
        mut u,
        mut v,
        mass,
        iterations,
        residual,
        trace,
    } = solved;

    let coupling = Coupling::from_solver(mass);
    let primal_value = entropic_value(&coupling, cost, cfg.rho, cfg.convention)?;
    if cfg.convention == Convention::EntropyH {
        for (ui, w) in u.iter_mut().zip(mu.weights()) {
            *ui += cfg.rho * w.ln();
        }
        for (vj, w) in v.iter_mut().zip(nu.weights()) {
            *vj += cfg.rho * w.ln();
        }
    }
    Ok(SinkhornResult {
        coupling,
        dual_u: u,
        dual_v: v,
        primal_value,
        iterations,
        converged: residual <= cfg.tol,
        residual,
        rho: cfg.rho,
        convention: cfg.convention,
        log_domain,
        trace,
    })
}

/// Unregularised `W_1` between the uniform empirical measures of two
/// samples on the line: the area between their distribution functions.
pub fn w1_line(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.is_empty() || ys.is_empty() {
        return Err(Error::Empty("sample"));
    }
    if xs.iter().chain(ys).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("sample"));
    }
    let mut a = xs.to_vec();
    let mut b = ys.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (wa, wb) = (1.0 / a.len() as f64, 1.0 / b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let (mut fa, mut fb) = (0.0f64, 0.0f64);
    let mut at = a[0].min(b[0]);
    let mut total = 0.0;
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        total += (fa - fb).abs() * (next - at);
        at = next;
        while i < a.len() && a[i] == next {
            fa += wa;
            i += 1;
        }
        while j < b.len() && b[j] == next {
            fb += wb;
            j += 1;
        }
    }
    Ok(total)
}

// KlProduct-convention potentials plus the coupling they generate.
struct Solved {
    u: Vec<f64>,
    v: Vec<f64>,
    mass: Array2<f64>,
    iterations: usize,
    residual: f64,
    trace: Vec<f64>,
}

fn log_iterations(mu: &[f64], nu: &[f64], c: &Array2<f64>, cfg: &OtConfig) -> Result<Solved> {
    let rho = cfg.rho;
    let (n1, n2) = c.dim();
    let log_mu: Vec<f64> = mu.iter().map(|w| w.ln()).collect();
    let log_nu: Vec<f64> = nu.iter().map(|w| w.ln()).collect();
    let mut u = vec![0.0; n1];
    let mut v = vec![0.0; n2];
    let mut trace = Vec::new();
    let mut last_dual = f64::NEG_INFINITY;
    let mut residual = f64::INFINITY;
    let mut iterations = 0;

    while iterations < cfg.max_iters {
        iterations += 1;
        for i in 0..n1 {
            u[i] = -rho * log_sum_exp((0..n2).map(|j| log_nu[j] + (v[j] - c[[i, j]]) / rho));
        }
        for j in 0..n2 {
            v[j] = -rho * log_sum_exp((0..n1).map(|i| log_mu[i] + (u[i] - c[[i, j]]) / rho));
        }
        // Columns are exact after the v-update; rows carry the residual.
        residual = (0..n1)
            .map(|i| {
                let row: f64 = (0..n2)
                    .map(|j| (log_mu[i] + log_nu[j] + (u[i] + v[j] - c[[i, j]]) / rho).exp())
                    .sum();
                (row - mu[i]).abs()
            })
            .sum();
        if !residual.is_finite() {
            return Err(Error::NonFinite("log-domain sinkhorn residual"));
        }
        if !track_dual(&u, &v, mu, nu, c, rho, cfg, &mut trace, &mut last_dual) {
            return Err(Error::NonFinite("log-domain sinkhorn dual"));
        }
        if residual <= cfg.tol {
            break;
        }
    }
    let mass = Array2::from_shape_fn((n1, n2), |(i, j)| {
        (log_mu[i] + log_nu[j] + (u[i] + v[j] - c[[i, j]]) / rho).exp()
    });
    let residual = residual + column_residual(&mass, nu);
    Ok(Solved {
        u,
        v,
        mass,
        iterations,
        residual,
        trace,
    })
}

fn scaling_iterations(
    mu: &[f64],
    nu: &[f64],
    c: &Array2<f64>,
    cfg: &OtConfig,
) -> Result<Solved> {
    let rho = cfg.rho;
    let (n1, n2) = c.dim();
    let k = c.mapv(|cij| (-cij / rho).exp());
    let mut a = vec![1.0; n1];
    let mut b = vec![1.0; n2];
    let mut trace = Vec::new();
    let mut last_dual = f64::NEG_INFINITY;
    let mut residual = f64::INFINITY;
    let mut iterations = 0;

    let potentials = |a: &[f64], b: &[f64]| -> (Vec<f64>, Vec<f64>) {
        (
            a.iter().zip(mu).map(|(ai, m)| rho * (ai / m).ln()).collect(),
            b.iter().zip(nu).map(|(bj, n)| rho * (bj / n).ln()).collect(),
        )
    };

    while iterations < cfg.max_iters {
        iterations += 1;
        for i in 0..n1 {
            let kb: f64 = (0..n2).map(|j| k[[i, j]] * b[j]).sum();
            a[i] = mu[i] / kb;
        }
        for j in 0..n2 {
            let ka: f64 = (0..n1).map(|i| k[[i, j]] * a[i]).sum();
            b[j] = nu[j] / ka;
        }
        if a.iter().chain(&b).any(|x| !x.is_finite() || *x == 0.0) {
            return Err(Error::ScalingOverflow {
                iteration: iterations,
            });
        }
        residual = (0..n1)
            .map(|i| {
                let row: f64 = (0..n2).map(|j| a[i] * k[[i, j]] * b[j]).sum();
                (row - mu[i]).abs()
            })
            .sum();
        if !residual.is_finite() {
            return Err(Error::ScalingOverflow {
                iteration: iterations,
            });
        }
        if cfg.record_trace || cfg!(debug_assertions) {
            let (u, v) = potentials(&a, &b);
            if !track_dual(&u, &v, mu, nu, c, rho, cfg, &mut trace, &mut last_dual) {
                return Err(Error::ScalingOverflow {
                    iteration: iterations,
                });
            }
        }
        if residual <= cfg.tol {
            break;
        }
    }
    let mass = Array2::from_shape_fn((n1, n2), |(i, j)| a[i] * k[[i, j]] * b[j]);
    let (u, v) = potentials(&a, &b);
    let residual = residual + column_residual(&mass, nu);
    Ok(Solved {
        u,
        v,
        mass,
        iterations,
        residual,
        trace,
    })
}

fn column_residual(mass: &Array2<f64>, nu: &[f64]) -> f64 {
    mass.sum_axis(ndarray::Axis(0))
        .iter()
        .zip(nu)
        .map(|(s, n)| (s - n).abs())
        .sum()
}

// Block-coordinate ascent never decreases the dual objective.
#[allow(clippy::too_many_arguments)]
fn track_dual(
    u: &[f64],
    v: &[f64],
    mu: &[f64],
    nu: &[f64],
    c: &Array2<f64>,
    rho: f64,
    cfg: &OtConfig,
    trace: &mut Vec<f64>,
    last: &mut f64,
) -> bool {
    if !cfg.record_trace && !cfg!(debug_assertions) {
        return true;
    }
    let d = kl_dual(u, v, mu, nu, c, rho);
    if !d.is_finite() {
        return false;
    }
    debug_assert!(
        d >= *last - 1e-9 * (1.0 + last.abs()),
        "sinkhorn dual decreased: {last} -> {d}"
    );
    *last = d;
    if cfg.record_trace {
        trace.push(d);
    }
    true
}

fn kl_dual(u: &[f64], v: &[f64], mu: &[f64], nu: &[f64], c: &Array2<f64>, rho: f64) -> f64 {
    let lin: f64 = u.iter().zip(mu).map(|(a, b)| a * b).sum::<f64>()
        + v.iter().zip(nu).map(|(a, b)| a * b).sum::<f64>();
    let mut mass = 0.0;
    for (i, ui) in u.iter().enumerate() {
        for (j, vj) in v.iter().enumerate() {
            mass += mu[i] * nu[j] * ((ui + vj - c[[i, j]]) / rho).exp();
        }
    }
    lin - rho * (mass - 1.0)
}

/// Entropic objective of a coupling under the chosen convention.
/// KlProduct reads the reference marginals off the coupling itself.
pub fn entropic_value(
    kappa: &Coupling,
    cost: &CostMatrix,
    rho: f64,
    convention: Convention,
) -> Result<f64> {
    let k = kappa.mass();
    if k.dim() != cost.shape() {
        return Err(Error::ShapeMismatch {
            expected: cost.shape(),
            got: k.dim(),
        });
    }
    if let Some(((row, col), &value)) = k.indexed_iter().find(|(_, &m)| m < 0.0) {
        return Err(Error::NegativeMass { row, col, value });
    }
    let transport = (k * cost.entries()).sum();
    let xlogx = |x: f64| if x > 0.0 { x * x.ln() } else { 0.0 };
    Ok(match convention {
        Convention::EntropyH => transport + rho * k.iter().map(|&x| xlogx(x)).sum::<f64>(),
        Convention::KlProduct => {
            let rows = kappa.row_sums();
            let cols = kappa.col_sums();
            let kl: f64 = k
                .indexed_iter()
                .filter(|(_, &x)| x > 0.0)
                .map(|((i, j), &x)| x * (x / (rows[i] * cols[j])).ln())
                .sum();
            transport + rho * kl
        }
    })
}

/// Dual objective `<u, mu> + <v, nu> - rho * (B(u, v) - 1)`.
///
/// `B` is the unweighted exponential sum for EntropyH potentials and the
/// `mu nu^T`-weighted one for KlProduct potentials. The `+ rho` restores the
/// unit-mass constant, so at the optimum this equals the primal value.
pub fn dual_objective(
    u: &[f64],
    v: &[f64],
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    cost: &CostMatrix,
    rho: f64,
    convention: Convention,
) -> Result<f64> {
    if (u.len(), v.len()) != cost.shape() || cost.shape() != (mu.len(), nu.len()) {
        return Err(Error::ShapeMismatch {
            expected: (mu.len(), nu.len()),
            got: (u.len(), v.len()),
        });
    }
    match convention {
        Convention::KlProduct => Ok(kl_dual(
            u,
            v,
            mu.weights(),
            nu.weights(),
            cost.entries(),
            rho,
        )),
        Convention::EntropyH => {
            let lin: f64 = u.iter().zip(mu.weights()).map(|(a, b)| a * b).sum::<f64>()
                + v.iter().zip(nu.weights()).map(|(a, b)| a * b).sum::<f64>();
            let b = crate::dual::b_dual(
                &crate::dual::DualVectors::new(u.to_vec(), v.to_vec())?,
                cost,
                rho,
            )?;
            Ok(lin - rho * (b.value - 1.0))
        }
    }
}

impl SinkhornResult {
    /// Dual objective of this result's potentials.
    pub fn dual_value(
        &self,
        mu: &DiscreteMeasure,
        nu: &DiscreteMeasure,
        cost: &CostMatrix,
    ) -> Result<f64> {
        dual_objective(
            &self.dual_u,
            &self.dual_v,
            mu,
            nu,
            cost,
            self.rho,
            self.convention,
        )
    }
}

/// Gradient of the entropic value with respect to the left marginal, as the
/// left potential centred to sum zero (potentials carry a free additive
/// constant, so only the simplex-tangent part is meaningful).
pub fn grad_wrt_left_marginal(result: &SinkhornResult) -> Result<Vec<f64>> {
    if !result.converged {
        return Err(Error::NotConverged {
            residual: result.residual,
        });
    }
    let mean = result.dual_u.iter().sum::<f64>() / result.dual_u.len() as f64;
    Ok(result.dual_u.iter().map(|u| u - mean).collect())
}
