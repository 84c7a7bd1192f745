//! Exact transport on small supports via a dense two-phase simplex.
//!
//! Only meant as a test oracle: Bland's rule keeps it cycle-free, and the
//! tableau is at most 15 x 130 at the 8 x 8 limit.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::measures::{CostMatrix, Coupling, DiscreteMeasure};

/// Largest support (per side) accepted by [`exact_emd`].
pub const EXACT_LIMIT: usize = 8;

const EPS: f64 = 1e-12;

/// Minimises `<kappa, C>` over couplings of `mu` and `nu`.
pub fn exact_emd(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    cost: &CostMatrix,
) -> Result<(Coupling, f64)> {
    let (n1, n2) = (mu.len(), nu.len());
    if n1 > EXACT_LIMIT || n2 > EXACT_LIMIT {
        return Err(Error::SupportTooLarge {
            rows: n1,
            cols: n2,
            limit: EXACT_LIMIT,
        });
    }
    if cost.shape() != (n1, n2) {
        return Err(Error::ShapeMismatch {
            expected: (n1, n2),
            got: cost.shape(),
        });
    }
    let c = cost.entries();
    let nvars = n1 * n2;
    // Row constraints, then all but the last column constraint (it is implied).
    let mut a = Vec::with_capacity(n1 + n2 - 1);
    let mut b = Vec::with_capacity(n1 + n2 - 1);
    for i in 0..n1 {
        let mut row = vec![0.0; nvars];
        row[i * n2..(i + 1) * n2].fill(1.0);
        a.push(row);
        b.push(mu.weights()[i]);
    }
    for j in 0..n2 - 1 {
        let mut row = vec![0.0; nvars];
        for i in 0..n1 {
            row[i * n2 + j] = 1.0;
        }
        a.push(row);
        b.push(nu.weights()[j]);
    }
    let obj: Vec<f64> = c.iter().copied().collect();
    let x = simplex_min(&obj, &a, &b)?;

    let mass = Array2::from_shape_vec((n1, n2), x.iter().map(|v| v.max(0.0)).collect())
        .expect("shape matches variable count");
    let value = (&mass * c).sum();
    Ok((Coupling::from_solver(mass), value.max(0.0)))
}

/// `min obj.x  s.t.  a x = b, x >= 0` with `b >= 0`.
fn simplex_min(obj: &[f64], a: &[Vec<f64>], b: &[f64]) -> Result<Vec<f64>> {
    let m = a.len();
    let n = obj.len();
    let width = n + m + 1;
    let rhs = width - 1;
    let mut t: Vec<Vec<f64>> = a
        .iter()
        .zip(b)
        .enumerate()
        .map(|(i, (row, &bi))| {
            let mut r = vec![0.0; width];
            r[..n].copy_from_slice(row);
            r[n + i] = 1.0;
            r[rhs] = bi;
            r
        })
        .collect();
    let mut basis: Vec<usize> = (n..n + m).collect();

    // Phase one: drive the artificial variables out.
    let mut z = vec![0.0; width];
    for row in &t {
        for j in 0..n {
            z[j] -= row[j];
        }
        z[rhs] -= row[rhs];
    }
    run(&mut t, &mut z, &mut basis, n + m)?;
    if -z[rhs] > 1e-9 {
        return Err(Error::InvalidMeasure(format!(
            "transport problem infeasible (phase one residual {})",
            -z[rhs]
        )));
    }
    for r in 0..m {
        if basis[r] >= n {
            if let Some(j) = (0..n).find(|&j| t[r][j].abs() > 1e-9) {
                pivot(&mut t, &mut z, &mut basis, r, j);
            }
        }
    }

    // Phase two on the original objective.
    let mut z = vec![0.0; width];
    z[..n].copy_from_slice(obj);
    for r in 0..m {
        let cb = if basis[r] < n { obj[basis[r]] } else { 0.0 };
        if cb != 0.0 {
            for j in 0..width {
                z[j] -= cb * t[r][j];
            }
        }
    }
    run(&mut t, &mut z, &mut basis, n)?;

    let mut x = vec![0.0; n];
    for (r, &bv) in basis.iter().enumerate() {
        if bv < n {
            x[bv] = t[r][rhs];
        }
    }
    Ok(x)
}

// Bland's rule: lowest-index entering column, lowest-index basic on ratio ties.
fn run(t: &mut [Vec<f64>], z: &mut [f64], basis: &mut [usize], allowed: usize) -> Result<()> {
    let rhs = z.len() - 1;
    for _ in 0..100_000 {
        let Some(enter) = (0..allowed).find(|&j| z[j] < -EPS) else {
            return Ok(());
        };
        let mut leave: Option<(usize, f64)> = None;
        for (r, row) in t.iter().enumerate() {
            if row[enter] > EPS {
                let ratio = row[rhs] / row[enter];
                leave = match leave {
                    None => Some((r, ratio)),
                    Some((lr, lratio)) => {
                        if ratio < lratio - EPS
                            || ((ratio - lratio).abs() <= EPS && basis[r] < basis[lr])
                        {
                            Some((r, ratio))
                        } else {
                            Some((lr, lratio))
                        }
                    }
                };
            }
        }
        let Some((r, _)) = leave else {
            return Err(Error::InvalidMeasure("transport LP unbounded".into()));
        };
        pivot(t, z, basis, r, enter);
    }
    Err(Error::NotConverged { residual: f64::NAN })
}

fn pivot(t: &mut [Vec<f64>], z: &mut [f64], basis: &mut [usize], r: usize, col: usize) {
    let p = t[r][col];
    for v in t[r].iter_mut() {
        *v /= p;
    }
    let pivot_row = t[r].clone();
    for (i, row) in t.iter_mut().enumerate() {
        if i != r && row[col] != 0.0 {
            let f = row[col];
            for (v, pv) in row.iter_mut().zip(&pivot_row) {
                *v -= f * pv;
            }
        }
    }
    let f = z[col];
    for (v, pv) in z.iter_mut().zip(&pivot_row) {
        *v -= f * pv;
    }
    basis[r] = col;
}
