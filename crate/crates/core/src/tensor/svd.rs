//! Thin SVD by one-sided (Hestenes) Jacobi rotations.

use super::matrix::Matrix;
use crate::error::{Error, Result};

pub const MAX_SWEEPS: usize = 100;

#[derive(Clone, Debug)]
pub struct Svd {
    /// Singular values, descending.
    pub values: Vec<f64>,
    /// `m x r` left singular vectors, `r = min(m, n)`.
    pub u: Matrix,
    /// `n x r` right singular vectors.
    pub v: Matrix,
}

impl Svd {
    pub fn reconstruct(&self) -> Matrix {
        let r = self.values.len();
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for (j, s) in self.values.iter().enumerate().take(r) {
                let x = us.get(i, j) * s;
                us.set(i, j, x);
            }
        }
        us.matmul(&self.v.transpose()).expect("svd factors chain")
    }
}

/// Singular values of `a`, descending.
pub fn singular_values(a: &Matrix) -> Result<Vec<f64>> {
    svd(a).map(|s| s.values)
}

pub fn svd(a: &Matrix) -> Result<Svd> {
    if a.is_empty() {
        return Err(Error::Domain("svd of an empty matrix".into()));
    }
    if a.rows() < a.cols() {
        let t = svd_tall(&a.transpose())?;
        return Ok(Svd { values: t.values, u: t.v, v: t.u });
    }
    svd_tall(a)
}

/// `a` has at least as many rows as columns.
fn svd_tall(a: &Matrix) -> Result<Svd> {
    let (m, n) = a.shape();
    // work[j] holds column j of the rotated matrix
    let mut work: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a.get(i, j)).collect()).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let tol = 1e-15;
    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha: f64 = work[p].iter().map(|x| x * x).sum();
                let beta: f64 = work[q].iter().map(|x| x * x).sum();
                let gamma: f64 = work[p].iter().zip(&work[q]).map(|(x, y)| x * y).sum();
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut work, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numeric(format!("jacobi svd did not converge in {MAX_SWEEPS} sweeps")));
    }
    let mut order: Vec<(f64, usize)> = work
        .iter()
        .enumerate()
        .map(|(j, col)| (col.iter().map(|x| x * x).sum::<f64>().sqrt(), j))
        .collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut u = Matrix::zeros(m, n);
    let mut v = Matrix::zeros(n, n);
    let mut values = Vec::with_capacity(n);
    for (k, &(sigma, j)) in order.iter().enumerate() {
        values.push(sigma);
        if sigma > 0.0 {
            for i in 0..m {
                u.set(i, k, work[j][i] / sigma);
            }
        }
        for i in 0..n {
            v.set(i, k, vcols[j][i]);
        }
    }
    Ok(Svd { values, u, v })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}
