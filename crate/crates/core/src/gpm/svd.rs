//! Thin SVD by one-sided (Hestenes) Jacobi rotations.
//!
//! Rotating column pairs of `A` until they are mutually orthogonal diagonalizes `AᵀA`
//! implicitly, i.e. it is cyclic Jacobi on the Gram matrix without forming it.

use crate::error::{RclError, Result};
use crate::tensor::Tensor;

const MAX_SWEEPS: usize = 80;
const TOL: f64 = 1e-15;

/// `A = U·diag(σ)·Vᵀ` with `U: m×p`, `V: n×p`, `p = min(m, n)`, σ descending.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: Tensor,
    pub sigma: Vec<f64>,
    pub v: Tensor,
}

impl Svd {
    pub fn reconstruct(&self) -> Tensor {
        let mut us = self.u.clone();
        for r in 0..us.rows() {
            for (c, s) in self.sigma.iter().enumerate() {
                let v = us.at(r, c) * s;
                us.set(r, c, v);
            }
        }
        us.matmul(&self.v.transpose()).expect("svd shapes")
    }

    /// Number of singular values above `rel_tol·σ_max`.
    pub fn rank(&self, rel_tol: f64) -> usize {
        let top = self.sigma.first().copied().unwrap_or(0.0);
        if top == 0.0 {
            return 0;
        }
        self.sigma.iter().filter(|&&s| s > rel_tol * top).count()
    }
}

pub fn svd(a: &Tensor) -> Result<Svd> {
    if a.shape().len() != 2 {
        return Err(RclError::dim("svd", format!("expected a matrix, got {:?}", a.shape())));
    }
    if !a.is_finite() {
        return Err(RclError::contract("svd", "input contains NaN or infinite entries"));
    }
    let (m, n) = (a.rows(), a.cols());
    if n > m {
        // Work on Aᵀ so rotations act on the shorter side.
        let t = svd_tall(&a.transpose());
        return Ok(Svd { u: t.v, sigma: t.sigma, v: t.u });
    }
    Ok(svd_tall(a))
}

/// One-sided Jacobi for `m ≥ n`.
fn svd_tall(a: &Tensor) -> Svd {
    let (m, n) = (a.rows(), a.cols());
    // Column-major working copies: cols[j] is column j.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a.at(i, j)).collect()).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n).map(|j| (0..n).map(|i| f64::from(u8::from(i == j))).collect()).collect();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha: f64 = cols[p].iter().map(|x| x * x).sum();
                let beta: f64 = cols[q].iter().map(|x| x * x).sum();
                let gamma: f64 = cols[p].iter().zip(&cols[q]).map(|(x, y)| x * y).sum();
                if gamma.abs() <= TOL * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let sign = if zeta >= 0.0 { 1.0 } else { -1.0 };
                let t = sign / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = cols.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps original column order among ties.
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap_or(std::cmp::Ordering::Equal));

    let sigma: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let top = sigma.first().copied().unwrap_or(0.0);
    let mut ucols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut pending = Vec::new();
    for (slot, &j) in order.iter().enumerate() {
        if norms[j] > 1e-13 * top.max(f64::MIN_POSITIVE) && norms[j] > 0.0 {
            ucols.push(cols[j].iter().map(|x| x / norms[j]).collect());
        } else {
            ucols.push(vec![0.0; m]);
            pending.push(slot);
        }
    }
    complete_basis(&mut ucols, &pending, m);

    let mut u = Tensor::zeros(&[m, n]);
    let mut v = Tensor::zeros(&[n, n]);
    for (slot, &j) in order.iter().enumerate() {
        for i in 0..m {
            u.set(i, slot, ucols[slot][i]);
        }
        for i in 0..n {
            v.set(i, slot, vcols[j][i]);
        }
    }
    Svd { u, sigma, v }
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Fills the `pending` columns with unit vectors orthogonal to all others (Gram–Schmidt
/// against the standard basis).
fn complete_basis(cols: &mut [Vec<f64>], pending: &[usize], m: usize) {
    let mut candidate = 0;
    for &slot in pending {
        while candidate < m {
            let mut e = vec![0.0; m];
            e[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for (k, c) in cols.iter().enumerate() {
                    if k == slot || c.iter().all(|&x| x == 0.0) {
                        continue;
                    }
                    let d: f64 = c.iter().zip(&e).map(|(a, b)| a * b).sum();
                    e.iter_mut().zip(c).for_each(|(x, y)| *x -= d * y);
                }
            }
            let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-8 {
                cols[slot] = e.into_iter().map(|x| x / norm).collect();
                break;
            }
        }
    }
}
