//! Thin SVD by one-sided (Hestenes) Jacobi rotations and the Moore–Penrose
//! pseudoinverse built on it.
//!
//! For an `m x n` input with `k = min(m, n)` the decomposition is returned in
//! thin form: `U` is `m x k`, `V` is `n x k`, and the singular values are
//! sorted non-increasing. Wide inputs are handled by factoring the transpose.

use crate::error::{ElmmError, Result};
use crate::numerics::matrix::dot;
use crate::numerics::Matrix;

/// Relative cutoff below which singular values are treated as zero by [`pinv`].
pub const PINV_RTOL: f64 = 1e-12;

const MAX_SWEEPS: usize = 80;

#[derive(Clone, Debug)]
pub struct Svd {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

impl Svd {
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for r in 0..us.rows() {
            for (x, s) in us.row_mut(r).iter_mut().zip(&self.sigma) {
                *x *= s;
            }
        }
        us.matmul_t(&self.v)
    }
}

pub fn svd(m: &Matrix) -> Result<Svd> {
    if !m.is_finite() {
        return Err(ElmmError::NonFinite("svd input".into()));
    }
    if m.rows() < m.cols() {
        let t = svd_tall(&m.transpose());
        return Ok(Svd {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        });
    }
    Ok(svd_tall(m))
}

/// One-sided Jacobi on the columns of a tall (`rows >= cols`) matrix.
fn svd_tall(m: &Matrix) -> Svd {
    let (rows, n) = m.shape();
    // Column-major working copies so rotations touch contiguous memory.
    let mut a: Vec<Vec<f64>> = (0..n).map(|c| m.column(c)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|c| {
            let mut e = vec![0.0; n];
            e[c] = 1.0;
            e
        })
        .collect();

    let eps = f64::EPSILON;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(&a[p], &a[p]);
                let beta = dot(&a[q], &a[q]);
                let gamma = dot(&a[p], &a[q]);
                if gamma == 0.0 || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut a, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = a.iter().map(|col| dot(col, col).sqrt()).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));

    let sigma_max = order.first().map_or(0.0, |&i| norms[i]);
    let floor = sigma_max * rows.max(n) as f64 * eps;
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    let mut v_out = Matrix::zeros(n, n);
    for (k, &i) in order.iter().enumerate() {
        let s = norms[i];
        let col = if s > floor && s > 0.0 {
            a[i].iter().map(|x| x / s).collect()
        } else {
            complete_basis(&u_cols, rows)
        };
        u_cols.push(col);
        sigma.push(if s > floor { s } else { 0.0 });
        for r in 0..n {
            v_out.set(r, k, v[i][r]);
        }
    }
    let mut u = Matrix::zeros(rows, n);
    for (k, col) in u_cols.iter().enumerate() {
        for (r, &x) in col.iter().enumerate() {
            u.set(r, k, x);
        }
    }
    Svd { u, sigma, v: v_out }
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let cp = &mut lo[p];
    let cq = &mut hi[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let xq = *y;
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// A unit vector orthogonal to `basis`, found by Gram–Schmidt over the
/// standard basis.
fn complete_basis(basis: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let mut best: Option<Vec<f64>> = None;
    let mut best_norm = 0.0;
    for e in 0..dim {
        let mut cand = vec![0.0; dim];
        cand[e] = 1.0;
        for _ in 0..2 {
            for b in basis {
                let proj = dot(&cand, b);
                for (c, bv) in cand.iter_mut().zip(b) {
                    *c -= proj * bv;
                }
            }
        }
        let norm = dot(&cand, &cand).sqrt();
        if norm > best_norm {
            best_norm = norm;
            best = Some(cand);
        }
        if best_norm > 0.5 {
            break;
        }
    }
    let v = best.expect("dimension exceeds basis size");
    v.iter().map(|x| x / best_norm).collect()
}

/// Moore–Penrose pseudoinverse `V Σ⁺ Uᵀ`, zeroing singular values below
/// `PINV_RTOL * σ_max`.
pub fn pinv(m: &Matrix) -> Result<Matrix> {
    let dec = svd(m)?;
    Ok(pinv_from_svd(&dec))
}

pub fn pinv_from_svd(dec: &Svd) -> Matrix {
    let sigma_max = dec.sigma.first().copied().unwrap_or(0.0);
    let cutoff = PINV_RTOL * sigma_max;
    let mut v_scaled = dec.v.clone();
    for r in 0..v_scaled.rows() {
        for (x, &s) in v_scaled.row_mut(r).iter_mut().zip(&dec.sigma) {
            *x = if s > cutoff && s > 0.0 { *x / s } else { 0.0 };
        }
    }
    v_scaled.matmul_t(&dec.u)
}
