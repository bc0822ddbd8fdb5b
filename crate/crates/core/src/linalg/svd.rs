//! Thin singular value decomposition by one-sided (Hestenes) Jacobi rotations.
//!
//! The tall side is orthogonalized column by column; singular values are the
//! resulting column norms. This gives high relative accuracy on the small
//! dense matrices used here and is fully deterministic.

use super::matrix::{dot, Matrix};
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 80;
/// Columns whose norm falls below this fraction of the largest are treated
/// as null directions and replaced by an orthonormal completion.
const NULL_REL_TOL: f64 = 1e-13;

/// `M = U · diag(s) · Vᵀ` with `k = min(rows, cols)` columns in `U` and `V`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdFactors {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub v: Matrix,
}

impl SvdFactors {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    pub fn reconstruct(&self) -> Matrix {
        let us = self
            .u
            .scale_cols(&self.s)
            .expect("factor shapes are consistent");
        us.matmul_t(&self.v).expect("factor shapes are consistent")
    }

    /// `√(Σ s_i²)` over the discarded tail when truncating to rank `r`.
    pub fn tail_energy(&self, r: usize) -> f64 {
        self.s.iter().skip(r).map(|s| s * s).sum::<f64>().sqrt()
    }
}

pub fn svd_thin(m: &Matrix) -> Result<SvdFactors> {
    m.ensure_finite()?;
    if m.rows() == 0 || m.cols() == 0 {
        return Err(Error::InvalidArgument(format!(
            "svd of empty {}x{} matrix",
            m.rows(),
            m.cols()
        )));
    }
    let mut f = if m.rows() >= m.cols() {
        jacobi_tall(m)
    } else {
        let t = jacobi_tall(&m.transpose());
        SvdFactors {
            u: t.v,
            s: t.s,
            v: t.u,
        }
    };
    fix_signs(&mut f);
    Ok(f)
}

/// Keeps the leading `r` singular triplets.
pub fn svd_truncate(f: &SvdFactors, r: usize) -> Result<SvdFactors> {
    let k = f.rank();
    if r == 0 || r > k {
        return Err(Error::RankOutOfRange { rank: r, max: k });
    }
    Ok(SvdFactors {
        u: f.u.leading_cols(r),
        s: f.s[..r].to_vec(),
        v: f.v.leading_cols(r),
    })
}

/// Rank-`r` truncated SVD of `m`.
pub fn svd_rank(m: &Matrix, r: usize) -> Result<SvdFactors> {
    svd_truncate(&svd_thin(m)?, r)
}

fn jacobi_tall(m: &Matrix) -> SvdFactors {
    let rows = m.rows();
    let n = m.cols();
    // Column-major working copies.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| m.column(j)).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let tol = (rows as f64 * f64::EPSILON).max(1e-15);
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = cols.split_at_mut(q);
                rotate(&mut lo[p], &mut hi[0], c, s);
                let (lo, hi) = vcols.split_at_mut(q);
                rotate(&mut lo[p], &mut hi[0], c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));
    let s: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let smax = s.first().copied().unwrap_or(0.0);

    let mut ucols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut pending = Vec::new();
    for (slot, &j) in order.iter().enumerate() {
        if norms[j] > smax * NULL_REL_TOL && norms[j] > f64::MIN_POSITIVE {
            ucols.push(cols[j].iter().map(|v| v / norms[j]).collect());
        } else {
            ucols.push(Vec::new());
            pending.push(slot);
        }
    }
    complete_orthonormal(&mut ucols, &pending, rows);

    let u = Matrix::from_columns(&ucols).expect("columns share a length");
    let vsorted: Vec<Vec<f64>> = order.iter().map(|&j| vcols[j].clone()).collect();
    let v = Matrix::from_columns(&vsorted).expect("columns share a length");
    SvdFactors { u, s, v }
}

#[inline]
fn rotate(x: &mut [f64], y: &mut [f64], c: f64, s: f64) {
    for (a, b) in x.iter_mut().zip(y.iter_mut()) {
        let (xa, yb) = (*a, *b);
        *a = c * xa - s * yb;
        *b = s * xa + c * yb;
    }
}

/// Fills the `pending` slots with unit vectors orthogonal to every other slot.
fn complete_orthonormal(cols: &mut [Vec<f64>], pending: &[usize], dim: usize) {
    let mut candidate = 0usize;
    for &slot in pending {
        loop {
            assert!(candidate < dim, "orthonormal completion exhausted basis");
            let mut v = vec![0.0; dim];
            v[candidate] = 1.0;
            candidate += 1;
            // Two passes of modified Gram-Schmidt.
            for _ in 0..2 {
                for other in cols.iter() {
                    if other.is_empty() {
                        continue;
                    }
                    let proj = dot(&v, other);
                    for (vi, oi) in v.iter_mut().zip(other) {
                        *vi -= proj * oi;
                    }
                }
            }
            let nv = dot(&v, &v).sqrt();
            if nv > 0.5 {
                v.iter_mut().for_each(|x| *x /= nv);
                cols[slot] = v;
                break;
            }
        }
    }
}

/// Makes the largest-magnitude entry of each `U` column nonnegative.
fn fix_signs(f: &mut SvdFactors) {
    for j in 0..f.u.cols() {
        let mut best = 0.0f64;
        let mut best_val = 0.0;
        for i in 0..f.u.rows() {
            let v = f.u.get(i, j);
            if v.abs() > best {
                best = v.abs();
                best_val = v;
            }
        }
        if best_val < 0.0 {
            for i in 0..f.u.rows() {
                f.u.set(i, j, -f.u.get(i, j));
            }
            for i in 0..f.v.rows() {
                f.v.set(i, j, -f.v.get(i, j));
            }
        }
    }
}
