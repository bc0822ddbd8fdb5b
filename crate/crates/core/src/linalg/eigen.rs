//! Symmetric eigendecomposition and the damped square roots built on it.

use super::matrix::Matrix;
use crate::error::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-10;
const MAX_SWEEPS: usize = 100;
/// Shifted eigenvalues at or below this fraction of the largest make the
/// inverse root undefined.
const SINGULAR_REL_TOL: f64 = 1e-12;

/// Eigenvalues in descending order with matching eigenvector columns.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    pub values: Vec<f64>,
    pub vectors: Matrix,
}

/// `root · root = C + λI` and `inv_root · root = I`.
#[derive(Debug, Clone)]
pub struct SymRoots {
    pub root: Matrix,
    pub inv_root: Matrix,
}

fn check_symmetric(c: &Matrix) -> Result<()> {
    c.ensure_finite()?;
    let asym = c.asymmetry().ok_or(Error::NotSquare {
        rows: c.rows(),
        cols: c.cols(),
    })?;
    let scale = c.max_abs().max(1.0);
    if asym > SYMMETRY_TOL * scale {
        return Err(Error::NotSymmetric { asymmetry: asym });
    }
    Ok(())
}

/// Cyclic Jacobi eigenvalue iteration.
pub fn sym_eigen(c: &Matrix) -> Result<SymmetricEigen> {
    check_symmetric(c)?;
    let n = c.rows();
    // Symmetrize exactly so rotations see a symmetric input.
    let mut a = Matrix::from_fn(n, n, |i, j| 0.5 * (c.get(i, j) + c.get(j, i)));
    let mut v = Matrix::identity(n);

    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a.get(i, j).powi(2))
            .sum();
        let diag: f64 = (0..n).map(|i| a.get(i, i).powi(2)).sum();
        if off <= f64::EPSILON * f64::EPSILON * diag || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = t * cs;
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, cs * akp - sn * akq);
                    a.set(k, q, sn * akp + cs * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, cs * apk - sn * aqk);
                    a.set(q, k, sn * apk + cs * aqk);
                }
                a.set(p, q, 0.0);
                a.set(q, p, 0.0);
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, cs * vkp - sn * vkq);
                    v.set(k, q, sn * vkp + cs * vkq);
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| a.get(y, y).total_cmp(&a.get(x, x)));
    let values = order.iter().map(|&i| a.get(i, i)).collect();
    let vectors = Matrix::from_fn(n, n, |i, j| v.get(i, order[j]));
    Ok(SymmetricEigen { values, vectors })
}

/// `Q · diag(f(μ)) · Qᵀ`.
fn spectral_map(e: &SymmetricEigen, f: impl Fn(f64) -> f64) -> Matrix {
    let d: Vec<f64> = e.values.iter().map(|&mu| f(mu)).collect();
    e.vectors
        .scale_cols(&d)
        .and_then(|qd| qd.matmul_t(&e.vectors))
        .expect("eigenvector matrix is square")
}

/// `(C + λI)^{1/2}`. Tiny negative eigenvalues from rounding are clamped to 0.
pub fn sym_root(c: &Matrix, lambda: f64) -> Result<Matrix> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("damping {lambda} must be >= 0")));
    }
    let e = sym_eigen(c)?;
    let top = e.values.first().map_or(0.0, |v| (v + lambda).abs());
    if let Some(&low) = e.values.last() {
        if low + lambda < -SINGULAR_REL_TOL * top.max(1.0) {
            return Err(Error::Singular { eigenvalue: low + lambda });
        }
    }
    Ok(spectral_map(&e, |mu| (mu + lambda).max(0.0).sqrt()))
}

/// Square root and inverse square root of `C + λI` via one eigendecomposition.
pub fn sym_root_pair(c: &Matrix, lambda: f64) -> Result<SymRoots> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("damping {lambda} must be >= 0")));
    }
    let e = sym_eigen(c)?;
    let top = e.values.first().map_or(0.0, |v| v + lambda);
    let low = e.values.last().map_or(0.0, |v| v + lambda);
    if top <= 0.0 || low <= SINGULAR_REL_TOL * top {
        return Err(Error::Singular { eigenvalue: low });
    }
    Ok(SymRoots {
        root: spectral_map(&e, |mu| (mu + lambda).sqrt()),
        inv_root: spectral_map(&e, |mu| 1.0 / (mu + lambda).sqrt()),
    })
}

/// `(s_i² / N + λ)^{1/2}` for each singular value of a probe matrix.
pub fn regularized_root_diag(s: &[f64], count: usize, lambda: f64) -> Result<Vec<f64>> {
    if count == 0 {
        return Err(Error::InvalidArgument("probe count must be >= 1".into()));
    }
    if !(lambda >= 0.0) || s.iter().any(|&v| !(v >= 0.0)) {
        return Err(Error::InvalidArgument(
            "singular values and damping must be nonnegative".into(),
        ));
    }
    let n = count as f64;
    Ok(s.iter().map(|&v| (v * v / n + lambda).sqrt()).collect())
}
