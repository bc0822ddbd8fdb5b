//! Report statistics.

use crate::error::{Error, Result};
use crate::influence::descending_order;
use crate::linalg::{svd_thin, Matrix};

/// 1-based ranks with ties assigned their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &p in &order[i..=j] {
            ranks[p] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Degenerate("correlation of a constant vector".into()));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::mismatch("spearman", a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(Error::InvalidArgument("spearman needs at least two points".into()));
    }
    if let Some(v) = a.iter().chain(b).find(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite value {v} in spearman input")));
    }
    pearson(&average_ranks(a), &average_ranks(b))
}

/// Fraction of the first `k` entries of two ranked index lists that coincide.
pub fn topk_overlap(idx_a: &[usize], idx_b: &[usize], k: usize) -> Result<f64> {
    if k == 0 || k > idx_a.len() || k > idx_b.len() {
        return Err(Error::InvalidArgument(format!(
            "k={k} must be in 1..={}",
            idx_a.len().min(idx_b.len())
        )));
    }
    let mut a: Vec<usize> = idx_a[..k].to_vec();
    a.sort_unstable();
    let shared = idx_b[..k].iter().filter(|i| a.binary_search(i).is_ok()).count();
    Ok(shared as f64 / k as f64)
}

/// [`topk_overlap`] of the descending rankings of two score vectors.
pub fn topk_overlap_scores(a: &[f64], b: &[f64], k: usize) -> Result<f64> {
    topk_overlap(&descending_order(a), &descending_order(b), k)
}

/// Mean distance from each row to its nearest other row.
pub fn one_nnd(points: &Matrix) -> Result<f64> {
    let n = points.rows();
    if n < 2 {
        return Err(Error::InvalidArgument("1-NND needs at least two points".into()));
    }
    let total: f64 = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    points
                        .row(i)
                        .iter()
                        .zip(points.row(j))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .sum();
    Ok(total / n as f64)
}

fn leading_basis(g: &Matrix, k: usize) -> Result<Matrix> {
    let f = svd_thin(g)?;
    let top = f.s.first().copied().unwrap_or(0.0);
    let tol = 1e-10 * top.max(f64::MIN_POSITIVE);
    if f.s.len() < k || f.s[k - 1] <= tol {
        return Err(Error::RankOutOfRange {
            rank: k,
            max: f.s.iter().filter(|&&s| s > tol).count(),
        });
    }
    Ok(f.u.leading_cols(k))
}

/// Mean squared cosine of the principal angles between the top-`k` left
/// singular subspaces of two column stacks.
pub fn subspace_affinity(g_sel: &Matrix, g_val: &Matrix, k: usize) -> Result<f64> {
    if g_sel.rows() != g_val.rows() {
        return Err(Error::mismatch("subspace affinity", g_sel.rows(), g_val.rows()));
    }
    if k == 0 || k > g_sel.cols().min(g_val.cols()) {
        return Err(Error::InvalidArgument(format!(
            "k={k} must be in 1..={}",
            g_sel.cols().min(g_val.cols())
        )));
    }
    let u1 = leading_basis(g_sel, k)?;
    let u2 = leading_basis(g_val, k)?;
    let c = u1.t_matmul(&u2)?;
    Ok((c.frobenius_norm().powi(2) / k as f64).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[30.0, 20.0, 10.0]).unwrap(), -1.0);
        let r = spearman(&[1.0, 2.0, 3.0], &[1.0, 1.0, 2.0]).unwrap();
        // ranks (1,2,3) vs (1.5,1.5,3): centered (−1,0,1)·(−.5,−.5,1) = 1.5, norms √2·√1.5
        assert!((r - 1.5 / (2f64.sqrt() * 1.5f64.sqrt())).abs() < 1e-15);
        assert!((r - 0.8660254).abs() < 1e-7);
    }

    #[test]
    fn spearman_constant_is_degenerate() {
        let e = spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap_err();
        assert_eq!(e.code(), "E_DEGENERATE");
        assert!(spearman(&[1.0], &[1.0]).is_err());
        assert!(spearman(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn average_ranks_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn overlap_examples() {
        assert_eq!(topk_overlap(&[1, 2, 3], &[3, 1, 2], 3).unwrap(), 1.0);
        assert_eq!(topk_overlap(&[1, 2], &[3, 4], 2).unwrap(), 0.0);
        assert_eq!(topk_overlap(&[1, 2, 3, 4, 9], &[3, 7, 8, 1, 2], 4).unwrap(), 0.5);
        assert!(topk_overlap(&[1], &[1], 2).is_err());
        assert_eq!(topk_overlap_scores(&[0.9, 0.1, 0.5], &[0.2, 0.1, 0.8], 1).unwrap(), 0.0);
    }

    #[test]
    fn one_nnd_examples() {
        let dup = Matrix::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        assert_eq!(one_nnd(&dup).unwrap(), 0.0);
        let two = Matrix::from_rows(&[vec![0.0, 0.0], vec![3.0, 0.0]]).unwrap();
        assert_eq!(one_nnd(&two).unwrap(), 3.0);
        let line = Matrix::from_rows(&[vec![0.0], vec![1.0], vec![3.0]]).unwrap();
        assert!((one_nnd(&line).unwrap() - 4.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn affinity_examples() {
        let e1 = Matrix::from_columns(&[vec![1.0, 0.0, 0.0]]).unwrap();
        let e2 = Matrix::from_columns(&[vec![0.0, 1.0, 0.0]]).unwrap();
        let d = Matrix::from_columns(&[vec![1.0, 1.0, 0.0]]).unwrap();
        assert!((subspace_affinity(&e1, &e1.scale(-2.0), 1).unwrap() - 1.0).abs() < 1e-12);
        assert!(subspace_affinity(&e1, &e2, 1).unwrap().abs() < 1e-12);
        assert!((subspace_affinity(&e1, &d, 1).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn affinity_rejects_rank_deficiency() {
        let g = Matrix::from_columns(&[vec![1.0, 0.0], vec![2.0, 0.0]]).unwrap();
        let e = subspace_affinity(&g, &Matrix::identity(2), 2).unwrap_err();
        assert_eq!(e.code(), "E_RANK");
    }
}
