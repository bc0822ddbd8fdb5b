mod common;

use common::{gaussian, orthogonal, rng};
use influence_proxy::linalg::{svd_rank, svd_thin, sym_root_pair, Matrix};
use proptest::prelude::*;

fn orthonormality_defect(q: &Matrix) -> f64 {
    q.t_matmul(q).unwrap().sub(&Matrix::identity(q.cols())).unwrap().max_abs()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn svd_reconstructs_with_orthonormal_factors(rows in 1usize..=64, cols in 1usize..=64, seed: u64) {
        let m = gaussian(rows, cols, &mut rng(seed));
        let f = svd_thin(&m).unwrap();
        let scale = m.frobenius_norm();
        prop_assert!(f.reconstruct().sub(&m).unwrap().frobenius_norm() <= 1e-8 * scale);
        prop_assert!(orthonormality_defect(&f.u) <= 1e-8);
        prop_assert!(orthonormality_defect(&f.v) <= 1e-8);
        prop_assert!(f.s.windows(2).all(|w| w[0] >= w[1]) && f.s.iter().all(|&s| s >= 0.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn truncated_svd_beats_random_rank_r(rows in 1usize..=24, cols in 1usize..=24, seed: u64) {
        let mut g = rng(seed);
        let m = gaussian(rows, cols, &mut g);
        for r in 1..=rows.min(cols) {
            let best = m.sub(&svd_rank(&m, r).unwrap().reconstruct()).unwrap().frobenius_norm();
            for _ in 0..50 {
                let cand = gaussian(rows, r, &mut g).matmul(&gaussian(r, cols, &mut g)).unwrap();
                prop_assert!(best <= m.sub(&cand).unwrap().frobenius_norm() + 1e-8);
            }
        }
    }

    #[test]
    fn damped_root_pair_round_trips(n in 1usize..=24, log_cond in 0.0f64..6.0, lambda in 0.0f64..1e-3, seed: u64) {
        let mut g = rng(seed);
        let q = orthogonal(n, &mut g);
        let eig: Vec<f64> = (0..n)
            .map(|i| if n == 1 { 1.0 } else { 10f64.powf(-log_cond * i as f64 / (n - 1) as f64) })
            .collect();
        let c = q.scale_cols(&eig).unwrap().matmul_t(&q).unwrap();
        let c = c.add(&c.transpose()).unwrap().scale(0.5);
        let p = sym_root_pair(&c, lambda).unwrap();
        let id = p.inv_root.matmul(&c.add_diag(lambda).unwrap()).unwrap().matmul(&p.inv_root).unwrap();
        prop_assert!(id.sub(&Matrix::identity(n)).unwrap().max_abs() <= 1e-6);
        let sq = p.root.matmul(&p.root).unwrap();
        prop_assert!(sq.sub(&c.add_diag(lambda).unwrap()).unwrap().max_abs() <= 1e-10);
    }
}
