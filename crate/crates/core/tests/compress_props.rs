mod common;

use common::{gaussian, random_model, rel_err, rng};
use influence_proxy::compress::{
    collect_probe_stats, compress_model, ipsvd_direct, ipsvd_efficient, rank_from_sparsity, svd_factors,
    CompressionPlan, Method,
};
use influence_proxy::data::{generate, SyntheticSpec};
use influence_proxy::linalg::Matrix;
use proptest::prelude::*;
use rand::Rng;

/// Every (δ, h) pairing of two sample sets, as column stacks.
fn product_probe(deltas: &Matrix, inputs: &Matrix) -> (Matrix, Matrix) {
    let (nd, nh) = (deltas.cols(), inputs.cols());
    let d = Matrix::from_fn(deltas.rows(), nd * nh, |i, c| deltas.get(i, c / nh));
    let h = Matrix::from_fn(inputs.rows(), nd * nh, |i, c| inputs.get(i, c % nh));
    (d, h)
}

/// Mean of `(δᵀ E h)²` over probe columns plus the damping terms of the weighted objective.
fn directional_effect(e: &Matrix, d: &Matrix, h: &Matrix, lambda: f64) -> f64 {
    let n = d.cols();
    let mean: f64 = (0..n)
        .map(|k| {
            let eh = e.matvec(&h.column(k)).unwrap();
            let v: f64 = d.column(k).iter().zip(&eh).map(|(a, b)| a * b).sum();
            v * v
        })
        .sum::<f64>()
        / n as f64;
    let cd = d.matmul_t(d).unwrap().scale(1.0 / n as f64);
    let ch = h.matmul_t(h).unwrap().scale(1.0 / n as f64);
    let left = cd.matmul(e).unwrap().frobenius_dot(e).unwrap();
    let right = e.matmul(&ch).unwrap().frobenius_dot(e).unwrap();
    mean + lambda * (left + right) + lambda * lambda * e.frobenius_norm().powi(2)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ipsvd_minimizes_directional_effect(m in 1usize..=10, n in 1usize..=10, nd in 1usize..=6, nh in 1usize..=6, lambda in prop_oneof![Just(0.0), 1e-4f64..1e-1], seed: u64) {
        let mut g = rng(seed);
        let r = g.gen_range(1..=m.min(n));
        let w = gaussian(m, n, &mut g);
        let (d, h) = product_probe(&gaussian(m, nd, &mut g), &gaussian(n, nh, &mut g));
        let lambda = if nd < m || nh < n { lambda.max(1e-4) } else { lambda };
        let ip = ipsvd_direct(&w, &h, &d, lambda, r).unwrap().product();
        let sv = svd_factors(&w, r).unwrap().product();
        let e_ip = directional_effect(&w.sub(&ip).unwrap(), &d, &h, lambda);
        let e_sv = directional_effect(&w.sub(&sv).unwrap(), &d, &h, lambda);
        prop_assert!(e_ip <= e_sv + 1e-9 * e_sv.max(1.0), "{} > {}", e_ip, e_sv);
    }

    #[test]
    fn probe_space_route_matches_direct(m in 1usize..=10, n in 1usize..=10, extra in 0usize..8, lambda in prop_oneof![Just(1e-3), Just(1e-1)], seed: u64) {
        let mut g = rng(seed);
        let big_n = m.max(n) + extra;
        let r = g.gen_range(1..=m.min(n));
        let w = gaussian(m, n, &mut g);
        let h = gaussian(n, big_n, &mut g);
        let d = gaussian(m, big_n, &mut g);
        let direct = ipsvd_direct(&w, &h, &d, lambda, r).unwrap().product();
        let fast = ipsvd_efficient(&w, &h, &d, lambda, r).unwrap().product();
        prop_assert!(rel_err(&fast, &direct) <= 1e-6);
    }

    #[test]
    fn rank_stays_in_bounds(sparsity in 0.0f64..0.999, m in 1usize..200, n in 1usize..200, align in 1usize..32) {
        let r = rank_from_sparsity(sparsity, m, n, align);
        prop_assert!(r >= 1 && r <= m.min(n));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn parameter_accounting(seed: u64, sparsity in 0.0f64..0.95, method in prop_oneof![Just(Method::Svd), Just(Method::IpsvdDirect), Just(Method::IpsvdEfficient)]) {
        let mut g = rng(seed);
        let model = random_model(&mut g, 12, false);
        let spec = SyntheticSpec {
            features: model.input_dim(),
            classes: model.classes(),
            train_size: 40,
            val_size: 1,
            test_size: 1,
            seed,
            ..SyntheticSpec::default()
        };
        let data = generate(&spec).unwrap().train;
        let mut plan = CompressionPlan::new(method, sparsity);
        plan.exclude_ends = false;
        plan.rank_align = g.gen_range(1..=4);
        let layers = plan.target_layers(&model);
        let stats = collect_probe_stats(&model, &data, &layers).unwrap();
        let (proxy, report) = compress_model(&model, &stats, &plan).unwrap();
        let (mut before, mut after) = (0usize, 0usize);
        for lr in &report.layers {
            let layer = &proxy.layers[lr.layer];
            prop_assert!(layer.is_factored());
            prop_assert_eq!(layer.weight_param_count(), lr.rank * (lr.out_dim + lr.in_dim));
            before += lr.out_dim * lr.in_dim;
            after += lr.rank * (lr.out_dim + lr.in_dim);
        }
        prop_assert!((report.sparsity - (1.0 - after as f64 / before as f64)).abs() <= 1e-12);
        for (a, b) in proxy.layers.iter().zip(&model.layers) {
            prop_assert_eq!(a.bias(), b.bias());
        }
    }
}
