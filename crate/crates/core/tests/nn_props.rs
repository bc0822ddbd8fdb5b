mod common;

use common::{gaussian_vec, random_model, rel_err, rng};
use influence_proxy::linalg::Matrix;
use influence_proxy::nn::{cross_entropy, kl_temperature, kl_temperature_grad, softmax, Layer, Model};
use proptest::prelude::*;
use rand::Rng;

fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut p = x.to_vec();
            p[i] += h;
            let up = f(&p);
            p[i] -= 2.0 * h;
            (up - f(&p)) / (2.0 * h)
        })
        .collect()
}

fn vec_rel(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-12)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dense_gradient_is_outer_product(seed: u64) {
        let mut g = rng(seed);
        let model = random_model(&mut g, 8, false);
        let x = gaussian_vec(model.input_dim(), &mut g);
        let y = g.gen_range(0..model.classes());
        let mut t = model.forward(&x).unwrap();
        let grad = model.backward(&mut t, y).unwrap();
        for l in 0..model.num_layers() {
            let gw = grad.weight(l).unwrap();
            let outer = Matrix::outer(&t.deltas[l], &t.inputs[l]);
            prop_assert!(gw.sub(&outer).unwrap().frobenius_norm() <= 1e-10 * (1.0 + gw.frobenius_norm()));
        }
    }

    #[test]
    fn factored_gradients_are_projected_dense_gradients(seed: u64) {
        let mut g = rng(seed);
        let model = random_model(&mut g, 8, true);
        let dense = Model::new(
            model.layers.iter().map(|l| Layer::dense(l.effective_weight(), l.bias().to_vec()).unwrap()).collect(),
            model.activation,
        )
        .unwrap();
        let x = gaussian_vec(model.input_dim(), &mut g);
        let y = g.gen_range(0..model.classes());
        let gf = model.backward(&mut model.forward(&x).unwrap(), y).unwrap();
        let gd = dense.backward(&mut dense.forward(&x).unwrap(), y).unwrap();
        for l in model.factored_layers() {
            let Layer::Factored(f) = &model.layers[l] else { unreachable!() };
            let gw = gd.weight(l).unwrap();
            let (ga, gb) = gf.factors(l).unwrap();
            prop_assert!(ga.sub(&gw.matmul_t(&f.b).unwrap()).unwrap().frobenius_norm() <= 1e-10 * (1.0 + ga.frobenius_norm()));
            prop_assert!(gb.sub(&f.a.t_matmul(gw).unwrap()).unwrap().frobenius_norm() <= 1e-10 * (1.0 + gb.frobenius_norm()));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn loss_gradients_match_finite_differences(classes in 2usize..10, tau in 0.5f64..4.0, seed: u64) {
        let mut g = rng(seed);
        let z = gaussian_vec(classes, &mut g);
        let teacher = gaussian_vec(classes, &mut g);
        let y = g.gen_range(0..classes);

        let mut analytic = softmax(&z);
        analytic[y] -= 1.0;
        let fd = central_diff(|v| cross_entropy(v, y).unwrap(), &z, 1e-6);
        prop_assert!(vec_rel(&analytic, &fd) <= 1e-4);

        let analytic = kl_temperature_grad(&teacher, &z, tau).unwrap();
        let fd = central_diff(|v| kl_temperature(&teacher, v, tau).unwrap(), &z, 1e-6);
        prop_assert!(vec_rel(&analytic, &fd) <= 1e-4);
    }

    #[test]
    fn large_logits_stay_finite(classes in 2usize..10, seed: u64) {
        let mut g = rng(seed);
        let z: Vec<f64> = gaussian_vec(classes, &mut g).iter().map(|v| 1e3 * v.signum() * v.abs().min(1.0)).collect();
        let t: Vec<f64> = gaussian_vec(classes, &mut g).iter().map(|v| 1e3 * v.signum() * v.abs().min(1.0)).collect();
        let p = softmax(&z);
        prop_assert!(p.iter().all(|v| v.is_finite()) && (p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(cross_entropy(&z, 0).unwrap().is_finite());
        let kl = kl_temperature(&t, &z, 1.0).unwrap();
        prop_assert!(kl.is_finite() && kl >= 0.0);
    }

    #[test]
    fn model_json_round_trip(seed: u64) {
        let model = random_model(&mut rng(seed), 6, true);
        let back = Model::from_json(&model.to_json().unwrap()).unwrap();
        prop_assert_eq!(&back, &model);
        for (a, b) in back.layers.iter().zip(&model.layers) {
            prop_assert!(rel_err(&a.effective_weight(), &b.effective_weight()) == 0.0);
        }
    }
}
