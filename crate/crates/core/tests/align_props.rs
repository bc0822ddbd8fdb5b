mod common;

use common::{random_model, rng};
use influence_proxy::align::{objective, AlignConfig};
use influence_proxy::data::{generate, SyntheticSpec};
use influence_proxy::nn::{Layer, Model, ParamScope};
use proptest::prelude::*;
use rand::Rng;

fn dense_twin(model: &Model) -> Model {
    Model::new(
        model.layers.iter().map(|l| Layer::dense(l.effective_weight(), l.bias().to_vec()).unwrap()).collect(),
        model.activation,
    )
    .unwrap()
}

fn batch_data(model: &Model, seed: u64, size: usize) -> influence_proxy::data::Dataset {
    let spec = SyntheticSpec {
        features: model.input_dim(),
        classes: model.classes(),
        train_size: size,
        val_size: 1,
        test_size: 1,
        seed,
        ..SyntheticSpec::default()
    };
    generate(&spec).unwrap().train
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn exact_factorization_has_zero_alignment_loss(seed: u64, size in 1usize..8) {
        let mut g = rng(seed);
        let proxy = random_model(&mut g, 8, true);
        prop_assume!(!proxy.factored_layers().is_empty());
        let target = dense_twin(&proxy);
        let data = batch_data(&proxy, seed, size);
        let batch: Vec<_> = data.iter().collect();
        let o = objective(&proxy, &target, &batch, &AlignConfig::default()).unwrap();
        prop_assert!(o.l_ga.abs() <= 1e-10, "{}", o.l_ga);
        prop_assert!(o.l_kl >= 0.0 && o.l_kl <= 1e-12);
    }

    #[test]
    fn losses_stay_in_range(seed: u64, size in 1usize..8, noise in 0.0f64..2.0, tau in 0.5f64..4.0) {
        let mut g = rng(seed);
        let mut proxy = random_model(&mut g, 8, true);
        prop_assume!(!proxy.factored_layers().is_empty());
        let target = dense_twin(&proxy);
        let mut th = proxy.flat_params(ParamScope::Factors);
        th.iter_mut().for_each(|v| *v += noise * (g.gen::<f64>() - 0.5));
        proxy.set_flat_params(ParamScope::Factors, &th).unwrap();
        let data = batch_data(&proxy, seed, size);
        let batch: Vec<_> = data.iter().collect();
        let cfg = AlignConfig { tau, ..AlignConfig::default() };
        let o = objective(&proxy, &target, &batch, &cfg).unwrap();
        prop_assert!((0.0..=4.0).contains(&o.l_ga), "{}", o.l_ga);
        prop_assert!(o.l_kl >= 0.0);
        prop_assert!((o.total - (o.l_ga + cfg.lambda_kl * o.l_kl)).abs() <= 1e-12 * (1.0 + o.total));
    }
}
