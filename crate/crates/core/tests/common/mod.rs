#![allow(dead_code)]

use influence_proxy::linalg::Matrix;
use influence_proxy::nn::{Activation, Layer, Model};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| normal(rng))
}

pub fn gaussian_vec(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..len).map(|_| normal(rng)).collect()
}

/// Orthonormal `n×n` matrix from modified Gram–Schmidt on gaussian columns.
pub fn orthogonal(n: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    while cols.len() < n {
        let mut v = gaussian_vec(n, rng);
        for c in &cols {
            let p: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= p * b);
        }
        let nrm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nrm > 1e-8 {
            cols.push(v.iter().map(|x| x / nrm).collect());
        }
    }
    Matrix::from_columns(&cols).unwrap()
}

pub fn rel_err(a: &Matrix, b: &Matrix) -> f64 {
    a.sub(b).unwrap().frobenius_norm() / b.frobenius_norm().max(f64::MIN_POSITIVE)
}

/// MLP with random widths in `2..=max_width`; interior layers factored when asked.
pub fn random_model(rng: &mut ChaCha8Rng, max_width: usize, factored: bool) -> Model {
    let depth = rng.gen_range(2..=4);
    let widths: Vec<usize> = (0..=depth).map(|_| rng.gen_range(2..=max_width)).collect();
    let act = if rng.gen_bool(0.5) { Activation::Tanh } else { Activation::Gelu };
    let layers = (0..depth)
        .map(|l| {
            let (out, inp) = (widths[l + 1], widths[l]);
            let bias = (0..out).map(|_| 0.1 * normal(rng)).collect();
            let s = 1.0 / (inp as f64).sqrt();
            if factored && l > 0 && l + 1 < depth {
                let r = rng.gen_range(1..=out.min(inp));
                Layer::factored(gaussian(out, r, rng).scale(s.sqrt()), gaussian(r, inp, rng).scale(s.sqrt()), bias)
                    .unwrap()
            } else {
                Layer::dense(gaussian(out, inp, rng).scale(s), bias).unwrap()
            }
        })
        .collect();
    Model::new(layers, act).unwrap()
}
