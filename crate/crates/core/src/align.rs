//! Gradient alignment of a factored proxy against its dense target.
//!
//! For each factored layer the chain rule gives what the factor gradients
//! would be if the proxy reproduced the target exactly: `∇A = ∇W Bᵀ` and
//! `∇B = Aᵀ ∇W`. The alignment loss is the mean cosine distance between the
//! proxy's actual batch-mean factor gradients and those projections, plus a
//! temperature-scaled KL term that keeps the proxy's outputs near the
//! target's.
//!
//! The loss depends on the proxy's gradients, so its own gradient needs a
//! Hessian-vector product. That product is taken by central differences of
//! first-order batch gradients along the analytic outer derivative.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{permutation, Dataset};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::{kl_temperature, kl_temperature_grad, Gradient, Layer, Model, ParamScope, Sgd, SgdConfig};
use crate::seed::derive_seed;

/// One `(x, label)` pair borrowed from a dataset.
pub type Sample<'a> = (&'a [f64], usize);

const MAX_EPS_HALVINGS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lambda_kl: f64,
    pub tau: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Initial finite-difference step of the Hessian-vector product.
    pub hvp_eps: f64,
    pub seed: u64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            lr: 0.005,
            momentum: 0.0,
            weight_decay: 0.01,
            lambda_kl: 0.1,
            tau: 1.0,
            epochs: 2,
            batch_size: 4,
            hvp_eps: 1e-4,
            seed: 0,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad("align learning rate must be finite and nonnegative");
        }
        if !(self.lambda_kl.is_finite() && self.lambda_kl >= 0.0) {
            return bad("lambda_kl must be finite and nonnegative");
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return bad("tau must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.hvp_eps.is_finite() && self.hvp_eps > 0.0) {
            return bad("hvp eps must be positive");
        }
        Ok(())
    }

    fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub l_ga: f64,
    pub l_kl: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerAlignment {
    pub layer: usize,
    /// Cosine between `∇A` and `∇W Bᵀ`.
    pub cos_a: f64,
    /// Cosine between `∇B` and `Aᵀ ∇W`.
    pub cos_b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignSummary {
    pub epochs: usize,
    pub steps: usize,
    pub first_epoch_median_l_ga: Option<f64>,
    pub final_epoch_median_l_ga: Option<f64>,
    pub initial_layers: Vec<LayerAlignment>,
    pub final_layers: Vec<LayerAlignment>,
    pub zero_norm_terms: usize,
    pub eps_halvings: usize,
    pub config: AlignConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignReport {
    pub steps: Vec<StepRecord>,
    pub summary: AlignSummary,
}

impl AlignReport {
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for s in &self.steps {
            serde_json::to_writer(&mut out, s).map_err(|e| Error::format(path, e))?;
            out.push(b'\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn write_summary(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(&mut f, &self.summary).map_err(|e| Error::format(path, e))?;
        f.write_all(b"\n").map_err(|e| Error::io(path, e))
    }
}

/// Cosine distance `1 − ⟨X,Y⟩/(‖X‖‖Y‖)` and its partials.
struct Distance {
    value: f64,
    dx: Matrix,
    dy: Matrix,
    degenerate: bool,
}

fn cosine_distance(x: &Matrix, y: &Matrix) -> Distance {
    let nx = x.frobenius_norm();
    let ny = y.frobenius_norm();
    if nx == 0.0 || ny == 0.0 {
        return Distance {
            value: 1.0,
            dx: Matrix::zeros(x.rows(), x.cols()),
            dy: Matrix::zeros(y.rows(), y.cols()),
            degenerate: true,
        };
    }
    let ip = x.frobenius_dot(y).expect("same shape");
    let c = ip / (nx * ny);
    let mut dx = x.scale(c / (nx * nx));
    dx.axpy(-1.0 / (nx * ny), y).expect("same shape");
    let mut dy = y.scale(c / (ny * ny));
    dy.axpy(-1.0 / (nx * ny), x).expect("same shape");
    Distance {
        value: (1.0 - c).clamp(0.0, 2.0),
        dx,
        dy,
        degenerate: false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaLoss {
    pub value: f64,
    /// Distance terms replaced by 1 because an argument had zero norm.
    pub zero_norm_terms: usize,
}

struct GaParts {
    loss: GaLoss,
    /// `∂L_GA/∂(∇A, ∇B)` per layer.
    outer: Vec<(Matrix, Matrix)>,
    /// `∂L_GA/∂(A, B)` through the projected targets only.
    direct: Vec<(Matrix, Matrix)>,
    cosines: Vec<(f64, f64)>,
}

fn ga_parts(target_grads: &[Matrix], proxy_grads: &[(Matrix, Matrix)], factors: &[(Matrix, Matrix)]) -> Result<GaParts> {
    let n = target_grads.len();
    if n == 0 || proxy_grads.len() != n || factors.len() != n {
        return Err(Error::mismatch(
            "alignment layers",
            n,
            format!("{} proxy gradients, {} factor pairs", proxy_grads.len(), factors.len()),
        ));
    }
    let scale = 1.0 / n as f64;
    let mut value = 0.0;
    let mut zero_norm_terms = 0;
    let mut outer = Vec::with_capacity(n);
    let mut direct = Vec::with_capacity(n);
    let mut cosines = Vec::with_capacity(n);
    for ((g, (ga, gb)), (a, b)) in target_grads.iter().zip(proxy_grads).zip(factors) {
        let proj_a = g.matmul_t(b)?;
        let proj_b = a.t_matmul(g)?;
        if proj_a.shape() != ga.shape() || proj_b.shape() != gb.shape() {
            return Err(Error::mismatch(
                "factor gradient",
                format!("{:?} and {:?}", proj_a.shape(), proj_b.shape()),
                format!("{:?} and {:?}", ga.shape(), gb.shape()),
            ));
        }
        let da = cosine_distance(ga, &proj_a);
        let db = cosine_distance(gb, &proj_b);
        value += scale * (da.value + db.value);
        zero_norm_terms += usize::from(da.degenerate) + usize::from(db.degenerate);
        cosines.push((1.0 - da.value, 1.0 - db.value));
        // proj_a = G Bᵀ feeds B; proj_b = Aᵀ G feeds A.
        let direct_b = da.dy.t_matmul(g)?.scale(scale);
        let direct_a = g.matmul_t(&db.dy)?.scale(scale);
        outer.push((da.dx.scale(scale), db.dx.scale(scale)));
        direct.push((direct_a, direct_b));
    }
    Ok(GaParts {
        loss: GaLoss { value, zero_norm_terms },
        outer,
        direct,
        cosines,
    })
}

/// Cosine distances between proxy factor gradients and the target gradients
/// projected through the factors, summed per layer and averaged over layers.
/// Each layer contributes two terms, so the value lies in `[0, 4]`.
pub fn ga_loss(target_grads: &[Matrix], proxy_grads: &[(Matrix, Matrix)], factors: &[(Matrix, Matrix)]) -> Result<GaLoss> {
    Ok(ga_parts(target_grads, proxy_grads, factors)?.loss)
}

fn check_pair(proxy: &Model, target: &Model) -> Result<Vec<usize>> {
    if proxy.num_layers() != target.num_layers() {
        return Err(Error::mismatch("proxy layers", target.num_layers(), proxy.num_layers()));
    }
    for (l, (p, t)) in proxy.layers.iter().zip(&target.layers).enumerate() {
        if p.in_dim() != t.in_dim() || p.out_dim() != t.out_dim() {
            return Err(Error::mismatch(
                "proxy layer shape",
                format!("layer {l}: {}x{}", t.out_dim(), t.in_dim()),
                format!("{}x{}", p.out_dim(), p.in_dim()),
            ));
        }
    }
    let layers = proxy.factored_layers();
    if layers.is_empty() {
        return Err(Error::InvalidArgument("proxy has no factored layers to align".into()));
    }
    if let Some(&l) = layers.iter().find(|&&l| target.layers[l].is_factored()) {
        return Err(Error::InvalidArgument(format!("target layer {l} is not dense")));
    }
    Ok(layers)
}

fn target_weight_grads(target: &Model, batch: &[Sample], layers: &[usize]) -> Result<Vec<Matrix>> {
    let (_, g) = target.batch_loss_and_gradient(batch.iter().copied())?;
    Ok(layers
        .iter()
        .map(|&l| g.weight(l).expect("dense target layer").clone())
        .collect())
}

fn factor_grads(g: &Gradient, layers: &[usize]) -> Vec<(Matrix, Matrix)> {
    layers
        .iter()
        .map(|&l| {
            let (a, b) = g.factors(l).expect("factored proxy layer");
            (a.clone(), b.clone())
        })
        .collect()
}

fn factors_of(proxy: &Model, layers: &[usize]) -> Vec<(Matrix, Matrix)> {
    layers
        .iter()
        .map(|&l| match &proxy.layers[l] {
            Layer::Factored(f) => (f.a.clone(), f.b.clone()),
            Layer::Dense(_) => unreachable!("checked factored"),
        })
        .collect()
}

/// `L_KL` averaged over the batch, and optionally its gradient over the factors.
fn kl_term(proxy: &Model, target: &Model, batch: &[Sample], tau: f64, want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
    let inv = 1.0 / batch.len() as f64;
    let mut value = 0.0;
    let mut grad = want_grad.then(|| Gradient::zeros_like(proxy));
    for &(x, _) in batch {
        let t = target.logits(x)?;
        let mut trace = proxy.forward(x)?;
        value += inv * kl_temperature(&t, &trace.logits, tau)?;
        if let Some(acc) = grad.as_mut() {
            let d = kl_temperature_grad(&t, &trace.logits, tau)?;
            let g = proxy.backward_from(&mut trace, d)?;
            acc.add_scaled(inv, &g);
        }
    }
    Ok((value, grad.map(|g| g.flat(ParamScope::Factors))))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub l_ga: f64,
    pub l_kl: f64,
    pub total: f64,
    pub zero_norm_terms: usize,
}

/// Scalar alignment objective `L_GA + λ_KL · L_KL` on one batch.
pub fn objective(proxy: &Model, target: &Model, batch: &[Sample], config: &AlignConfig) -> Result<Objective> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty alignment batch".into()));
    }
    let layers = check_pair(proxy, target)?;
    let tg = target_weight_grads(target, batch, &layers)?;
    let (_, pg) = proxy.batch_loss_and_gradient(batch.iter().copied())?;
    let ga = ga_loss(&tg, &factor_grads(&pg, &layers), &factors_of(proxy, &layers))?;
    let (l_kl, _) = kl_term(proxy, target, batch, config.tau, false)?;
    Ok(Objective {
        l_ga: ga.value,
        l_kl,
        total: ga.value + config.lambda_kl * l_kl,
        zero_norm_terms: ga.zero_norm_terms,
    })
}

fn flatten_pairs(pairs: &[(Matrix, Matrix)]) -> Vec<f64> {
    pairs
        .iter()
        .flat_map(|(a, b)| a.as_slice().iter().chain(b.as_slice()).copied())
        .collect()
}

fn batch_factor_gradient(model: &Model, batch: &[Sample]) -> Option<Vec<f64>> {
    let (_, g) = model.batch_loss_and_gradient(batch.iter().copied()).ok()?;
    let flat = g.flat(ParamScope::Factors);
    flat.iter().all(|v| v.is_finite()).then_some(flat)
}

/// Hessian of the proxy batch loss (over the factors) applied to `u`.
fn hvp(proxy: &Model, batch: &[Sample], u: &[f64], eps: f64) -> Result<(Vec<f64>, usize)> {
    let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Ok((vec![0.0; u.len()], 0));
    }
    let theta = proxy.flat_params(ParamScope::Factors);
    let mut eps = eps;
    for halvings in 0..=MAX_EPS_HALVINGS {
        let shifted = |sign: f64| -> Result<Option<Vec<f64>>> {
            let mut m = proxy.clone();
            let p: Vec<f64> = theta.iter().zip(u).map(|(t, d)| t + sign * eps * d / norm).collect();
            m.set_flat_params(ParamScope::Factors, &p)?;
            Ok(batch_factor_gradient(&m, batch))
        };
        if let (Some(gp), Some(gm)) = (shifted(1.0)?, shifted(-1.0)?) {
            let hv: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| norm * (a - b) / (2.0 * eps)).collect();
            if hv.iter().all(|v| v.is_finite()) {
                return Ok((hv, halvings));
            }
        }
        log::warn!("non-finite Hessian-vector product at eps {eps:e}, halving");
        eps /= 2.0;
    }
    Err(Error::NonFiniteGradient { index: 0 })
}

/// The objective together with its gradient over the proxy factors, in
/// [`ParamScope::Factors`] order.
pub fn objective_gradient(
    proxy: &Model,
    target: &Model,
    batch: &[Sample],
    config: &AlignConfig,
) -> Result<(Objective, Vec<f64>)> {
    let (obj, grad, _) = objective_gradient_full(proxy, target, batch, config)?;
    Ok((obj, grad))
}

fn objective_gradient_full(
    proxy: &Model,
    target: &Model,
    batch: &[Sample],
    config: &AlignConfig,
) -> Result<(Objective, Vec<f64>, usize)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty alignment batch".into()));
    }
    let layers = check_pair(proxy, target)?;
    let tg = target_weight_grads(target, batch, &layers)?;
    let (_, pg) = proxy.batch_loss_and_gradient(batch.iter().copied())?;
    let parts = ga_parts(&tg, &factor_grads(&pg, &layers), &factors_of(proxy, &layers))?;
    let u = flatten_pairs(&parts.outer);
    let (mut grad, halvings) = hvp(proxy, batch, &u, config.hvp_eps)?;
    for (g, d) in grad.iter_mut().zip(flatten_pairs(&parts.direct)) {
        *g += d;
    }
    let (l_kl, kl_grad) = kl_term(proxy, target, batch, config.tau, config.lambda_kl != 0.0)?;
    if let Some(kg) = kl_grad {
        for (g, k) in grad.iter_mut().zip(kg) {
            *g += config.lambda_kl * k;
        }
    }
    let obj = Objective {
        l_ga: parts.loss.value,
        l_kl,
        total: parts.loss.value + config.lambda_kl * l_kl,
        zero_norm_terms: parts.loss.zero_norm_terms,
    };
    Ok((obj, grad, halvings))
}

/// One optimizer step on the factors of `proxy`.
pub fn align_step(
    proxy: &mut Model,
    target: &Model,
    batch: &[Sample],
    config: &AlignConfig,
    opt: &mut Sgd,
    step: usize,
) -> Result<StepRecord> {
    let (rec, _, _) = step_inner(proxy, target, batch, config, opt, step)?;
    Ok(rec)
}

fn step_inner(
    proxy: &mut Model,
    target: &Model,
    batch: &[Sample],
    config: &AlignConfig,
    opt: &mut Sgd,
    step: usize,
) -> Result<(StepRecord, usize, usize)> {
    let (obj, grad, halvings) = objective_gradient_full(proxy, target, batch, config)?;
    if !obj.total.is_finite() {
        return Err(Error::InvalidArgument(format!("non-finite alignment loss at step {step}")));
    }
    let mut theta = proxy.flat_params(ParamScope::Factors);
    opt.step(&mut theta, &grad)?;
    proxy.set_flat_params(ParamScope::Factors, &theta)?;
    let rec = StepRecord {
        step,
        l_ga: obj.l_ga,
        l_kl: obj.l_kl,
        total: obj.total,
    };
    Ok((rec, obj.zero_norm_terms, halvings))
}

/// Per-layer cosines between proxy factor gradients and projected target
/// gradients, using mean gradients over `data`.
pub fn layer_alignment(proxy: &Model, target: &Model, data: &Dataset) -> Result<Vec<LayerAlignment>> {
    let layers = check_pair(proxy, target)?;
    let batch: Vec<Sample> = data.iter().collect();
    let tg = target_weight_grads(target, &batch, &layers)?;
    let (_, pg) = proxy.batch_loss_and_gradient(batch.iter().copied())?;
    let parts = ga_parts(&tg, &factor_grads(&pg, &layers), &factors_of(proxy, &layers))?;
    Ok(layers
        .iter()
        .zip(parts.cosines)
        .map(|(&layer, (cos_a, cos_b))| LayerAlignment { layer, cos_a, cos_b })
        .collect())
}

fn median(v: &mut [f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Runs `config.epochs` passes of [`align_step`] over shuffled batches of `data`.
pub fn align(proxy: &Model, target: &Model, data: &Dataset, config: &AlignConfig) -> Result<(Model, AlignReport)> {
    config.validate()?;
    check_pair(proxy, target)?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("alignment set is empty".into()));
    }
    let initial_layers = layer_alignment(proxy, target, data)?;
    let mut model = proxy.clone();
    let mut opt = Sgd::new(config.sgd());
    let mut steps = Vec::new();
    let mut epoch_ga: Vec<Vec<f64>> = Vec::new();
    let (mut zero_norm_terms, mut eps_halvings) = (0, 0);
    for epoch in 0..config.epochs {
        let order = permutation(data.len(), derive_seed(config.seed, &format!("align-epoch-{epoch}")));
        let mut ga = Vec::new();
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Sample> = chunk.iter().map(|&i| data.sample(i)).collect();
            let (rec, z, h) = step_inner(&mut model, target, &batch, config, &mut opt, steps.len())?;
            zero_norm_terms += z;
            eps_halvings += h;
            ga.push(rec.l_ga);
            steps.push(rec);
        }
        log::info!(
            "align epoch {}: median L_GA {:.4}",
            epoch + 1,
            median(&mut ga.clone()).unwrap_or(f64::NAN)
        );
        epoch_ga.push(ga);
    }
    if zero_norm_terms > 0 {
        log::warn!("{zero_norm_terms} alignment terms had a zero-norm gradient");
    }
    let final_layers = layer_alignment(&model, target, data)?;
    let summary = AlignSummary {
        epochs: config.epochs,
        steps: steps.len(),
        first_epoch_median_l_ga: epoch_ga.first_mut().and_then(|v| median(v)),
        final_epoch_median_l_ga: epoch_ga.last_mut().and_then(|v| median(v)),
        initial_layers,
        final_layers,
        zero_norm_terms,
        eps_halvings,
        config: config.clone(),
    };
    Ok((model, AlignReport { steps, summary }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[Vec<f64>]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn cosine_distance_extremes() {
        let x = m(&[vec![1.0, 2.0], vec![0.0, -1.0]]);
        assert!(cosine_distance(&x, &x.scale(3.0)).value.abs() < 1e-15);
        assert!((cosine_distance(&x, &x.scale(-1.0)).value - 2.0).abs() < 1e-15);
        let z = cosine_distance(&x, &Matrix::zeros(2, 2));
        assert!(z.degenerate && z.value == 1.0);
    }

    #[test]
    fn ga_loss_exact_and_negated() {
        let g = m(&[vec![0.5, -1.0, 2.0], vec![1.0, 0.0, 0.25]]);
        let a = m(&[vec![1.0], vec![-0.5]]);
        let b = m(&[vec![0.3, 0.2, -1.0]]);
        let exact = (g.matmul_t(&b).unwrap(), a.t_matmul(&g).unwrap());
        let neg = (exact.0.scale(-1.0), exact.1.scale(-1.0));
        let f = [(a, b)];
        let l0 = ga_loss(std::slice::from_ref(&g), &[exact], &f).unwrap();
        assert!(l0.value.abs() < 1e-12);
        // two distance terms per layer, each at its maximum of 2
        let l4 = ga_loss(&[g], &[neg], &f).unwrap();
        assert!((l4.value - 4.0).abs() < 1e-12);
    }

    #[test]
    fn distance_partials_match_differences() {
        let x = m(&[vec![0.3, -1.2], vec![0.7, 0.1]]);
        let y = m(&[vec![1.0, 0.4], vec![-0.2, 0.9]]);
        let d = cosine_distance(&x, &y);
        let h = 1e-6;
        for k in 0..4 {
            let mut xp = x.clone();
            xp.as_mut_slice()[k] += h;
            let mut xm = x.clone();
            xm.as_mut_slice()[k] -= h;
            let fd = (cosine_distance(&xp, &y).value - cosine_distance(&xm, &y).value) / (2.0 * h);
            assert!((fd - d.dx.as_slice()[k]).abs() < 1e-8);
            let mut yp = y.clone();
            yp.as_mut_slice()[k] += h;
            let mut ym = y.clone();
            ym.as_mut_slice()[k] -= h;
            let fd = (cosine_distance(&x, &yp).value - cosine_distance(&x, &ym).value) / (2.0 * h);
            assert!((fd - d.dy.as_slice()[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn config_json_round_trip() {
        let c = AlignConfig::default();
        assert_eq!(c.lambda_kl, 0.1);
        assert_eq!(c.tau, 1.0);
        assert_eq!(c.batch_size, 4);
        assert_eq!(c.weight_decay, 0.01);
        assert_eq!(c.hvp_eps, 1e-4);
        let back: AlignConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&mut []), None);
    }
}
