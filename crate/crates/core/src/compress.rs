//! Proxy construction: probe statistics, rank allocation and the three
//! factorization routes (plain SVD, curvature-weighted SVD formed directly,
//! and the same weighted SVD assembled from skinny probe SVDs).
//!
//! The weighted route minimizes `‖C_δ^{1/2} (W − Ŵ) C_h^{1/2}‖_F` over rank-`r`
//! matrices `Ŵ`, where `C_h` and `C_δ` are the damped second moments of the
//! layer inputs and upstream gradients seen on the probe set. Errors in
//! directions that carry large activations or large loss sensitivity are
//! penalized more, which is what keeps per-sample gradient inner products
//! (and therefore influence scores) intact.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{regularized_root_diag, svd_rank, svd_thin, sym_root, sym_root_pair, Matrix};
use crate::nn::{Layer, Model};

pub const DEFAULT_DAMPING: f64 = 1e-3;
pub const DEFAULT_RANK_ALIGN: usize = 8;

/// Stacked probe columns for one layer: `H` is `n × N`, `Δ` is `m × N`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerProbe {
    pub layer: usize,
    pub inputs: Matrix,
    pub deltas: Matrix,
}

impl LayerProbe {
    pub fn count(&self) -> usize {
        self.inputs.cols()
    }

    /// `(1/N) H Hᵀ`.
    pub fn input_moment(&self) -> Matrix {
        second_moment(&self.inputs)
    }

    /// `(1/N) Δ Δᵀ`.
    pub fn delta_moment(&self) -> Matrix {
        second_moment(&self.deltas)
    }
}

pub fn second_moment(columns: &Matrix) -> Matrix {
    let mut c = columns.matmul_t(columns).expect("same matrix");
    c.scale_in_place(1.0 / columns.cols() as f64);
    c
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeStats {
    pub layers: Vec<LayerProbe>,
    pub count: usize,
}

impl ProbeStats {
    pub fn layer(&self, index: usize) -> Option<&LayerProbe> {
        self.layers.iter().find(|p| p.layer == index)
    }
}

/// One forward/backward sweep over the probe set, recording `h_{ℓ-1}` and
/// `δ_ℓ` (cross-entropy against the probe labels) for each requested layer.
pub fn collect_probe_stats(model: &Model, probe: &Dataset, layers: &[usize]) -> Result<ProbeStats> {
    if probe.is_empty() {
        return Err(Error::InvalidArgument("probe set is empty".into()));
    }
    if layers.is_empty() {
        return Err(Error::InvalidArgument("no layers to probe".into()));
    }
    if let Some(&bad) = layers.iter().find(|&&l| l >= model.num_layers()) {
        return Err(Error::InvalidArgument(format!("layer {bad} out of range")));
    }
    let n = probe.len();
    let mut h_cols: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(n); layers.len()];
    let mut d_cols: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(n); layers.len()];
    for (x, y) in probe.iter() {
        let mut trace = model.forward(x)?;
        model.backward(&mut trace, y)?;
        for (k, &l) in layers.iter().enumerate() {
            h_cols[k].push(trace.inputs[l].clone());
            d_cols[k].push(trace.deltas[l].clone());
        }
    }
    let layers = layers
        .iter()
        .zip(h_cols.iter().zip(&d_cols))
        .map(|(&layer, (h, d))| {
            let inputs = Matrix::from_columns(h)?;
            let deltas = Matrix::from_columns(d)?;
            if inputs.first_non_finite().is_some() || deltas.first_non_finite().is_some() {
                return Err(Error::NonFiniteLayer {
                    what: "probe statistic",
                    layer,
                });
            }
            Ok(LayerProbe {
                layer,
                inputs,
                deltas,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ProbeStats { layers, count: n })
}

/// Rank whose factorization `r(m+n)` keeps a `1 − ρ` share of `m·n` parameters.
///
/// The raw rank is rounded down to a multiple of `align`; if that is zero the
/// rank is rounded up to `align`, and if even that exceeds `min(m, n)` the
/// unaligned rank is used. The result is clamped to `1..=min(m, n)`.
pub fn rank_from_sparsity(sparsity: f64, m: usize, n: usize, align: usize) -> usize {
    let max = m.min(n).max(1);
    let sparsity = sparsity.clamp(0.0, 1.0);
    let raw = ((1.0 - sparsity) * (m * n) as f64 / (m + n) as f64).floor() as usize;
    let align = align.max(1);
    let down = raw / align * align;
    let r = if down > 0 {
        down
    } else if align <= max {
        align
    } else {
        raw
    };
    r.clamp(1, max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Svd,
    IpsvdDirect,
    IpsvdEfficient,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Svd => "svd",
            Method::IpsvdDirect => "ipsvd_direct",
            Method::IpsvdEfficient => "ipsvd_efficient",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Method> {
        match s.replace('-', "_").as_str() {
            "svd" => Ok(Method::Svd),
            "ipsvd_direct" => Ok(Method::IpsvdDirect),
            "ipsvd_efficient" => Ok(Method::IpsvdEfficient),
            other => Err(Error::InvalidArgument(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompressionPlan {
    pub method: Method,
    /// Fraction of each compressed layer's parameters removed.
    pub sparsity: f64,
    pub damping: f64,
    pub rank_align: usize,
    /// Keep the first and last layers dense.
    pub exclude_ends: bool,
    /// Additional layer indices kept dense.
    pub excluded: Vec<usize>,
    /// Per-layer rank overrides.
    pub ranks: BTreeMap<usize, usize>,
}

impl Default for CompressionPlan {
    fn default() -> Self {
        CompressionPlan {
            method: Method::IpsvdDirect,
            sparsity: 0.5,
            damping: DEFAULT_DAMPING,
            rank_align: DEFAULT_RANK_ALIGN,
            exclude_ends: true,
            excluded: Vec::new(),
            ranks: BTreeMap::new(),
        }
    }
}

impl CompressionPlan {
    pub fn new(method: Method, sparsity: f64) -> Self {
        CompressionPlan {
            method,
            sparsity,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.sparsity) {
            return Err(Error::InvalidArgument(format!(
                "sparsity {} must be in [0, 1)",
                self.sparsity
            )));
        }
        if !(self.damping >= 0.0) {
            return Err(Error::InvalidArgument("damping must be >= 0".into()));
        }
        if self.method == Method::IpsvdEfficient && !(self.damping > 0.0) {
            return Err(Error::InvalidArgument(
                "the probe-space route needs damping > 0".into(),
            ));
        }
        Ok(())
    }

    /// Dense layers of `model` that this plan factorizes.
    pub fn target_layers(&self, model: &Model) -> Vec<usize> {
        let n = model.num_layers();
        (0..n)
            .filter(|&i| !(self.exclude_ends && n >= 3 && (i == 0 || i == n - 1)))
            .filter(|i| !self.excluded.contains(i))
            .filter(|&i| !model.layers[i].is_factored())
            .collect()
    }

    pub fn rank_for(&self, layer: usize, m: usize, n: usize) -> usize {
        self.ranks
            .get(&layer)
            .copied()
            .unwrap_or_else(|| rank_from_sparsity(self.sparsity, m, n, self.rank_align))
    }
}

/// Low-rank pair with `W ≈ A·B`.
#[derive(Debug, Clone, PartialEq)]
pub struct Factors {
    pub a: Matrix,
    pub b: Matrix,
}

impl Factors {
    pub fn product(&self) -> Matrix {
        self.a.matmul(&self.b).expect("factor shapes agree")
    }
}

fn check_rank(r: usize, m: usize, n: usize) -> Result<()> {
    let max = m.min(n);
    if r == 0 || r > max {
        return Err(Error::RankOutOfRange { rank: r, max });
    }
    Ok(())
}

/// Splits `U diag(s) Vᵀ` into `A = U diag(√s)`, `B = diag(√s) Vᵀ`.
fn balanced(u: &Matrix, s: &[f64], v: &Matrix) -> Factors {
    let root: Vec<f64> = s.iter().map(|x| x.sqrt()).collect();
    Factors {
        a: u.scale_cols(&root).expect("rank matches"),
        b: v.scale_cols(&root).expect("rank matches").transpose(),
    }
}

/// Plain Eckart–Young truncation.
pub fn svd_factors(w: &Matrix, r: usize) -> Result<Factors> {
    check_rank(r, w.rows(), w.cols())?;
    let f = svd_rank(w, r)?;
    Ok(balanced(&f.u, &f.s, &f.v))
}

/// Weighted truncation from explicit moment matrices `C_h` (`n×n`) and `C_δ` (`m×m`).
pub fn ipsvd_from_moments(
    w: &Matrix,
    input_moment: &Matrix,
    delta_moment: &Matrix,
    damping: f64,
    r: usize,
) -> Result<Factors> {
    let (m, n) = w.shape();
    check_rank(r, m, n)?;
    if input_moment.shape() != (n, n) {
        return Err(Error::mismatch("input moment", format!("{n}x{n}"), format!("{:?}", input_moment.shape())));
    }
    if delta_moment.shape() != (m, m) {
        return Err(Error::mismatch("delta moment", format!("{m}x{m}"), format!("{:?}", delta_moment.shape())));
    }
    let h = sym_root_pair(input_moment, damping)?;
    let d = sym_root_pair(delta_moment, damping)?;
    let s = d.root.matmul(w)?.matmul(&h.root)?;
    let f = svd_rank(&s, r)?;
    let root: Vec<f64> = f.s.iter().map(|x| x.sqrt()).collect();
    let a = d.inv_root.matmul(&f.u.scale_cols(&root)?)?;
    let b = f.v.scale_cols(&root)?.transpose().matmul(&h.inv_root)?;
    Ok(Factors { a, b })
}

fn check_probes(w: &Matrix, inputs: &Matrix, deltas: &Matrix) -> Result<()> {
    if inputs.rows() != w.cols() || deltas.rows() != w.rows() {
        return Err(Error::mismatch(
            "probe matrices",
            format!("H {}xN, Δ {}xN", w.cols(), w.rows()),
            format!("H {}x{}, Δ {}x{}", inputs.rows(), inputs.cols(), deltas.rows(), deltas.cols()),
        ));
    }
    if inputs.cols() != deltas.cols() || inputs.cols() == 0 {
        return Err(Error::mismatch("probe counts", inputs.cols(), deltas.cols()));
    }
    Ok(())
}

/// Weighted truncation with moments `(1/N) H Hᵀ`, `(1/N) Δ Δᵀ` formed explicitly.
pub fn ipsvd_direct(w: &Matrix, inputs: &Matrix, deltas: &Matrix, damping: f64, r: usize) -> Result<Factors> {
    check_probes(w, inputs, deltas)?;
    ipsvd_from_moments(w, &second_moment(inputs), &second_moment(deltas), damping, r)
}

/// Weighted truncation through the skinny SVDs of `H` and `Δ` and an SVD of
/// the small core `D_Δ (U_Δᵀ W U_H) D_H`; no `m×m` or `n×n` matrix is formed.
pub fn ipsvd_efficient(w: &Matrix, inputs: &Matrix, deltas: &Matrix, damping: f64, r: usize) -> Result<Factors> {
    check_probes(w, inputs, deltas)?;
    let (m, n) = w.shape();
    check_rank(r, m, n)?;
    let count = inputs.cols();
    if r > count {
        return Err(Error::RankOutOfRange { rank: r, max: count });
    }
    if !(damping > 0.0) {
        return Err(Error::InvalidArgument("damping must be > 0".into()));
    }
    let sh = svd_thin(inputs)?;
    let sd = svd_thin(deltas)?;
    let dh = regularized_root_diag(&sh.s, count, damping)?;
    let dd = regularized_root_diag(&sd.s, count, damping)?;
    let core = sd
        .u
        .t_matmul(w)?
        .matmul(&sh.u)?
        .scale_rows(&dd)?
        .scale_cols(&dh)?;
    let f = svd_rank(&core, r)?;
    let root: Vec<f64> = f.s.iter().map(|x| x.sqrt()).collect();
    let inv_dd: Vec<f64> = dd.iter().map(|x| 1.0 / x).collect();
    let inv_dh: Vec<f64> = dh.iter().map(|x| 1.0 / x).collect();
    let a = sd.u.matmul(&f.u.scale_rows(&inv_dd)?.scale_cols(&root)?)?;
    let b = sh
        .u
        .matmul(&f.v.scale_rows(&inv_dh)?.scale_cols(&root)?)?
        .transpose();
    Ok(Factors { a, b })
}

/// `‖C_δλ^{1/2} (W − Ŵ) C_hλ^{1/2}‖_F²` with explicit moment matrices.
pub fn weighted_objective(
    w: &Matrix,
    approx: &Matrix,
    input_moment: &Matrix,
    delta_moment: &Matrix,
    damping: f64,
) -> Result<f64> {
    let e = w.sub(approx)?;
    let rh = sym_root(input_moment, damping)?;
    let rd = sym_root(delta_moment, damping)?;
    Ok(rd.matmul(&e)?.matmul(&rh)?.frobenius_norm().powi(2))
}

/// Weighted error norm from the probe matrices, without forming any moment:
/// `⟨C_δλ E, E C_hλ⟩` with `C E = (1/N) Δ (Δᵀ E) + λ E`.
pub fn weighted_error_from_probes(
    error: &Matrix,
    inputs: &Matrix,
    deltas: &Matrix,
    damping: f64,
) -> Result<f64> {
    let n = inputs.cols() as f64;
    let mut left = deltas.matmul(&deltas.t_matmul(error)?)?;
    left.scale_in_place(1.0 / n);
    left.axpy(damping, error)?;
    let mut right = error.matmul(inputs)?.matmul_t(inputs)?;
    right.scale_in_place(1.0 / n);
    right.axpy(damping, error)?;
    Ok(left.frobenius_dot(&right)?.max(0.0).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: usize,
    pub rank: usize,
    pub out_dim: usize,
    pub in_dim: usize,
    pub frobenius_error: f64,
    /// Curvature-weighted error; absent when the layer had no probe statistics.
    pub weighted_error: Option<f64>,
    pub params_before: usize,
    pub params_after: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub layers: Vec<LayerReport>,
    pub params_before: usize,
    pub params_after: usize,
    /// `1 − Σ r(m+n) / Σ m·n` over compressed layers.
    pub sparsity: f64,
    pub method: Method,
    pub damping: f64,
    pub target_sparsity: f64,
    pub seed: Option<u64>,
}

pub fn factorize(plan: &CompressionPlan, w: &Matrix, probe: Option<&LayerProbe>, r: usize) -> Result<Factors> {
    match plan.method {
        Method::Svd => svd_factors(w, r),
        Method::IpsvdDirect | Method::IpsvdEfficient => {
            let p = probe.ok_or_else(|| {
                Error::InvalidArgument("weighted factorization needs probe statistics".into())
            })?;
            if plan.method == Method::IpsvdDirect {
                ipsvd_direct(w, &p.inputs, &p.deltas, plan.damping, r)
            } else {
                ipsvd_efficient(w, &p.inputs, &p.deltas, plan.damping, r)
            }
        }
    }
}

/// Replaces every targeted dense layer by its rank-`r` factorization.
pub fn compress_model(model: &Model, stats: &ProbeStats, plan: &CompressionPlan) -> Result<(Model, CompressionReport)> {
    plan.validate()?;
    let targets = plan.target_layers(model);
    for &l in &targets {
        if let Some(p) = stats.layer(l) {
            let layer = &model.layers[l];
            if p.inputs.rows() != layer.in_dim() || p.deltas.rows() != layer.out_dim() {
                return Err(Error::mismatch(
                    "probe statistics vs model",
                    format!("layer {l}: {}x{}", layer.out_dim(), layer.in_dim()),
                    format!("{}x{}", p.deltas.rows(), p.inputs.rows()),
                ));
            }
        }
    }

    let results: Vec<(usize, Factors, LayerReport)> = targets
        .par_iter()
        .map(|&l| {
            let Layer::Dense(dense) = &model.layers[l] else {
                unreachable!("targets are dense")
            };
            let w = &dense.weight;
            let (m, n) = w.shape();
            let r = plan.rank_for(l, m, n);
            let probe = stats.layer(l);
            let f = factorize(plan, w, probe, r)?;
            let e = w.sub(&f.product())?;
            let weighted_error = match probe {
                Some(p) => Some(weighted_error_from_probes(&e, &p.inputs, &p.deltas, plan.damping)?),
                None => None,
            };
            let report = LayerReport {
                layer: l,
                rank: r,
                out_dim: m,
                in_dim: n,
                frobenius_error: e.frobenius_norm(),
                weighted_error,
                params_before: m * n,
                params_after: r * (m + n),
            };
            Ok((l, f, report))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut proxy = model.clone();
    let mut layers = Vec::with_capacity(results.len());
    for (l, f, report) in results {
        let bias = model.layers[l].bias().to_vec();
        proxy.layers[l] = Layer::factored(f.a, f.b, bias)?;
        layers.push(report);
    }
    let params_before: usize = layers.iter().map(|r| r.params_before).sum();
    let params_after: usize = layers.iter().map(|r| r.params_after).sum();
    let sparsity = if params_before == 0 {
        0.0
    } else {
        1.0 - params_after as f64 / params_before as f64
    };
    Ok((
        proxy,
        CompressionReport {
            layers,
            params_before,
            params_after,
            sparsity,
            method: plan.method,
            damping: plan.damping,
            target_sparsity: plan.sparsity,
            seed: None,
        },
    ))
}
