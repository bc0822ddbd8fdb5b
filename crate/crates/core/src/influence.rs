//! Gradient-based influence estimators.
//!
//! Every trainable weight matrix in a scored layer has a rank-one per-sample
//! gradient `out · inᵀ`: `δ hᵀ` for a dense layer, `δ (B h)ᵀ` and
//! `(Aᵀ δ) hᵀ` for the two factors of a factored layer. Scores are therefore
//! computed from the pair of vectors rather than the materialized gradient,
//! and factored layers are scored in their own parameter space.
//!
//! All scores are oriented so that larger means more beneficial: a positive
//! score predicts that training on the sample lowers validation loss.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{dot, sym_root_pair, Matrix};
use crate::nn::{Layer, Model, Trace};

pub const DEFAULT_KFAC_SAMPLES: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    /// Cosine between the sample gradient and the mean validation gradient.
    TracinCos,
    /// Plain inner product with the mean validation gradient.
    TracinInner,
    /// Inner product preconditioned by the inverse K-FAC curvature.
    IfKfac,
}

impl Estimator {
    pub fn name(self) -> &'static str {
        match self {
            Estimator::TracinCos => "tracin-cos",
            Estimator::TracinInner => "tracin-inner",
            Estimator::IfKfac => "if-kfac",
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Estimator> {
        match s.replace('_', "-").as_str() {
            "tracin-cos" | "tracin" => Ok(Estimator::TracinCos),
            "tracin-inner" => Ok(Estimator::TracinInner),
            "if-kfac" | "if" => Ok(Estimator::IfKfac),
            other => Err(Error::InvalidArgument(format!("unknown estimator {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceScores {
    /// Training sample ids, aligned with `scores`.
    pub ids: Vec<usize>,
    pub scores: Vec<f64>,
    pub estimator: Estimator,
    pub model_id: String,
    pub seed: u64,
    /// Samples whose gradient (or the reference gradient) had zero norm.
    pub zero_gradient_warnings: usize,
}

impl InfluenceScores {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Positions sorted by descending score, ties by ascending position.
    pub fn ranking(&self) -> Vec<usize> {
        descending_order(&self.scores)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let order = self.ranking();
        let mut rank = vec![0usize; order.len()];
        for (r, &p) in order.iter().enumerate() {
            rank[p] = r + 1;
        }
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e))?;
        w.write_record(["index", "score", "rank", "estimator", "model_id", "seed"])
            .map_err(|e| Error::format(path, e))?;
        for i in 0..self.len() {
            w.write_record([
                self.ids[i].to_string(),
                self.scores[i].to_string(),
                rank[i].to_string(),
                self.estimator.name().to_string(),
                self.model_id.clone(),
                self.seed.to_string(),
            ])
            .map_err(|e| Error::format(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<InfluenceScores> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e))?;
        let (mut ids, mut scores) = (Vec::new(), Vec::new());
        let mut meta: Option<(Estimator, String, u64)> = None;
        for (line, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| Error::format(path, e))?;
            let bad = |what: &str| Error::format(path, format!("row {}: bad {what}", line + 1));
            if rec.len() != 6 {
                return Err(bad("column count"));
            }
            ids.push(rec[0].parse().map_err(|_| bad("index"))?);
            scores.push(rec[1].parse::<f64>().map_err(|_| bad("score"))?);
            if meta.is_none() {
                meta = Some((
                    rec[3].parse().map_err(|_| bad("estimator"))?,
                    rec[4].to_string(),
                    rec[5].parse().map_err(|_| bad("seed"))?,
                ));
            }
        }
        let (estimator, model_id, seed) = meta.ok_or_else(|| Error::format(path, "no scores"))?;
        Ok(InfluenceScores {
            ids,
            scores,
            estimator,
            model_id,
            seed,
            zero_gradient_warnings: 0,
        })
    }
}

/// Indices sorted by descending value, ties broken by ascending index.
pub fn descending_order(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order
}

/// Short content hash of a model's serialized form.
pub fn model_id(model: &Model) -> String {
    let json = model.to_json().unwrap_or_default();
    let digest = Sha256::digest(json.as_bytes());
    hex::encode(&digest[..8])
}

/// `⟨δ, δ'⟩ · ⟨h, h'⟩ = ⟨δ hᵀ, δ' h'ᵀ⟩_F`.
pub fn tracin_layer(delta: &[f64], h: &[f64], delta2: &[f64], h2: &[f64]) -> f64 {
    dot(delta, delta2) * dot(h, h2)
}

/// One rank-one gradient block `out · inᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBlock {
    pub out: Vec<f64>,
    pub inp: Vec<f64>,
}

impl GradBlock {
    pub fn gradient(&self) -> Matrix {
        Matrix::outer(&self.out, &self.inp)
    }

    pub fn norm_sq(&self) -> f64 {
        dot(&self.out, &self.out) * dot(&self.inp, &self.inp)
    }

    /// `outᵀ M inp = ⟨out · inᵀ, M⟩_F`.
    pub fn pair(&self, m: &Matrix) -> f64 {
        let mut acc = 0.0;
        for (i, &o) in self.out.iter().enumerate() {
            acc += o * dot(m.row(i), &self.inp);
        }
        acc
    }
}

/// Rank-one weight-gradient blocks of the requested layers from a completed trace.
pub fn gradient_blocks(model: &Model, trace: &Trace, layers: &[usize]) -> Vec<GradBlock> {
    let mut blocks = Vec::with_capacity(layers.len() * 2);
    for &l in layers {
        let delta = &trace.deltas[l];
        let h = &trace.inputs[l];
        match &model.layers[l] {
            Layer::Dense(_) => blocks.push(GradBlock {
                out: delta.clone(),
                inp: h.clone(),
            }),
            Layer::Factored(f) => {
                let code = trace.codes[l].clone().expect("factored trace has code");
                blocks.push(GradBlock {
                    out: delta.clone(),
                    inp: code,
                });
                blocks.push(GradBlock {
                    out: f.a.t_matvec(delta).expect("validated shapes"),
                    inp: h.clone(),
                });
            }
        }
    }
    blocks
}

pub fn sample_blocks(model: &Model, x: &[f64], label: usize, layers: &[usize]) -> Result<Vec<GradBlock>> {
    let mut trace = model.forward(x)?;
    model.backward(&mut trace, label)?;
    Ok(gradient_blocks(model, &trace, layers))
}

fn check_layers(model: &Model, layers: &[usize]) -> Result<()> {
    if layers.is_empty() {
        return Err(Error::InvalidArgument("no layers selected for scoring".into()));
    }
    match layers.iter().find(|&&l| l >= model.num_layers()) {
        Some(&l) => Err(Error::InvalidArgument(format!("layer {l} out of range"))),
        None => Ok(()),
    }
}

/// Mean gradient per block over a dataset, accumulated in sample order.
pub fn mean_block_gradients(model: &Model, data: &Dataset, layers: &[usize]) -> Result<Vec<Matrix>> {
    check_layers(model, layers)?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("reference set is empty".into()));
    }
    let mut acc: Option<Vec<Matrix>> = None;
    for (x, y) in data.iter() {
        let blocks = sample_blocks(model, x, y, layers)?;
        match acc.as_mut() {
            None => acc = Some(blocks.iter().map(GradBlock::gradient).collect()),
            Some(sum) => {
                for (s, b) in sum.iter_mut().zip(&blocks) {
                    let data = s.as_mut_slice();
                    let n = b.inp.len();
                    for (i, &o) in b.out.iter().enumerate() {
                        for (j, &v) in b.inp.iter().enumerate() {
                            data[i * n + j] += o * v;
                        }
                    }
                }
            }
        }
    }
    let mut sum = acc.expect("nonempty");
    let inv = 1.0 / data.len() as f64;
    sum.iter_mut().for_each(|m| m.scale_in_place(inv));
    Ok(sum)
}

/// Similarity of each training gradient with a fixed reference gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TracinVariant {
    Inner,
    Cosine,
}

/// Scores every training sample against `reference` (one matrix per block).
pub fn tracin_against(
    model: &Model,
    train: &Dataset,
    reference: &[Matrix],
    variant: TracinVariant,
    layers: &[usize],
) -> Result<(Vec<f64>, usize)> {
    check_layers(model, layers)?;
    let ref_norm = reference
        .iter()
        .map(|m| m.frobenius_norm().powi(2))
        .sum::<f64>()
        .sqrt();
    let results: Vec<Result<(f64, bool)>> = (0..train.len())
        .into_par_iter()
        .map(|i| {
            let (x, y) = train.sample(i);
            let blocks = sample_blocks(model, x, y, layers)?;
            if blocks.len() != reference.len() {
                return Err(Error::mismatch("reference blocks", reference.len(), blocks.len()));
            }
            let inner: f64 = blocks.iter().zip(reference).map(|(b, r)| b.pair(r)).sum();
            match variant {
                TracinVariant::Inner => Ok((inner, false)),
                TracinVariant::Cosine => {
                    let norm = blocks.iter().map(GradBlock::norm_sq).sum::<f64>().sqrt();
                    if norm == 0.0 || ref_norm == 0.0 {
                        Ok((0.0, true))
                    } else {
                        Ok(((inner / (norm * ref_norm)).clamp(-1.0, 1.0), false))
                    }
                }
            }
        })
        .collect();
    collect_scores(results)
}

fn collect_scores(results: Vec<Result<(f64, bool)>>) -> Result<(Vec<f64>, usize)> {
    let mut scores = Vec::with_capacity(results.len());
    let mut warnings = 0;
    for r in results {
        let (s, warned) = r?;
        warnings += usize::from(warned);
        scores.push(s);
    }
    Ok((scores, warnings))
}

/// Single-checkpoint TracIn against the mean validation gradient.
pub fn tracin_scores(
    model: &Model,
    train: &Dataset,
    val: &Dataset,
    variant: TracinVariant,
    layers: &[usize],
) -> Result<InfluenceScores> {
    let reference = mean_block_gradients(model, val, layers)?;
    let (scores, warnings) = tracin_against(model, train, &reference, variant, layers)?;
    if warnings > 0 {
        log::warn!("{warnings} zero-norm gradients scored as 0");
    }
    Ok(InfluenceScores {
        ids: train.ids.clone(),
        scores,
        estimator: match variant {
            TracinVariant::Inner => Estimator::TracinInner,
            TracinVariant::Cosine => Estimator::TracinCos,
        },
        model_id: model_id(model),
        seed: train.seed,
        zero_gradient_warnings: warnings,
    })
}

/// K-FAC whitening for one gradient block.
#[derive(Debug, Clone, PartialEq)]
pub struct KfacBlock {
    pub layer: usize,
    /// `(C_in + λI)^{-1/2}`.
    pub inv_root_in: Matrix,
    /// `(C_out + λI)^{-1/2}`.
    pub inv_root_out: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KfacFactors {
    pub blocks: Vec<KfacBlock>,
    pub samples: usize,
    pub damping: f64,
}

impl KfacFactors {
    /// Identity whitening, which turns [`if_scores`] into inner-product TracIn.
    pub fn identity(model: &Model, layers: &[usize]) -> KfacFactors {
        let blocks = layers
            .iter()
            .flat_map(|&l| block_shapes(&model.layers[l]).into_iter().map(move |s| (l, s)))
            .map(|(layer, (o, i))| KfacBlock {
                layer,
                inv_root_in: Matrix::identity(i),
                inv_root_out: Matrix::identity(o),
            })
            .collect();
        KfacFactors {
            blocks,
            samples: 0,
            damping: 0.0,
        }
    }
}

/// `(out, in)` dimensions of each gradient block of a layer.
fn block_shapes(layer: &Layer) -> Vec<(usize, usize)> {
    match layer {
        Layer::Dense(d) => vec![d.weight.shape()],
        Layer::Factored(f) => vec![f.a.shape(), f.b.shape()],
    }
}

/// Per-block second moments of inputs and output gradients over `samples`,
/// inverted at the root with damping `λ`.
pub fn kfac_factors(model: &Model, samples: &Dataset, damping: f64, layers: &[usize]) -> Result<KfacFactors> {
    check_layers(model, layers)?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("K-FAC needs at least one sample".into()));
    }
    let shapes: Vec<(usize, (usize, usize))> = layers
        .iter()
        .flat_map(|&l| block_shapes(&model.layers[l]).into_iter().map(move |s| (l, s)))
        .collect();
    let mut c_in: Vec<Matrix> = shapes.iter().map(|(_, (_, i))| Matrix::zeros(*i, *i)).collect();
    let mut c_out: Vec<Matrix> = shapes.iter().map(|(_, (o, _))| Matrix::zeros(*o, *o)).collect();
    for (x, y) in samples.iter() {
        let blocks = sample_blocks(model, x, y, layers)?;
        for (k, b) in blocks.iter().enumerate() {
            c_in[k].axpy(1.0, &Matrix::outer(&b.inp, &b.inp))?;
            c_out[k].axpy(1.0, &Matrix::outer(&b.out, &b.out))?;
        }
    }
    let inv = 1.0 / samples.len() as f64;
    let blocks = shapes
        .iter()
        .zip(c_in.iter_mut().zip(c_out.iter_mut()))
        .map(|(&(layer, _), (ci, co))| {
            ci.scale_in_place(inv);
            co.scale_in_place(inv);
            Ok(KfacBlock {
                layer,
                inv_root_in: sym_root_pair(ci, damping)?.inv_root,
                inv_root_out: sym_root_pair(co, damping)?.inv_root,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(KfacFactors {
        blocks,
        samples: samples.len(),
        damping,
    })
}

/// Influence-function scores `Σ_blocks tr(Ḡᵀ C_out⁻¹ G C_in⁻¹)`, evaluated as
/// the inner product of whitened `out`/`in` vectors with the whitened mean
/// validation gradient.
pub fn if_scores(
    model: &Model,
    train: &Dataset,
    val: &Dataset,
    factors: &KfacFactors,
    layers: &[usize],
) -> Result<InfluenceScores> {
    let reference = mean_block_gradients(model, val, layers)?;
    if reference.len() != factors.blocks.len() {
        return Err(Error::mismatch("K-FAC blocks", factors.blocks.len(), reference.len()));
    }
    for (r, f) in reference.iter().zip(&factors.blocks) {
        if f.inv_root_out.rows() != r.rows() || f.inv_root_in.rows() != r.cols() {
            return Err(Error::mismatch(
                "K-FAC factor shape",
                format!("{:?}", r.shape()),
                format!("{}x{}", f.inv_root_out.rows(), f.inv_root_in.rows()),
            ));
        }
    }
    let whitened_ref: Vec<Matrix> = reference
        .iter()
        .zip(&factors.blocks)
        .map(|(r, f)| f.inv_root_out.matmul(r)?.matmul(&f.inv_root_in))
        .collect::<Result<_>>()?;
    let results: Vec<Result<(f64, bool)>> = (0..train.len())
        .into_par_iter()
        .map(|i| {
            let (x, y) = train.sample(i);
            let blocks = sample_blocks(model, x, y, layers)?;
            let mut score = 0.0;
            for ((b, f), r) in blocks.iter().zip(&factors.blocks).zip(&whitened_ref) {
                let w = GradBlock {
                    out: f.inv_root_out.matvec(&b.out)?,
                    inp: f.inv_root_in.matvec(&b.inp)?,
                };
                score += w.pair(r);
            }
            Ok((score, false))
        })
        .collect();
    let (scores, warnings) = collect_scores(results)?;
    Ok(InfluenceScores {
        ids: train.ids.clone(),
        scores,
        estimator: Estimator::IfKfac,
        model_id: model_id(model),
        seed: train.seed,
        zero_gradient_warnings: warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerImportance {
    pub layer: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerExtraction {
    pub layers: Vec<LayerImportance>,
    /// Sample-layer pairs skipped because a representation had zero norm.
    pub skipped: usize,
}

/// `1 − E[cos(h_in, h_out)]` for each width-preserving layer, comparing the
/// layer input with its linear output.
pub fn layer_extraction_scores(model: &Model, probe: &Dataset) -> Result<LayerExtraction> {
    if probe.is_empty() {
        return Err(Error::InvalidArgument("probe set is empty".into()));
    }
    let eligible: Vec<usize> = (0..model.num_layers())
        .filter(|&l| model.layers[l].in_dim() == model.layers[l].out_dim())
        .collect();
    let mut sums = vec![0.0; eligible.len()];
    let mut counts = vec![0usize; eligible.len()];
    let mut skipped = 0;
    for (x, _) in probe.iter() {
        let t = model.forward(x)?;
        for (k, &l) in eligible.iter().enumerate() {
            let before = &t.inputs[l];
            let after = &t.pre_activations[l];
            let denom = dot(before, before).sqrt() * dot(after, after).sqrt();
            if denom == 0.0 {
                skipped += 1;
                continue;
            }
            sums[k] += dot(before, after) / denom;
            counts[k] += 1;
        }
    }
    if skipped > 0 {
        log::warn!("layer extraction skipped {skipped} zero-norm representations");
    }
    let layers = eligible
        .iter()
        .zip(sums.iter().zip(&counts))
        .filter(|(_, (_, &c))| c > 0)
        .map(|(&layer, (&s, &c))| LayerImportance {
            layer,
            score: (1.0 - s / c as f64).clamp(0.0, 2.0),
        })
        .collect();
    Ok(LayerExtraction { layers, skipped })
}
