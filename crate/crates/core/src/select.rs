//! Training loops, top-k selection, fine-tuning and the end-to-end experiment.

use std::collections::BTreeSet;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::{align, AlignConfig, AlignSummary};
use crate::compress::{collect_probe_stats, compress_model, CompressionPlan, Method};
use crate::data::{construction_split, generate, permutation, Dataset, Splits, SyntheticSpec};
use crate::error::{Error, Result};
use crate::influence::{
    descending_order, if_scores, kfac_factors, tracin_scores, Estimator, InfluenceScores, TracinVariant,
    DEFAULT_KFAC_SAMPLES,
};
use crate::metrics::{spearman, topk_overlap};
use crate::nn::{argmax, cross_entropy, Activation, Model, ParamScope, Sgd, SgdConfig};
use crate::seed::{derive_seed, rng_for};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 4,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 0.01,
            batch_size: 8,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::InvalidArgument("learning rate must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

/// Mini-batch SGD over all parameters; returns the model and per-step batch losses.
pub fn train(model: &Model, data: &Dataset, config: &TrainConfig, seed: u64) -> Result<(Model, Vec<f64>)> {
    config.validate()?;
    if data.is_empty() && config.epochs > 0 {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let mut model = model.clone();
    let mut opt = Sgd::new(SgdConfig {
        lr: config.lr,
        momentum: config.momentum,
        weight_decay: config.weight_decay,
    });
    let mut losses = Vec::new();
    let mut params = model.flat_params(ParamScope::All);
    for epoch in 0..config.epochs {
        let order = permutation(data.len(), derive_seed(seed, &format!("epoch-{epoch}")));
        for chunk in order.chunks(config.batch_size) {
            let (loss, grad) = model.batch_loss_and_gradient(chunk.iter().map(|&i| data.sample(i)))?;
            opt.step(&mut params, &grad.flat(ParamScope::All))?;
            model.set_flat_params(ParamScope::All, &params)?;
            losses.push(loss);
        }
    }
    Ok((model, losses))
}

/// Trains on a seeded random `fraction` of `train`.
pub fn warmup(model: &Model, train_set: &Dataset, fraction: f64, config: &TrainConfig, seed: u64) -> Result<(Model, Vec<f64>)> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("warm-up fraction {fraction} must be in (0, 1]")));
    }
    let k = (fraction * train_set.len() as f64).floor() as usize;
    if k == 0 {
        return Err(Error::InvalidArgument(format!(
            "warm-up fraction {fraction} of {} samples is empty",
            train_set.len()
        )));
    }
    let mut idx = permutation(train_set.len(), derive_seed(seed, "warmup-subset"));
    idx.truncate(k);
    train(model, &train_set.subset(&idx), config, derive_seed(seed, "warmup"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
}

/// Accuracy and mean cross-entropy.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    let (mut correct, mut loss) = (0usize, 0.0);
    for (x, y) in data.iter() {
        let logits = model.logits(x)?;
        correct += usize::from(argmax(&logits) == y);
        loss += cross_entropy(&logits, y)?;
    }
    let n = data.len() as f64;
    Ok(Evaluation {
        accuracy: correct as f64 / n,
        loss: loss / n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Positions into the scored training set, best first.
    pub positions: Vec<usize>,
    /// Sample ids matching `positions`.
    pub ids: Vec<usize>,
    pub k: usize,
    pub corrupted_fraction: Option<f64>,
    pub overlap: Option<f64>,
}

impl SelectionResult {
    pub fn with_corruption(mut self, train: &Dataset) -> SelectionResult {
        let bad = self.positions.iter().filter(|&&p| train.corrupted[p]).count();
        self.corrupted_fraction = Some(bad as f64 / self.k as f64);
        self
    }

    pub fn overlap_with(&self, other: &SelectionResult) -> Result<f64> {
        topk_overlap(&self.positions, &other.positions, self.k.min(other.k))
    }
}

/// The top `percent`% of samples by score, ties broken by ascending position.
pub fn select_topk(scores: &InfluenceScores, percent: f64) -> Result<SelectionResult> {
    if !(percent > 0.0 && percent <= 100.0) {
        return Err(Error::InvalidArgument(format!("percent {percent} must be in (0, 100]")));
    }
    if scores.is_empty() {
        return Err(Error::InvalidArgument("no scores to select from".into()));
    }
    let n = scores.len();
    let k = ((percent / 100.0 * n as f64).floor() as usize).clamp(1, n);
    let mut positions = descending_order(&scores.scores);
    positions.truncate(k);
    let ids = positions.iter().map(|&p| scores.ids[p]).collect();
    Ok(SelectionResult {
        positions,
        ids,
        k,
        corrupted_fraction: None,
        overlap: None,
    })
}

/// Writes `index,score,rank,selected,corrupted` for every scored sample.
pub fn write_selection_csv(
    path: &Path,
    scores: &InfluenceScores,
    selection: &SelectionResult,
    corrupted: Option<&[bool]>,
) -> Result<()> {
    let order = scores.ranking();
    let mut rank = vec![0usize; order.len()];
    for (r, &p) in order.iter().enumerate() {
        rank[p] = r + 1;
    }
    let chosen: BTreeSet<usize> = selection.positions.iter().copied().collect();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e))?;
    w.write_record(["index", "score", "rank", "selected", "corrupted"])
        .map_err(|e| Error::format(path, e))?;
    for i in 0..scores.len() {
        let corrupted = corrupted.map_or(String::new(), |c| u8::from(c[i]).to_string());
        w.write_record([
            scores.ids[i].to_string(),
            scores.scores[i].to_string(),
            rank[i].to_string(),
            u8::from(chosen.contains(&i)).to_string(),
            corrupted,
        ])
        .map_err(|e| Error::format(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Ids marked selected in a selection CSV.
pub fn read_selection_csv(path: &Path) -> Result<Vec<usize>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e))?;
    let mut ids = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::format(path, e))?;
        let bad = || Error::format(path, format!("row {}: malformed selection record", line + 1));
        if rec.len() < 4 {
            return Err(bad());
        }
        if &rec[3] == "1" {
            ids.push(rec[0].parse().map_err(|_| bad())?);
        }
    }
    Ok(ids)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneResult {
    pub selected: usize,
    pub accuracy: f64,
    pub loss: f64,
}

/// Trains `model` on the selected training positions only, then evaluates on `test`.
pub fn finetune_and_eval(
    model: &Model,
    selection: &[usize],
    train_set: &Dataset,
    test: &Dataset,
    config: &TrainConfig,
    seed: u64,
) -> Result<(Model, FinetuneResult)> {
    if selection.is_empty() {
        return Err(Error::InvalidArgument("empty selection".into()));
    }
    if let Some(&p) = selection.iter().find(|&&p| p >= train_set.len()) {
        return Err(Error::InvalidArgument(format!("selected position {p} outside the training set")));
    }
    let subset = train_set.subset(selection);
    let (tuned, _) = train(model, &subset, config, derive_seed(seed, "finetune"))?;
    let eval = evaluate(&tuned, test)?;
    Ok((
        tuned,
        FinetuneResult {
            selected: selection.len(),
            accuracy: eval.accuracy,
            loss: eval.loss,
        },
    ))
}

/// Which layers contribute gradients to influence scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreLayers {
    All,
    /// Only the layers targeted by compression.
    Compressed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root seed; replicate `i` runs with `seed + i`.
    pub seed: Option<u64>,
    pub replicates: usize,
    /// Synthetic task; its own seed field is replaced per replicate.
    pub data: SyntheticSpec,
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub warmup_fraction: f64,
    pub warmup: TrainConfig,
    pub probe_size: usize,
    pub align_size: usize,
    pub methods: Vec<Method>,
    pub sparsities: Vec<f64>,
    pub damping: f64,
    pub rank_align: usize,
    pub exclude_ends: bool,
    pub align: AlignConfig,
    /// Methods that also get an aligned variant.
    pub aligned_methods: Vec<Method>,
    /// Sparsities at which aligned variants run; all sparsities when absent.
    pub align_sparsities: Option<Vec<f64>>,
    pub estimators: Vec<Estimator>,
    pub kfac_samples: usize,
    pub score_layers: ScoreLayers,
    pub select_percent: f64,
    pub finetune: TrainConfig,
    pub run_finetune: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: None,
            replicates: 1,
            data: SyntheticSpec::default(),
            widths: vec![32, 64, 64, 64, 8],
            activation: Activation::Tanh,
            warmup_fraction: 0.05,
            warmup: TrainConfig {
                epochs: 1,
                ..TrainConfig::default()
            },
            probe_size: 256,
            align_size: 512,
            methods: vec![Method::Svd, Method::IpsvdDirect],
            sparsities: vec![0.1, 0.3, 0.5, 0.7, 0.9],
            damping: 1e-3,
            rank_align: 8,
            exclude_ends: true,
            align: AlignConfig::default(),
            aligned_methods: vec![Method::IpsvdDirect],
            align_sparsities: None,
            estimators: vec![Estimator::TracinCos],
            kfac_samples: DEFAULT_KFAC_SAMPLES,
            score_layers: ScoreLayers::Compressed,
            select_percent: 5.0,
            finetune: TrainConfig {
                lr: 0.02,
                momentum: 0.0,
                ..TrainConfig::default()
            },
            run_finetune: true,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<u64> {
        let seed = self
            .seed
            .ok_or_else(|| Error::InvalidArgument("experiment config must set a root seed".into()))?;
        if self.replicates == 0 {
            return Err(Error::InvalidArgument("replicates must be at least 1".into()));
        }
        if self.widths.len() < 2 || self.widths[0] != self.data.features || *self.widths.last().unwrap() != self.data.classes {
            return Err(Error::InvalidArgument(format!(
                "widths {:?} must start at {} features and end at {} classes",
                self.widths, self.data.features, self.data.classes
            )));
        }
        if self.estimators.is_empty() {
            return Err(Error::InvalidArgument("no estimators configured".into()));
        }
        if !(self.select_percent > 0.0 && self.select_percent <= 100.0) {
            return Err(Error::InvalidArgument("select_percent must be in (0, 100]".into()));
        }
        for &s in &self.sparsities {
            CompressionPlan::new(Method::Svd, s).validate()?;
        }
        self.align.validate()?;
        self.data.validate()?;
        Ok(seed)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e))
    }

    fn plan(&self, method: Method, sparsity: f64) -> CompressionPlan {
        CompressionPlan {
            damping: self.damping,
            rank_align: self.rank_align,
            exclude_ends: self.exclude_ends,
            ..CompressionPlan::new(method, sparsity)
        }
    }

    fn aligned_at(&self, method: Method, sparsity: f64) -> bool {
        self.aligned_methods.contains(&method)
            && self.align_sparsities.as_ref().is_none_or(|v| v.contains(&sparsity))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetentionRow {
    pub sparsity: f64,
    pub method: String,
    pub estimator: Estimator,
    pub seed: u64,
    pub loss_retention: f64,
    pub influence_spearman: f64,
    pub topk_overlap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRow {
    pub seed: u64,
    /// Absent for the uncompressed target.
    pub sparsity: Option<f64>,
    pub method: String,
    pub estimator: Estimator,
    pub k: usize,
    pub corrupted_fraction: f64,
    pub topk_overlap: f64,
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub sparsity: f64,
    pub method: String,
    pub achieved_sparsity: f64,
    pub val_loss: f64,
    pub align: Option<AlignSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateSummary {
    pub seed: u64,
    pub warmup_first_loss: f64,
    pub warmup_last_loss: f64,
    pub target_val_loss: f64,
    pub target_test_accuracy: f64,
    pub train_corrupted: usize,
    pub cells: Vec<CellSummary>,
}

/// One selection table destined for its own CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionTable {
    pub name: String,
    pub scores: InfluenceScores,
    pub selection: SelectionResult,
    pub corrupted: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub retention: Vec<RetentionRow>,
    pub selections: Vec<SelectionRow>,
    pub replicates: Vec<ReplicateSummary>,
    /// Set when a stage failed; outputs before the failure are kept.
    pub failed_stage: Option<String>,
    #[serde(skip)]
    pub tables: Vec<SelectionTable>,
}

impl ExperimentReport {
    fn empty(config: &ExperimentConfig) -> ExperimentReport {
        ExperimentReport {
            config: config.clone(),
            retention: Vec::new(),
            selections: Vec::new(),
            replicates: Vec::new(),
            failed_stage: None,
            tables: Vec::new(),
        }
    }

    pub fn write_retention_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e))?;
        w.write_record([
            "sparsity",
            "method",
            "estimator",
            "seed",
            "loss_retention",
            "influence_spearman",
            "topk_overlap",
        ])
        .map_err(|e| Error::format(path, e))?;
        for r in &self.retention {
            w.write_record([
                r.sparsity.to_string(),
                r.method.clone(),
                r.estimator.name().to_string(),
                r.seed.to_string(),
                r.loss_retention.to_string(),
                r.influence_spearman.to_string(),
                r.topk_overlap.to_string(),
            ])
            .map_err(|e| Error::format(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_selection_summary_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e))?;
        w.write_record([
            "seed",
            "sparsity",
            "method",
            "estimator",
            "k",
            "corrupted_fraction",
            "topk_overlap",
            "test_accuracy",
        ])
        .map_err(|e| Error::format(path, e))?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for r in &self.selections {
            w.write_record([
                r.seed.to_string(),
                opt(r.sparsity),
                r.method.clone(),
                r.estimator.name().to_string(),
                r.k.to_string(),
                r.corrupted_fraction.to_string(),
                r.topk_overlap.to_string(),
                opt(r.test_accuracy),
            ])
            .map_err(|e| Error::format(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// `retention_curve.csv`, `selection_summary.csv`, `selections/*.csv` and `report.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let sel_dir = dir.join("selections");
        std::fs::create_dir_all(&sel_dir).map_err(|e| Error::io(&sel_dir, e))?;
        self.write_retention_csv(&dir.join("retention_curve.csv"))?;
        self.write_selection_summary_csv(&dir.join("selection_summary.csv"))?;
        for t in &self.tables {
            write_selection_csv(
                &sel_dir.join(format!("{}.csv", t.name)),
                &t.scores,
                &t.selection,
                Some(&t.corrupted),
            )?;
        }
        let path = dir.join("report.json");
        let mut text = serde_json::to_string_pretty(self).map_err(|e| Error::format(&path, e))?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

/// Scores `train` under `estimator` for `model`.
pub fn score_model(
    model: &Model,
    splits: &Splits,
    estimator: Estimator,
    layers: &[usize],
    kfac_samples: usize,
    damping: f64,
    seed: u64,
) -> Result<InfluenceScores> {
    let mut scores = match estimator {
        Estimator::TracinCos => tracin_scores(model, &splits.train, &splits.val, TracinVariant::Cosine, layers)?,
        Estimator::TracinInner => tracin_scores(model, &splits.train, &splits.val, TracinVariant::Inner, layers)?,
        Estimator::IfKfac => {
            let n = kfac_samples.clamp(1, splits.train.len());
            let mut idx = permutation(splits.train.len(), derive_seed(seed, "kfac"));
            idx.truncate(n);
            let factors = kfac_factors(model, &splits.train.subset(&idx), damping, layers)?;
            if_scores(model, &splits.train, &splits.val, &factors, layers)?
        }
    };
    scores.seed = seed;
    Ok(scores)
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

struct CellOutput {
    retention: Vec<RetentionRow>,
    selections: Vec<SelectionRow>,
    tables: Vec<SelectionTable>,
    summary: CellSummary,
}

struct TargetState<'a> {
    seed: u64,
    splits: &'a Splits,
    target: &'a Model,
    target_val_loss: f64,
    align_data: &'a Dataset,
    stats: &'a crate::compress::ProbeStats,
    target_scores: &'a [InfluenceScores],
    target_selections: &'a [SelectionResult],
}

fn table_name(seed: u64, method: &str, sparsity: Option<f64>, estimator: Estimator) -> String {
    let method = method.replace('+', "_");
    match sparsity {
        Some(s) => format!("seed{seed}_{method}_rho{s}_{estimator}"),
        None => format!("seed{seed}_{method}_{estimator}"),
    }
}

fn run_cell(
    config: &ExperimentConfig,
    st: &TargetState,
    method: Method,
    sparsity: f64,
    aligned: bool,
) -> Result<CellOutput> {
    let plan = config.plan(method, sparsity);
    let (mut proxy, report) = stage("compress", compress_model(st.target, st.stats, &plan))?;
    let mut tag = method.name().to_string();
    let mut align_summary = None;
    if aligned {
        let cfg = AlignConfig {
            seed: derive_seed(st.seed, "align"),
            ..config.align.clone()
        };
        let (a, rep) = stage("align", align(&proxy, st.target, st.align_data, &cfg))?;
        proxy = a;
        align_summary = Some(rep.summary);
        tag.push_str("+align");
    }
    let val = stage("evaluate", evaluate(&proxy, &st.splits.val))?;
    let loss_retention = st.target_val_loss / val.loss;
    let layers = match config.score_layers {
        ScoreLayers::All => (0..proxy.num_layers()).collect::<Vec<_>>(),
        ScoreLayers::Compressed => plan.target_layers(st.target),
    };
    let mut out = CellOutput {
        retention: Vec::new(),
        selections: Vec::new(),
        tables: Vec::new(),
        summary: CellSummary {
            sparsity,
            method: tag.clone(),
            achieved_sparsity: report.sparsity,
            val_loss: val.loss,
            align: align_summary,
        },
    };
    for (e, &estimator) in config.estimators.iter().enumerate() {
        let scores = stage(
            "score",
            score_model(&proxy, st.splits, estimator, &layers, config.kfac_samples, config.damping, st.seed),
        )?;
        let rho = stage("score", spearman(&scores.scores, &st.target_scores[e].scores))?;
        let sel = stage("select", select_topk(&scores, config.select_percent))?.with_corruption(&st.splits.train);
        let overlap = stage("select", sel.overlap_with(&st.target_selections[e]))?;
        let accuracy = if config.run_finetune {
            let (_, r) = stage(
                "finetune",
                finetune_and_eval(st.target, &sel.positions, &st.splits.train, &st.splits.test, &config.finetune, st.seed),
            )?;
            Some(r.accuracy)
        } else {
            None
        };
        out.retention.push(RetentionRow {
            sparsity,
            method: tag.clone(),
            estimator,
            seed: st.seed,
            loss_retention,
            influence_spearman: rho,
            topk_overlap: overlap,
        });
        out.selections.push(SelectionRow {
            seed: st.seed,
            sparsity: Some(sparsity),
            method: tag.clone(),
            estimator,
            k: sel.k,
            corrupted_fraction: sel.corrupted_fraction.unwrap_or(0.0),
            topk_overlap: overlap,
            test_accuracy: accuracy,
        });
        out.tables.push(SelectionTable {
            name: table_name(st.seed, &tag, Some(sparsity), estimator),
            scores,
            selection: SelectionResult {
                overlap: Some(overlap),
                ..sel
            },
            corrupted: st.splits.train.corrupted.clone(),
        });
    }
    Ok(out)
}

fn run_replicate(config: &ExperimentConfig, seed: u64, report: &mut ExperimentReport) -> Result<()> {
    let spec = SyntheticSpec {
        seed: derive_seed(seed, "data"),
        ..config.data.clone()
    };
    let splits = stage("generate", generate(&spec))?;
    let init = stage(
        "init",
        Model::mlp(&config.widths, config.activation, &mut rng_for(seed, "init")),
    )?;
    let (target, warm_losses) = stage(
        "warmup",
        warmup(&init, &splits.train, config.warmup_fraction, &config.warmup, seed),
    )?;
    let target_val = stage("evaluate", evaluate(&target, &splits.val))?;
    let target_test = stage("evaluate", evaluate(&target, &splits.test))?;

    let (probe_pos, align_pos) = stage(
        "probe",
        construction_split(
            splits.train.len(),
            config.probe_size,
            config.align_size,
            derive_seed(seed, "construction"),
        ),
    )?;
    let probe = splits.train.subset(&probe_pos);
    let align_data = splits.train.subset(&align_pos);
    let compress_layers = config.plan(Method::Svd, 0.5).target_layers(&target);
    let stats = stage("probe", collect_probe_stats(&target, &probe, &compress_layers))?;

    let score_layers = match config.score_layers {
        ScoreLayers::All => (0..target.num_layers()).collect::<Vec<_>>(),
        ScoreLayers::Compressed => compress_layers.clone(),
    };
    let mut target_scores = Vec::new();
    let mut target_selections = Vec::new();
    for &estimator in &config.estimators {
        let scores = stage(
            "score",
            score_model(&target, &splits, estimator, &score_layers, config.kfac_samples, config.damping, seed),
        )?;
        let sel = stage("select", select_topk(&scores, config.select_percent))?.with_corruption(&splits.train);
        let accuracy = if config.run_finetune {
            let (_, r) = stage(
                "finetune",
                finetune_and_eval(&target, &sel.positions, &splits.train, &splits.test, &config.finetune, seed),
            )?;
            Some(r.accuracy)
        } else {
            None
        };
        report.selections.push(SelectionRow {
            seed,
            sparsity: None,
            method: "target".into(),
            estimator,
            k: sel.k,
            corrupted_fraction: sel.corrupted_fraction.unwrap_or(0.0),
            topk_overlap: 1.0,
            test_accuracy: accuracy,
        });
        report.tables.push(SelectionTable {
            name: table_name(seed, "target", None, estimator),
            scores: scores.clone(),
            selection: sel.clone(),
            corrupted: splits.train.corrupted.clone(),
        });
        target_scores.push(scores);
        target_selections.push(sel);
    }

    let mut cells = Vec::new();
    for &sparsity in &config.sparsities {
        for &method in &config.methods {
            cells.push((method, sparsity, false));
            if config.aligned_at(method, sparsity) {
                cells.push((method, sparsity, true));
            }
        }
    }
    let st = TargetState {
        seed,
        splits: &splits,
        target: &target,
        target_val_loss: target_val.loss,
        align_data: &align_data,
        stats: &stats,
        target_scores: &target_scores,
        target_selections: &target_selections,
    };
    let outputs: Vec<Result<CellOutput>> = cells
        .par_iter()
        .map(|&(method, sparsity, aligned)| run_cell(config, &st, method, sparsity, aligned))
        .collect();
    let mut summary = ReplicateSummary {
        seed,
        warmup_first_loss: warm_losses.first().copied().unwrap_or(f64::NAN),
        warmup_last_loss: warm_losses.last().copied().unwrap_or(f64::NAN),
        target_val_loss: target_val.loss,
        target_test_accuracy: target_test.accuracy,
        train_corrupted: splits.train.corrupted_count(),
        cells: Vec::new(),
    };
    let mut failure = None;
    for out in outputs {
        match out {
            Ok(c) => {
                report.retention.extend(c.retention);
                report.selections.extend(c.selections);
                report.tables.extend(c.tables);
                summary.cells.push(c.summary);
            }
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }
    report.replicates.push(summary);
    failure.map_or(Ok(()), Err)
}

/// Runs every replicate, appending to `report` as stages complete so that a
/// failure leaves the finished part in place.
pub fn run_pipeline_into(config: &ExperimentConfig, report: &mut ExperimentReport) -> Result<()> {
    let root = config.validate()?;
    for i in 0..config.replicates {
        let seed = root.wrapping_add(i as u64);
        log::info!("replicate {} of {} (seed {seed})", i + 1, config.replicates);
        if let Err(e) = run_replicate(config, seed, report) {
            if let Error::Stage { stage, .. } = &e {
                report.failed_stage = Some((*stage).to_string());
            }
            return Err(e);
        }
    }
    Ok(())
}

pub fn run_pipeline(config: &ExperimentConfig) -> Result<ExperimentReport> {
    let mut report = ExperimentReport::empty(config);
    run_pipeline_into(config, &mut report)?;
    Ok(report)
}

/// Like [`run_pipeline`], but always returns whatever was produced.
pub fn run_pipeline_partial(config: &ExperimentConfig) -> (ExperimentReport, Option<Error>) {
    let mut report = ExperimentReport::empty(config);
    let err = run_pipeline_into(config, &mut report).err();
    (report, err)
}
