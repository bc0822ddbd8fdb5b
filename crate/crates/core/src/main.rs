use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use influence_proxy::align::{align, AlignConfig};
use influence_proxy::compress::{collect_probe_stats, compress_model, CompressionPlan, Method};
use influence_proxy::data::{construction_split, generate, Splits, SyntheticSpec};
use influence_proxy::influence::{Estimator, InfluenceScores, DEFAULT_KFAC_SAMPLES};
use influence_proxy::nn::{Activation, Model};
use influence_proxy::seed::{derive_seed, rng_for};
use influence_proxy::select::{
    evaluate, finetune_and_eval, read_selection_csv, run_pipeline_partial, score_model, select_topk, train,
    write_selection_csv, ExperimentConfig, TrainConfig,
};
use influence_proxy::{Error, Result};

#[derive(Parser)]
#[command(name = "influence-proxy", version, about = "Low-rank influence proxies for training data selection")]
struct Cli {
    /// Worker threads; 1 gives bit-identical outputs, 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic classification task.
    GenData {
        /// Dataset spec JSON; missing fields take their defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Initialize and train a dense MLP.
    Train(TrainArgs),
    /// Build a low-rank proxy from a trained model.
    Compress(CompressArgs),
    /// Refine a proxy by gradient alignment against its target.
    Align(AlignArgs),
    /// Score training samples against the validation split.
    Score(ScoreArgs),
    /// Keep the top-scored fraction of the training set.
    Select {
        #[arg(long)]
        scores: PathBuf,
        /// Selection budget in percent of the training set.
        #[arg(long, default_value_t = 5.0)]
        percent: f64,
        /// Dataset directory; adds the corrupted column when given.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune on a selection and report test metrics.
    FinetuneEval(FinetuneArgs),
    /// Run the full compression, alignment, scoring and selection grid.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's root seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ActivationArg {
    Tanh,
    Gelu,
}

#[derive(Args)]
struct Optim {
    /// Learning rate.
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 0.01)]
    weight_decay: f64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Hidden widths; input and output widths come from the data.
    #[arg(long, value_delimiter = ',', default_value = "64,64,64")]
    hidden: Vec<usize>,
    #[arg(long, value_enum, default_value = "tanh")]
    activation: ActivationArg,
    /// Start from this model instead of a fresh initialization.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    epochs: usize,
    #[command(flatten)]
    optim: Optim,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct Construction {
    /// Probe samples used for curvature statistics.
    #[arg(long, default_value_t = 256)]
    probe_size: usize,
    /// Alignment samples, disjoint from the probe.
    #[arg(long, default_value_t = 512)]
    align_size: usize,
    /// Seed of the probe/alignment split.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct CompressArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_parser = parse_method, default_value = "ipsvd-direct")]
    method: Method,
    /// Fraction of each compressed layer's parameters removed.
    #[arg(long, default_value_t = 0.5)]
    sparsity: f64,
    /// Damping added to both second moments.
    #[arg(long, default_value_t = 1e-3)]
    damping: f64,
    /// Ranks are rounded to multiples of this.
    #[arg(long, default_value_t = 8)]
    rank_align: usize,
    /// Keep the first and last layers dense.
    #[arg(long)]
    exclude_ends: bool,
    #[command(flatten)]
    construction: Construction,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct AlignArgs {
    #[arg(long)]
    proxy: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Weight of the KL anchoring term.
    #[arg(long, default_value_t = 0.1)]
    lambda_kl: f64,
    /// Softmax temperature of the KL term.
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    #[arg(long, default_value_t = 2)]
    epochs: usize,
    #[arg(long, default_value_t = 0.005)]
    lr: f64,
    #[arg(long, default_value_t = 0.0)]
    momentum: f64,
    #[arg(long, default_value_t = 0.01)]
    weight_decay: f64,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
    /// Finite-difference step of the Hessian-vector product.
    #[arg(long, default_value_t = 1e-4)]
    hvp_eps: f64,
    #[command(flatten)]
    construction: Construction,
    #[arg(long)]
    out: PathBuf,
    /// Per-step loss records as JSON lines.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum LayersArg {
    /// Every layer except the first and last.
    Interior,
    All,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_parser = parse_estimator, default_value = "tracin-cos")]
    estimator: Estimator,
    #[arg(long, value_enum, default_value = "interior")]
    layers: LayersArg,
    /// Training samples used to fit curvature factors.
    #[arg(long, default_value_t = DEFAULT_KFAC_SAMPLES)]
    kfac_samples: usize,
    /// Damping of the curvature factors.
    #[arg(long, default_value_t = 1e-3)]
    damping: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    selection: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 4)]
    epochs: usize,
    #[arg(long, default_value_t = 0.02)]
    lr: f64,
    #[arg(long, default_value_t = 0.0)]
    momentum: f64,
    #[arg(long, default_value_t = 0.01)]
    weight_decay: f64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_estimator(s: &str) -> std::result::Result<Estimator, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e))
}

fn in_stage<T>(stage: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(stage))
}

fn load_model(path: &Path) -> Result<Model> {
    in_stage("load-model", Model::load(path))
}

fn load_data(dir: &Path) -> Result<Splits> {
    in_stage("load-data", Splits::load(dir)).map(|(s, _)| s)
}

fn gen_data(spec: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut spec: SyntheticSpec = match spec {
        Some(p) => in_stage("load-spec", read_json(p))?,
        None => SyntheticSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let splits = in_stage("generate", generate(&spec))?;
    in_stage("write", splits.save(out, &spec))
}

fn run_train(a: &TrainArgs) -> Result<()> {
    let splits = load_data(&a.data)?;
    let model = match &a.init {
        Some(p) => load_model(p)?,
        None => {
            let mut widths = vec![splits.train.features()];
            widths.extend(&a.hidden);
            widths.push(splits.train.classes);
            let act = match a.activation {
                ActivationArg::Tanh => Activation::Tanh,
                ActivationArg::Gelu => Activation::Gelu,
            };
            in_stage("init", Model::mlp(&widths, act, &mut rng_for(a.seed, "init")))?
        }
    };
    let cfg = TrainConfig {
        epochs: a.epochs,
        lr: a.optim.lr,
        momentum: a.optim.momentum,
        weight_decay: a.optim.weight_decay,
        batch_size: a.optim.batch_size,
    };
    let (model, losses) = in_stage("train", train(&model, &splits.train, &cfg, derive_seed(a.seed, "train")))?;
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        log::info!("train loss {first:.4} -> {last:.4} over {} steps", losses.len());
    }
    let val = in_stage("evaluate", evaluate(&model, &splits.val))?;
    log::info!("validation accuracy {:.4} loss {:.4}", val.accuracy, val.loss);
    in_stage("write", model.save(&a.out))
}

fn split_positions(c: &Construction, train_len: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    in_stage(
        "split",
        construction_split(train_len, c.probe_size, c.align_size, derive_seed(c.seed, "construction")),
    )
}

fn run_compress(a: &CompressArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let splits = load_data(&a.data)?;
    let plan = CompressionPlan {
        method: a.method,
        sparsity: a.sparsity,
        damping: a.damping,
        rank_align: a.rank_align,
        exclude_ends: a.exclude_ends,
        ..Default::default()
    };
    in_stage("compress", plan.validate())?;
    let (probe_pos, _) = split_positions(&a.construction, splits.train.len())?;
    let probe = splits.train.subset(&probe_pos);
    let stats = in_stage("probe", collect_probe_stats(&model, &probe, &plan.target_layers(&model)))?;
    let (proxy, mut report) = in_stage("compress", compress_model(&model, &stats, &plan))?;
    report.seed = Some(a.construction.seed);
    log::info!("achieved sparsity {:.4}", report.sparsity);
    in_stage("write", proxy.save(&a.out))?;
    if let Some(p) = &a.report {
        in_stage("write", write_json(p, &report))?;
    }
    Ok(())
}

fn run_align(a: &AlignArgs) -> Result<()> {
    let proxy = load_model(&a.proxy)?;
    let target = load_model(&a.target)?;
    let splits = load_data(&a.data)?;
    let (_, align_pos) = split_positions(&a.construction, splits.train.len())?;
    let cfg = AlignConfig {
        lr: a.lr,
        momentum: a.momentum,
        weight_decay: a.weight_decay,
        lambda_kl: a.lambda_kl,
        tau: a.tau,
        epochs: a.epochs,
        batch_size: a.batch_size,
        hvp_eps: a.hvp_eps,
        seed: derive_seed(a.construction.seed, "align"),
    };
    let (aligned, report) = in_stage("align", align(&proxy, &target, &splits.train.subset(&align_pos), &cfg))?;
    in_stage("write", aligned.save(&a.out))?;
    if let Some(p) = &a.log {
        in_stage("write", report.write_jsonl(p))?;
    }
    if let Some(p) = &a.summary {
        in_stage("write", report.write_summary(p))?;
    }
    Ok(())
}

fn run_score(a: &ScoreArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let splits = load_data(&a.data)?;
    let layers = match a.layers {
        LayersArg::Interior => model.interior_layers(),
        LayersArg::All => (0..model.num_layers()).collect(),
    };
    let scores = in_stage(
        "score",
        score_model(&model, &splits, a.estimator, &layers, a.kfac_samples, a.damping, a.seed),
    )?;
    if scores.zero_gradient_warnings > 0 {
        log::warn!("{} samples had zero gradients", scores.zero_gradient_warnings);
    }
    in_stage("write", scores.write_csv(&a.out))
}

fn run_select(scores: &Path, percent: f64, data: Option<&Path>, out: &Path) -> Result<()> {
    let scores = in_stage("load-scores", InfluenceScores::read_csv(scores))?;
    let sel = in_stage("select", select_topk(&scores, percent))?;
    let corrupted = match data {
        Some(dir) => {
            let train = load_data(dir)?.train;
            let pos: HashMap<usize, usize> = train.ids.iter().enumerate().map(|(p, &id)| (id, p)).collect();
            let flags = scores
                .ids
                .iter()
                .map(|id| {
                    pos.get(id)
                        .map(|&p| train.corrupted[p])
                        .ok_or_else(|| Error::InvalidArgument(format!("scored id {id} is not in the training split")))
                })
                .collect::<Result<Vec<bool>>>();
            Some(in_stage("select", flags)?)
        }
        None => None,
    };
    in_stage("write", write_selection_csv(out, &scores, &sel, corrupted.as_deref()))
}

fn run_finetune(a: &FinetuneArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let splits = load_data(&a.data)?;
    let ids = in_stage("load-selection", read_selection_csv(&a.selection))?;
    let pos: HashMap<usize, usize> = splits.train.ids.iter().enumerate().map(|(p, &id)| (id, p)).collect();
    let positions = ids
        .iter()
        .map(|id| {
            pos.get(id)
                .copied()
                .ok_or_else(|| Error::format(&a.selection, format!("selected id {id} is not in the training split")))
        })
        .collect::<Result<Vec<usize>>>();
    let positions = in_stage("load-selection", positions)?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        momentum: a.momentum,
        weight_decay: a.weight_decay,
        batch_size: a.batch_size,
    };
    let (_, result) = in_stage(
        "finetune",
        finetune_and_eval(&model, &positions, &splits.train, &splits.test, &cfg, a.seed),
    )?;
    log::info!("test accuracy {:.4}", result.accuracy);
    in_stage("write", write_json(&a.out, &result))
}

fn run_experiment(config: &Path, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut cfg = in_stage("load-config", ExperimentConfig::load(config))?;
    if seed.is_some() {
        cfg.seed = seed;
    }
    let (report, err) = run_pipeline_partial(&cfg);
    in_stage("write", std::fs::create_dir_all(out).map_err(|e| Error::io(out, e)))?;
    in_stage("write", report.write(out))?;
    err.map_or(Ok(()), Err)
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData { spec, seed, out } => gen_data(spec.as_deref(), *seed, out),
        Command::Train(a) => run_train(a),
        Command::Compress(a) => run_compress(a),
        Command::Align(a) => run_align(a),
        Command::Score(a) => run_score(a),
        Command::Select {
            scores,
            percent,
            data,
            out,
        } => run_select(scores, *percent, data.as_deref(), out),
        Command::FinetuneEval(a) => run_finetune(a),
        Command::Experiment { config, seed, out } => run_experiment(config, *seed, out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        eprintln!("error [E_THREADS]: {e}");
        return ExitCode::FAILURE;
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let stage = e.stage().unwrap_or("-");
            let file = e.path().map_or_else(|| "-".to_string(), |p| p.display().to_string());
            eprintln!("error [{}] stage={stage} file={file}: {e}", e.code());
            ExitCode::FAILURE
        }
    }
}
