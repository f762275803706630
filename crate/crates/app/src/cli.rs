//! Command-line interface.

use std::fs;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use promise_core::apm::ApmVariant;
use promise_core::autodiff::ParamStore;
use promise_core::checks::{gradient_suite, CheckResult, GRAD_TOLERANCE};
use promise_core::data::{select_split, Domain, PromptSetting, SegmentationSample, Split};
use promise_core::model::ModelConfig;
use promise_core::pattern::IpsVariant;
use promise_core::train::{
    evaluate, pretrain_base, run_ablation, run_experiment, run_multimodality, AblationTable, DomainData, EpochRecord,
    MetricsReport, MultimodalReport, PretrainConfig, PromptSource, RunConfig, Segmenter,
};

use crate::checkpoint::Checkpoint;
use crate::dataset::{gen_synthetic, load_dataset};
use crate::error::{AppError, Result};

#[derive(Debug, Parser)]
#[command(name = "promise-seg", version, about = "Frozen promptable segmentation with pattern shifting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset.
    GenData(GenDataArgs),
    /// Train a base model on source images and save it fully frozen.
    Pretrain(PretrainArgs),
    /// Adapt a frozen base with pattern-shift tokens under GT prompts.
    TrainIps(TrainIpsArgs),
    /// Train an auto-prompting head on a frozen base.
    TrainApm(TrainApmArgs),
    /// Train an auto-prompting head together with pattern-embedding shift tokens.
    TrainPromise(TrainApmArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Compare every pattern-shift variant under one budget.
    Ablation(AblationArgs),
    /// Compare joint multi-domain adaptation against per-domain runs.
    Multimodal(MultimodalArgs),
    /// Finite-difference check of every differentiable op.
    Gradcheck(GradcheckArgs),
    /// Serve the HTTP inference API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub domain: Domain,
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    Default,
    Small,
    Tiny,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Source-domain dataset; its train and val splits are used.
    #[arg(long)]
    pub data: PathBuf,
    /// Pretraining config JSON; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub setting: Option<PromptSetting>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

/// Options shared by every adaptation command.
#[derive(Debug, Args)]
pub struct TrainOpts {
    /// Frozen base checkpoint.
    #[arg(long)]
    pub base: PathBuf,
    /// Training dataset; its train and val splits are used.
    #[arg(long)]
    pub data: PathBuf,
    /// Datasets whose test split is evaluated. Defaults to the training dataset.
    #[arg(long)]
    pub test: Vec<PathBuf>,
    /// Run config JSON; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub setting: Option<PromptSetting>,
    #[arg(long)]
    pub test_setting: Option<PromptSetting>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated prompt seeds for evaluation.
    #[arg(long, value_delimiter = ',')]
    pub eval_seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Where to save the adapted checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainIpsArgs {
    #[command(flatten)]
    pub opts: TrainOpts,
    #[arg(long, default_value = "ips-pae")]
    pub variant: IpsVariant,
}

#[derive(Debug, Args)]
pub struct TrainApmArgs {
    #[command(flatten)]
    pub opts: TrainOpts,
    #[arg(long, default_value = "conv")]
    pub apm: ApmVariant,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, required = true)]
    pub data: Vec<PathBuf>,
    /// gt, apm-conv or apm-cross.
    #[arg(long, default_value = "gt")]
    pub prompts: PromptSource,
    /// Defaults to 16P for GT prompts and the head's setting for APM prompts.
    #[arg(long)]
    pub setting: Option<PromptSetting>,
    #[arg(long, value_delimiter = ',', default_value = "7")]
    pub seeds: Vec<u64>,
    /// train, val, test or all.
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblationArgs {
    #[command(flatten)]
    pub opts: TrainOpts,
    /// Comma-separated seeds; each trains and evaluates one replicate.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Args)]
pub struct MultimodalArgs {
    #[arg(long)]
    pub base: PathBuf,
    /// One dataset per domain; at least two.
    #[arg(long, required = true)]
    pub data: Vec<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub setting: Option<PromptSetting>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    pub eval_seeds: Vec<u64>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: IpAddr,
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub config: PretrainConfig,
    pub train_data: String,
    pub frozen_hash: String,
    pub history: Vec<EpochRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config: RunConfig,
    pub frozen_hash: String,
    pub ablation: AblationTable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultimodalRunReport {
    pub config: RunConfig,
    pub frozen_hash: String,
    pub multimodal: MultimodalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub tolerance: f64,
    pub results: Vec<CheckResult>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => pretrain(a),
        Command::TrainIps(a) => {
            let v = a.variant;
            train(a.opts, |r| {
                r.ips_variant = v;
                r.prompts = PromptSource::Gt;
            })
        }
        Command::TrainApm(a) => {
            let v = a.apm;
            train(a.opts, |r| {
                r.ips_variant = IpsVariant::None;
                r.prompts = PromptSource::Apm(v);
            })
        }
        Command::TrainPromise(a) => {
            let v = a.apm;
            train(a.opts, |r| {
                r.ips_variant = IpsVariant::IpsPae;
                r.prompts = PromptSource::Apm(v);
            })
        }
        Command::Eval(a) => eval(a),
        Command::Ablation(a) => ablation(a),
        Command::Multimodal(a) => multimodal(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Serve(a) => serve(a),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Print a report to stdout and optionally save it.
fn emit<T: Serialize>(report: &T, path: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(report)?;
    if let Some(p) = path {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
        }
        fs::write(p, format!("{text}\n")).map_err(|e| AppError::io(p, e))?;
    }
    println!("{text}");
    Ok(())
}

fn dataset_name(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

fn split_of_arg(s: &str) -> Result<Option<Split>> {
    match s {
        "train" => Ok(Some(Split::Train)),
        "val" => Ok(Some(Split::Val)),
        "test" => Ok(Some(Split::Test)),
        "all" => Ok(None),
        _ => Err(AppError::Usage(format!("unknown split {s:?} (expected train, val, test or all)"))),
    }
}

fn load_split(dir: &Path, split: Option<Split>) -> Result<Vec<SegmentationSample>> {
    let all = load_dataset(dir)?;
    let part = match split {
        Some(s) => select_split(&all, s),
        None => all,
    };
    if part.is_empty() {
        return Err(AppError::Dataset(format!("{} has no samples in the requested split", dir.display())));
    }
    Ok(part)
}

fn load_base(path: &Path) -> Result<Checkpoint> {
    let ckpt = Checkpoint::load(path)?;
    if let Some((_, name, _)) = ckpt.store.iter().find(|(_, _, t)| !t.is_frozen()) {
        return Err(AppError::Checkpoint(format!(
            "{} is not a frozen base: tensor {name} is trainable",
            path.display()
        )));
    }
    Ok(ckpt)
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let meta = gen_synthetic(&a.out, a.domain, a.count, a.seed, a.size)?;
    emit(&meta, None)
}

fn pretrain(a: PretrainArgs) -> Result<()> {
    let mut cfg: PretrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => PretrainConfig::default(),
    };
    match a.preset {
        Some(Preset::Default) => cfg.model = ModelConfig::default(),
        Some(Preset::Small) => cfg.model = ModelConfig::small(),
        Some(Preset::Tiny) => cfg.model = ModelConfig::tiny(),
        None => {}
    }
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.lr = a.lr.unwrap_or(cfg.lr);
    cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.setting = a.setting.unwrap_or(cfg.setting);
    let train = load_split(&a.data, Some(Split::Train))?;
    let val = load_split(&a.data, Some(Split::Val)).unwrap_or_default();
    let out = pretrain_base(&cfg, &train, &val)?;
    let ckpt = Checkpoint::new(cfg.model, out.store);
    ckpt.save(&a.out)?;
    emit(
        &PretrainReport {
            frozen_hash: hex::encode(ckpt.frozen_hash()),
            config: cfg,
            train_data: a.data.display().to_string(),
            history: out.history,
        },
        a.report.as_deref(),
    )
}

/// Resolve a run config from the optional config file, the base model and
/// command-line overrides.
fn resolve_run(o: &TrainOpts, model: ModelConfig) -> Result<RunConfig> {
    let mut r: RunConfig = match &o.config {
        Some(p) => read_json(p)?,
        None => RunConfig::default(),
    };
    r.model = model;
    r.train_setting = o.setting.unwrap_or(r.train_setting);
    r.test_setting = o.test_setting.or(r.test_setting);
    r.epochs = o.epochs.unwrap_or(r.epochs);
    r.lr = o.lr.unwrap_or(r.lr);
    r.batch_size = o.batch_size.unwrap_or(r.batch_size);
    r.seed = o.seed.unwrap_or(r.seed);
    if let Some(s) = &o.eval_seeds {
        r.eval_seeds = s.clone();
    }
    r.max_steps = o.max_steps.or(r.max_steps);
    r.train_data = vec![o.data.display().to_string()];
    let tests = if o.test.is_empty() { std::slice::from_ref(&o.data) } else { &o.test[..] };
    r.eval_data = tests.iter().map(|p| p.display().to_string()).collect();
    Ok(r)
}

fn test_sets(o: &TrainOpts) -> Result<Vec<(String, Vec<SegmentationSample>)>> {
    let dirs = if o.test.is_empty() { std::slice::from_ref(&o.data) } else { &o.test[..] };
    let mut out: Vec<(String, Vec<SegmentationSample>)> = Vec::new();
    for d in dirs {
        let mut name = dataset_name(d);
        if out.iter().any(|(n, _)| *n == name) {
            name = format!("{name}#{}", out.len());
        }
        out.push((name, load_split(d, Some(Split::Test))?));
    }
    Ok(out)
}

fn train(o: TrainOpts, mode: impl FnOnce(&mut RunConfig)) -> Result<()> {
    let base = load_base(&o.base)?;
    let mut run = resolve_run(&o, base.config)?;
    mode(&mut run);
    let train = load_split(&o.data, Some(Split::Train))?;
    let val = load_split(&o.data, Some(Split::Val)).unwrap_or_default();
    let tests = test_sets(&o)?;
    let (adapted, report) = run_experiment(&run, &base.store, &train, &val, &tests)?;
    if let Some(out) = &o.out {
        Checkpoint::new(run.model, adapted.store).save(out)?;
    }
    emit(&report, o.report.as_deref())
}

fn eval(a: EvalArgs) -> Result<()> {
    let Checkpoint { config, mut store } = Checkpoint::load(&a.checkpoint)?;
    let seg = Segmenter::bind(&mut store, &config)?;
    let setting = match (a.prompts, &seg.apm, a.setting) {
        (_, _, Some(s)) => s,
        (PromptSource::Apm(_), Some(apm), None) => apm.setting,
        _ => PromptSetting::P16,
    };
    if let PromptSource::Apm(v) = a.prompts {
        match &seg.apm {
            Some(apm) if apm.variant == v => {}
            Some(apm) => {
                return Err(AppError::Usage(format!(
                    "checkpoint has an apm-{} head, --prompts asked for apm-{v}",
                    apm.variant
                )))
            }
            None => return Err(AppError::Usage("checkpoint has no auto-prompting head".into())),
        }
    }
    let split = split_of_arg(&a.split)?;
    let mut metrics = std::collections::BTreeMap::new();
    for d in &a.data {
        let data = load_split(d, split)?;
        let embs = seg.embed_all(&store, &data)?;
        let m = evaluate(&seg, &store, &data, &embs, a.prompts, setting, &a.seeds, true)?;
        let mut name = dataset_name(d);
        if metrics.contains_key(&name) {
            name = format!("{name}#{}", metrics.len());
        }
        metrics.insert(name, m);
    }
    let config = RunConfig {
        model: config,
        ips_variant: seg.shift.variant,
        prompts: a.prompts,
        train_setting: setting,
        test_setting: Some(setting),
        epochs: 0,
        eval_seeds: a.seeds.clone(),
        eval_data: a.data.iter().map(|p| p.display().to_string()).collect(),
        ..RunConfig::default()
    };
    config.validate()?;
    let report = MetricsReport {
        config,
        frozen_hash: hex::encode(store.frozen_hash()),
        trainable_params: adapted_params(&store),
        metrics,
        history: Vec::new(),
    };
    emit(&report, a.report.as_deref())
}

fn adapted_params(store: &ParamStore<f32>) -> usize {
    store.iter().filter(|(_, _, t)| !t.is_frozen()).map(|(_, _, t)| t.numel()).sum()
}

fn ablation(a: AblationArgs) -> Result<()> {
    let base = load_base(&a.opts.base)?;
    let mut run = resolve_run(&a.opts, base.config)?;
    run.prompts = PromptSource::Gt;
    run.eval_seeds = a.seeds.clone();
    let train = load_split(&a.opts.data, Some(Split::Train))?;
    let val = load_split(&a.opts.data, Some(Split::Val)).unwrap_or_default();
    let tests = test_sets(&a.opts)?;
    if tests.len() != 1 {
        return Err(AppError::Usage("ablation takes a single --test dataset".into()));
    }
    let table = run_ablation(&run, &base.store, &train, &val, &tests[0].1, &a.seeds)?;
    emit(
        &AblationReport {
            config: run,
            frozen_hash: hex::encode(base.frozen_hash()),
            ablation: table,
        },
        a.opts.report.as_deref(),
    )
}

fn multimodal(a: MultimodalArgs) -> Result<()> {
    if a.data.len() < 2 {
        return Err(AppError::Usage("multimodal needs at least two --data datasets".into()));
    }
    let base = load_base(&a.base)?;
    let mut run: RunConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => RunConfig::default(),
    };
    run.model = base.config;
    run.ips_variant = IpsVariant::IpsPae;
    run.prompts = PromptSource::Gt;
    run.train_setting = a.setting.unwrap_or(run.train_setting);
    run.epochs = a.epochs.unwrap_or(run.epochs);
    run.lr = a.lr.unwrap_or(run.lr);
    run.batch_size = a.batch_size.unwrap_or(run.batch_size);
    run.seed = a.seed.unwrap_or(run.seed);
    run.eval_seeds = a.eval_seeds.clone();
    run.max_steps = a.max_steps.or(run.max_steps);
    run.train_data = a.data.iter().map(|p| p.display().to_string()).collect();
    run.eval_data = run.train_data.clone();
    let mut domains = Vec::new();
    for d in &a.data {
        let mut name = dataset_name(d);
        if domains.iter().any(|x: &DomainData| x.name == name) {
            name = format!("{name}#{}", domains.len());
        }
        domains.push(DomainData {
            name,
            train: load_split(d, Some(Split::Train))?,
            val: load_split(d, Some(Split::Val)).unwrap_or_default(),
            test: load_split(d, Some(Split::Test))?,
        });
    }
    let report = run_multimodality(&run, &base.store, &domains)?;
    emit(
        &MultimodalRunReport {
            config: run,
            frozen_hash: hex::encode(base.frozen_hash()),
            multimodal: report,
        },
        a.report.as_deref(),
    )
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let results = gradient_suite(a.seed)?;
    for r in &results {
        println!(
            "{:<16} cases={:<3} max_rel_error={:.3e} {}",
            r.name,
            r.cases,
            r.max_rel_error,
            if r.passed { "ok" } else { "FAILED" }
        );
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if let Some(p) = &a.report {
        let report = GradcheckReport {
            seed: a.seed,
            tolerance: GRAD_TOLERANCE,
            results: results.clone(),
        };
        fs::write(p, serde_json::to_string_pretty(&report)?).map_err(|e| AppError::io(p, e))?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(AppError::GradCheck(format!(
            "{} exceeded {GRAD_TOLERANCE:e}: {}",
            failed.len(),
            failed.join(",")
        )))
    }
}

fn serve(a: ServeArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let rt = tokio::runtime::Runtime::new().map_err(|e| AppError::io(Path::new("tokio runtime"), e))?;
    rt.block_on(crate::service::serve(ckpt, SocketAddr::new(a.host, a.port), a.static_dir))
}
