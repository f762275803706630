use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::loss::seg_loss;
use super::metrics::compute_metrics;
use super::report::{DatasetMetrics, EpochRecord, MetricsReport, SeedMetrics};
use crate::apm::{AutoPrompter, ApmVariant};
use crate::autodiff::{adam_step, AdamConfig, AdamState, Axis, Gradients, Graph, ParamStore, Real, Var, DEFAULT_LR};
use crate::data::{sample_gt_points, PointPrompt, PromptSetting, SegmentationSample};
use crate::error::{Error, Result};
use crate::model::{DecoderVars, EmbeddingVars, ImageEmbedding, MiniSam, ModelConfig};
use crate::pattern::{trainable_params, IpsVariant, PatternShift};
use crate::rng;

/// Where prompts come from during training and evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PromptSource {
    /// Points sampled from the ground-truth mask.
    Gt,
    /// Points predicted by an auto-prompting head.
    Apm(ApmVariant),
}

impl fmt::Display for PromptSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PromptSource::Gt => f.write_str("gt"),
            PromptSource::Apm(v) => write!(f, "apm-{v}"),
        }
    }
}

impl FromStr for PromptSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gt" => Ok(PromptSource::Gt),
            "apm" | "apm-conv" => Ok(PromptSource::Apm(ApmVariant::Conv)),
            "apm-cross" => Ok(PromptSource::Apm(ApmVariant::Cross)),
            _ => Err(Error::Config(format!(
                "unknown prompt source {s:?} (expected gt, apm-conv or apm-cross)"
            ))),
        }
    }
}

impl Serialize for PromptSource {
    fn serialize<S: serde::Serializer>(&self, s: S) -> core::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for PromptSource {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> core::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Everything that determines an adaptation or evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub ips_variant: IpsVariant,
    pub prompts: PromptSource,
    pub train_setting: PromptSetting,
    /// Defaults to `train_setting`.
    pub test_setting: Option<PromptSetting>,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub eval_seeds: Vec<u64>,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
    pub train_data: Vec<String>,
    pub eval_data: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            ips_variant: IpsVariant::IpsPae,
            prompts: PromptSource::Gt,
            train_setting: PromptSetting::P16,
            test_setting: None,
            epochs: 30,
            lr: DEFAULT_LR,
            batch_size: 8,
            seed: 7,
            eval_seeds: vec![7],
            max_steps: None,
            train_data: Vec::new(),
            eval_data: Vec::new(),
        }
    }
}

impl RunConfig {
    pub fn test_setting(&self) -> PromptSetting {
        self.test_setting.unwrap_or(self.train_setting)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.eval_seeds.is_empty() {
            return Err(Error::Config("at least one evaluation seed is required".into()));
        }
        Ok(())
    }
}

/// Apply `f` to every item, in parallel when the `parallel` feature is on.
/// Output order always matches input order.
pub fn par_map<I: Sync, R: Send>(items: &[I], f: impl Fn(&I) -> R + Sync + Send) -> Vec<R> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

fn sample_seed(seed: u64, tag: u64, epoch: u64, s: &SegmentationSample) -> u64 {
    rng::derive(&[seed, tag, epoch, rng::hash_str(s.domain.name()), rng::hash_str(&s.id)])
}

/// A complete inference pipeline bound to the tensors in a store: base model,
/// pattern shift and optional auto-prompting head.
#[derive(Clone, Debug)]
pub struct Segmenter {
    pub model: MiniSam,
    pub shift: PatternShift,
    pub apm: Option<AutoPrompter>,
}

/// Prompts for one forward pass.
#[derive(Clone, Copy, Debug)]
pub enum Prompts<'a> {
    Points(&'a [PointPrompt]),
    Auto,
}

/// Output of [`Segmenter::predict`].
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Row-major foreground probabilities of the primary mask.
    pub probs: Vec<f32>,
    /// Predicted IoU of the primary mask.
    pub iou_pred: f32,
    pub points: Vec<PointPrompt>,
}

impl Segmenter {
    pub fn bind(store: &mut ParamStore<f32>, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            model: MiniSam::bind(store, cfg)?,
            shift: PatternShift::bind(store, cfg)?,
            apm: AutoPrompter::bind(store, cfg)?,
        })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.model.cfg
    }

    /// Build the decode graph. Returns the decoder handles and, in auto mode,
    /// the predicted coordinates.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        emb: &EmbeddingVars,
        prompts: Prompts<'_>,
        use_ips: bool,
    ) -> Result<(DecoderVars, Option<Var>)> {
        let (tokens, coords) = match prompts {
            Prompts::Points(p) => (self.model.encode_points(g, p)?, None),
            Prompts::Auto => {
                let apm = self
                    .apm
                    .as_ref()
                    .ok_or_else(|| Error::Config("no auto-prompting head in this checkpoint".into()))?;
                let coords = apm.forward(g, &emb.levels)?;
                let labels = apm.labels();
                (self.model.prompt.encode(g, coords, &labels)?, Some(coords))
            }
        };
        let pattern = self.shift.pattern_tokens(g, &self.model, emb.grid, use_ips)?;
        let out = self.model.decode(g, emb, pattern, tokens)?;
        Ok((out, coords))
    }

    /// Predict APM points for an embedded image.
    pub fn auto_points(&self, store: &ParamStore<f32>, emb: &ImageEmbedding, setting: PromptSetting) -> Result<Vec<PointPrompt>> {
        let apm = self
            .apm
            .as_ref()
            .ok_or_else(|| Error::Config("no auto-prompting head in this checkpoint".into()))?;
        let mut g = Graph::new(store);
        let vars = emb.to_graph(&mut g)?;
        let coords = apm.forward_for(&mut g, &vars.levels, setting)?;
        Ok(apm.to_points(g.value(coords)))
    }

    /// Primary-mask probabilities for an embedded image.
    pub fn predict_embedded(
        &self,
        store: &ParamStore<f32>,
        emb: &ImageEmbedding,
        prompts: Prompts<'_>,
        use_ips: bool,
    ) -> Result<Prediction> {
        let mut g = Graph::new(store);
        let vars = emb.to_graph(&mut g)?;
        let (out, coords) = self.forward(&mut g, &vars, prompts, use_ips)?;
        let probs = g.sigmoid(out.primary);
        let points = match (prompts, coords, &self.apm) {
            (Prompts::Points(p), _, _) => p.to_vec(),
            (Prompts::Auto, Some(c), Some(apm)) => apm.to_points(g.value(c)),
            _ => Vec::new(),
        };
        Ok(Prediction {
            probs: g.value(probs).to_vec(),
            iou_pred: g.value(out.iou)[0],
            points,
        })
    }

    pub fn predict(&self, store: &ParamStore<f32>, image: &[f32], prompts: Prompts<'_>, use_ips: bool) -> Result<Prediction> {
        let emb = self.model.encode_image(store, image)?;
        self.predict_embedded(store, &emb, prompts, use_ips)
    }

    pub fn embed_all(&self, store: &ParamStore<f32>, data: &[SegmentationSample]) -> Result<Vec<ImageEmbedding>> {
        par_map(data, |s| self.model.encode_image(store, &s.image()))
            .into_iter()
            .collect()
    }
}

fn check_dataset(data: &[SegmentationSample], cfg: &ModelConfig, what: &str) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Input(format!("{what} dataset is empty")));
    }
    if let Some(s) = data.iter().find(|s| s.size != cfg.image_size) {
        return Err(Error::Input(format!(
            "{what} sample {} is {}px, model expects {}px",
            s.id, s.size, cfg.image_size
        )));
    }
    Ok(())
}

/// Evaluation of one prompt source over a dataset, averaged per seed.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    seg: &Segmenter,
    store: &ParamStore<f32>,
    data: &[SegmentationSample],
    embeddings: &[ImageEmbedding],
    source: PromptSource,
    setting: PromptSetting,
    seeds: &[u64],
    use_ips: bool,
) -> Result<DatasetMetrics> {
    check_dataset(data, seg.cfg(), "evaluation")?;
    if embeddings.len() != data.len() {
        return Err(Error::Input("embedding cache does not match dataset".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Config("at least one evaluation seed is required".into()));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let results = par_map(&idx, |&i| -> Result<Option<super::Metrics>> {
            let s = &data[i];
            let pred = match source {
                PromptSource::Gt => {
                    let pts = match sample_gt_points(
                        &s.mask,
                        s.size,
                        s.size,
                        setting.n_pos(),
                        setting.n_neg(),
                        sample_seed(seed, 0xe7a1, 0, s),
                    ) {
                        Ok(p) => p,
                        Err(Error::InsufficientPixels { .. }) => return Ok(None),
                        Err(e) => return Err(e),
                    };
                    seg.predict_embedded(store, &embeddings[i], Prompts::Points(&pts), use_ips)?
                }
                PromptSource::Apm(_) => {
                    let apm = seg
                        .apm
                        .as_ref()
                        .ok_or_else(|| Error::Config("no auto-prompting head in this checkpoint".into()))?;
                    if apm.setting != setting {
                        return Err(Error::Config(format!(
                            "apm head was built for {}, requested {setting}",
                            apm.setting
                        )));
                    }
                    seg.predict_embedded(store, &embeddings[i], Prompts::Auto, use_ips)?
                }
            };
            compute_metrics(&pred.probs, &s.mask).map(Some)
        });
        let mut sum = [0.0f64; 3];
        let mut evaluated = 0;
        let mut skipped = 0;
        for r in results {
            match r? {
                Some(m) => {
                    sum[0] += m.dice;
                    sum[1] += m.iou;
                    sum[2] += m.mae;
                    evaluated += 1;
                }
                None => skipped += 1,
            }
        }
        let n = evaluated.max(1) as f64;
        per_seed.push(SeedMetrics {
            seed,
            mdice: sum[0] / n,
            miou: sum[1] / n,
            mae: sum[2] / n,
            evaluated,
            skipped,
        });
    }
    Ok(DatasetMetrics::from_seeds(per_seed))
}

/// Options for training the base model on the source domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub setting: PromptSetting,
    /// Weight of the predicted-IoU regression term.
    pub iou_weight: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            epochs: 20,
            lr: 1e-3,
            batch_size: 8,
            seed: 7,
            setting: PromptSetting::P5,
            iou_weight: 0.1,
        }
    }
}

/// A trained, fully frozen base model.
#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub store: ParamStore<f32>,
    pub history: Vec<EpochRecord>,
}

fn iou_of_logits(logits: &[f32], gt: &[u8]) -> f64 {
    let mut inter = 0u64;
    let mut union = 0u64;
    for (&l, &g) in logits.iter().zip(gt) {
        let p = l >= 0.0;
        let g = g != 0;
        inter += (p && g) as u64;
        union += (p || g) as u64;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

struct StepOut {
    loss: f64,
    grads: Gradients<f32>,
}

/// Average the batch's gradients and take one Adam step. Samples that
/// could not be prompted are dropped; returns `None` when none remain.
fn apply_batch(
    store: &mut ParamStore<f32>,
    adam: &mut AdamState<f32>,
    outs: Vec<Result<Option<StepOut>>>,
) -> Result<Option<f64>> {
    let mut grads = Gradients::new();
    let mut loss = 0.0;
    let mut n = 0usize;
    for o in outs {
        let Some(o) = o? else { continue };
        if !o.loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss {}", o.loss)));
        }
        loss += o.loss;
        grads.merge(o.grads);
        n += 1;
    }
    if n == 0 {
        return Ok(None);
    }
    store.zero_grad();
    store.accumulate(&grads);
    store.scale_grads(1.0 / n as f32);
    adam_step(store, adam)?;
    Ok(Some(loss / n as f64))
}

/// `Ok(None)` for masks too small to sample the requested prompts.
fn skip_insufficient<T>(r: Result<T>) -> Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::InsufficientPixels { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Half-cosine decay from `base` to zero.
fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    base * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * step as f64 / total as f64))
}

fn shuffled(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(&[seed, 0x5f1e, epoch as u64]));
    order
}

/// Train every base weight on `train` with ground-truth prompts, then freeze
/// the whole store.
pub fn pretrain_base(cfg: &PretrainConfig, train: &[SegmentationSample], val: &[SegmentationSample]) -> Result<PretrainOutcome> {
    cfg.model.validate()?;
    check_dataset(train, &cfg.model, "training")?;
    let mut store = ParamStore::new();
    let model = MiniSam::init(&mut store, &cfg.model, cfg.seed)?;
    let mut adam = AdamState::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let setting = cfg.setting;
    let shift = PatternShift::bind(&mut store, &cfg.model)?;
    let seg = Segmenter {
        model: model.clone(),
        shift,
        apm: None,
    };
    let mut history = Vec::with_capacity(cfg.epochs);
    let per_epoch = train.len().div_ceil(cfg.batch_size.max(1));
    let total_steps = (per_epoch * cfg.epochs).max(1);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let order = shuffled(train.len(), cfg.seed, epoch);
        let mut total = 0.0;
        let mut steps = 0;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            adam.config.lr = cosine_lr(cfg.lr, step, total_steps);
            step += 1;
            let shared = &store;
            let outs = par_map(batch, |&i| -> Result<Option<StepOut>> {
                let s = &train[i];
                let Some(pts) = skip_insufficient(sample_gt_points(
                    &s.mask,
                    s.size,
                    s.size,
                    setting.n_pos(),
                    setting.n_neg(),
                    sample_seed(cfg.seed, 0x9e7a, epoch as u64, s),
                ))?
                else {
                    return Ok(None);
                };
                let mut g = Graph::new(shared);
                let emb = model.embed(&mut g, &s.image())?;
                let tokens = model.encode_points(&mut g, &pts)?;
                let pattern = seg.shift.pattern_tokens(&mut g, &model, emb.grid, false)?;
                let out = model.decode(&mut g, &emb, pattern, tokens)?;
                let seg_l = seg_loss(&mut g, out.primary, &s.mask)?;
                let target = iou_of_logits(g.value(out.primary), &s.mask);
                let pred = g.slice(out.iou, Axis::Cols, 0, 1)?;
                let t = g.constant(&[1, 1], vec![target as f32])?;
                let diff = g.sub(pred, t)?;
                let sq = g.mul(diff, diff)?;
                let sq = g.reshape(sq, &[1])?;
                let aux = g.scale(sq, cfg.iou_weight);
                let loss = g.add(seg_l, aux)?;
                Ok(Some(StepOut {
                    loss: g.value(loss)[0] as f64,
                    grads: g.backward(loss)?,
                }))
            });
            if let Some(l) = apply_batch(&mut store, &mut adam, outs)? {
                total += l;
                steps += 1;
            }
        }
        let val_mdice = if val.is_empty() {
            None
        } else {
            let embs = seg.embed_all(&store, val)?;
            let m = evaluate(&seg, &store, val, &embs, PromptSource::Gt, setting, &[cfg.seed], false)?;
            Some(m.mean.mdice)
        };
        history.push(EpochRecord {
            epoch: epoch + 1,
            steps,
            train_loss: total / steps.max(1) as f64,
            val_mdice,
        });
    }
    store.zero_grad();
    store.freeze_all();
    Ok(PretrainOutcome { store, history })
}

/// An adapted model: the base store plus trained adaptation tensors.
#[derive(Clone, Debug)]
pub struct Adapted {
    pub store: ParamStore<f32>,
    pub segmenter: Segmenter,
    pub history: Vec<EpochRecord>,
    pub frozen_hash: [u8; 32],
    pub trainable_params: usize,
}

/// Attach the run's adaptation modules to a copy of a frozen base.
pub fn prepare_adaptation(run: &RunConfig, base: &ParamStore<f32>) -> Result<(ParamStore<f32>, Segmenter)> {
    run.validate()?;
    if let Some((_, name, _)) = base.iter().find(|(_, _, t)| !t.is_frozen()) {
        return Err(Error::Config(format!("base tensor {name} is not frozen")));
    }
    let mut store = base.clone();
    let model = MiniSam::bind(&mut store, &run.model)?;
    let shift = PatternShift::attach(&mut store, &run.model, run.ips_variant, run.seed)?;
    let apm = match run.prompts {
        PromptSource::Gt => None,
        PromptSource::Apm(v) => Some(AutoPrompter::attach(&mut store, &run.model, v, run.train_setting, run.seed)?),
    };
    Ok((store, Segmenter { model, shift, apm }))
}

/// Train the run's adaptation tensors on top of a frozen base. The base's
/// frozen-content hash is checked after every epoch.
pub fn train_adaptation(
    run: &RunConfig,
    base: &ParamStore<f32>,
    train: &[SegmentationSample],
    val: &[SegmentationSample],
) -> Result<Adapted> {
    check_dataset(train, &run.model, "training")?;
    let (mut store, seg) = prepare_adaptation(run, base)?;
    let expected = store.frozen_hash();
    if run.ips_variant != IpsVariant::MaskTokens && expected != base.frozen_hash() {
        return Err(Error::FrozenHashViolation {
            expected: hex::encode(base.frozen_hash()),
            found: hex::encode(expected),
        });
    }
    let trainable = store.num_trainable();
    let mut history = Vec::new();
    if trainable == 0 {
        return Ok(Adapted {
            store,
            segmenter: seg,
            history,
            frozen_hash: expected,
            trainable_params: 0,
        });
    }
    let embs = seg.embed_all(&store, train)?;
    let val_embs = seg.embed_all(&store, val)?;
    let mut adam = AdamState::new(AdamConfig {
        lr: run.lr,
        ..AdamConfig::default()
    });
    let setting = run.train_setting;
    let mut steps_done = 0usize;
    'epochs: for epoch in 0..run.epochs {
        let order = shuffled(train.len(), run.seed, epoch);
        let mut total = 0.0;
        let mut steps = 0;
        for batch in order.chunks(run.batch_size) {
            if run.max_steps.is_some_and(|m| steps_done >= m) {
                break;
            }
            let shared = &store;
            let outs = par_map(batch, |&i| -> Result<Option<StepOut>> {
                let s = &train[i];
                let mut g = Graph::new(shared);
                let emb = embs[i].to_graph(&mut g)?;
                let pts;
                let prompts = match run.prompts {
                    PromptSource::Gt => {
                        let Some(p) = skip_insufficient(sample_gt_points(
                            &s.mask,
                            s.size,
                            s.size,
                            setting.n_pos(),
                            setting.n_neg(),
                            sample_seed(run.seed, 0xada9, epoch as u64, s),
                        ))?
                        else {
                            return Ok(None);
                        };
                        pts = p;
                        Prompts::Points(&pts)
                    }
                    PromptSource::Apm(_) => Prompts::Auto,
                };
                let (out, _) = seg.forward(&mut g, &emb, prompts, true)?;
                let loss = seg_loss(&mut g, out.primary, &s.mask)?;
                Ok(Some(StepOut {
                    loss: g.value(loss)[0] as f64,
                    grads: g.backward(loss)?,
                }))
            });
            if let Some(l) = apply_batch(&mut store, &mut adam, outs)? {
                total += l;
                steps += 1;
                steps_done += 1;
            }
        }
        let found = store.frozen_hash();
        if found != expected {
            return Err(Error::FrozenHashViolation {
                expected: hex::encode(expected),
                found: hex::encode(found),
            });
        }
        let val_mdice = if val.is_empty() {
            None
        } else {
            let m = evaluate(&seg, &store, val, &val_embs, run.prompts, setting, &[run.seed], true)?;
            Some(m.mean.mdice)
        };
        history.push(EpochRecord {
            epoch: epoch + 1,
            steps,
            train_loss: total / steps.max(1) as f64,
            val_mdice,
        });
        if run.max_steps.is_some_and(|m| steps_done >= m) {
            break 'epochs;
        }
    }
    store.zero_grad();
    Ok(Adapted {
        store,
        segmenter: seg,
        history,
        frozen_hash: expected,
        trainable_params: trainable,
    })
}

/// Train (if needed) and evaluate one run, producing its report.
pub fn run_experiment(
    run: &RunConfig,
    base: &ParamStore<f32>,
    train: &[SegmentationSample],
    val: &[SegmentationSample],
    test: &[(String, Vec<SegmentationSample>)],
) -> Result<(Adapted, MetricsReport)> {
    let adapted = train_adaptation(run, base, train, val)?;
    let report = report_for(run, &adapted, test)?;
    Ok((adapted, report))
}

/// Evaluate an adapted model on named test sets.
pub fn report_for(run: &RunConfig, adapted: &Adapted, test: &[(String, Vec<SegmentationSample>)]) -> Result<MetricsReport> {
    let mut metrics = BTreeMap::new();
    for (name, data) in test {
        let embs = adapted.segmenter.embed_all(&adapted.store, data)?;
        let m = evaluate(
            &adapted.segmenter,
            &adapted.store,
            data,
            &embs,
            run.prompts,
            run.test_setting(),
            &run.eval_seeds,
            true,
        )?;
        metrics.insert(name.clone(), m);
    }
    Ok(MetricsReport {
        config: run.clone(),
        frozen_hash: hex::encode(adapted.frozen_hash),
        trainable_params: adapted.trainable_params,
        metrics,
        history: adapted.history.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: IpsVariant,
    pub trainable_params: usize,
    pub trainable_params_sam_scale: usize,
    pub mdice_per_seed: Vec<f64>,
    pub mean_mdice: f64,
    pub std_mdice: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub setting: PromptSetting,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, v: IpsVariant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }
}

/// Train and evaluate every pattern-shift variant under one budget. Each seed
/// is used both as the training seed and the evaluation prompt seed.
pub fn run_ablation(
    template: &RunConfig,
    base: &ParamStore<f32>,
    train: &[SegmentationSample],
    val: &[SegmentationSample],
    test: &[SegmentationSample],
    seeds: &[u64],
) -> Result<AblationTable> {
    let sam = {
        let mut c = crate::model::ModelConfig::sam_scale();
        c.pae_hidden = crate::pattern::solve_pae_hidden(&c, crate::pattern::PAE_PARAM_TARGET);
        c
    };
    let mut rows = Vec::new();
    for variant in IpsVariant::ALL {
        let mut per = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let run = RunConfig {
                ips_variant: variant,
                prompts: PromptSource::Gt,
                seed,
                eval_seeds: vec![seed],
                ..template.clone()
            };
            let (_, report) = run_experiment(&run, base, train, val, &[("test".into(), test.to_vec())])?;
            per.push(report.metrics["test"].mean.mdice);
        }
        let dm = DatasetMetrics::from_seeds(
            per.iter()
                .zip(seeds)
                .map(|(&d, &seed)| SeedMetrics {
                    seed,
                    mdice: d,
                    miou: 0.0,
                    mae: 0.0,
                    evaluated: 0,
                    skipped: 0,
                })
                .collect(),
        );
        rows.push(AblationRow {
            variant,
            trainable_params: trainable_params(variant, &template.model),
            trainable_params_sam_scale: trainable_params(variant, &sam),
            mdice_per_seed: per,
            mean_mdice: dm.mean.mdice,
            std_mdice: dm.std.mdice,
        });
    }
    Ok(AblationTable {
        setting: template.train_setting,
        seeds: seeds.to_vec(),
        rows,
    })
}

/// One domain's split data.
#[derive(Clone, Debug)]
pub struct DomainData {
    pub name: String,
    pub train: Vec<SegmentationSample>,
    pub val: Vec<SegmentationSample>,
    pub test: Vec<SegmentationSample>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultimodalReport {
    pub joint: BTreeMap<String, DatasetMetrics>,
    pub single: BTreeMap<String, DatasetMetrics>,
    /// `|joint - single|` mean mDice per domain.
    pub gap: BTreeMap<String, f64>,
}

/// Train one model jointly on several domains and one per domain, and
/// evaluate each on every domain's test split.
pub fn run_multimodality(run: &RunConfig, base: &ParamStore<f32>, domains: &[DomainData]) -> Result<MultimodalReport> {
    let joint_train: Vec<_> = domains.iter().flat_map(|d| d.train.iter().cloned()).collect();
    let joint_val: Vec<_> = domains.iter().flat_map(|d| d.val.iter().cloned()).collect();
    let tests: Vec<(String, Vec<SegmentationSample>)> =
        domains.iter().map(|d| (d.name.clone(), d.test.clone())).collect();
    let (_, joint) = run_experiment(run, base, &joint_train, &joint_val, &tests)?;
    let mut single = BTreeMap::new();
    for d in domains {
        let (_, r) = run_experiment(run, base, &d.train, &d.val, &[(d.name.clone(), d.test.clone())])?;
        single.insert(d.name.clone(), r.metrics[&d.name].clone());
    }
    let gap = domains
        .iter()
        .map(|d| {
            let j = joint.metrics[&d.name].mean.mdice;
            let s = single[&d.name].mean.mdice;
            (d.name.clone(), libm::fabs(j - s))
        })
        .collect();
    Ok(MultimodalReport {
        joint: joint.metrics,
        single,
        gap,
    })
}
