//! AdamW with warmup + cosine decay, deterministic batching over replayable
//! batch graphs, evaluation, few-shot episodes and the teacher-student task.

use crate::baselines::{build_adaptation, AdaptationSpec, DenseRepr, Method, Model};
use crate::error::{Error, Result};
use crate::format::Archive;
use crate::graph::{Graph, NodeId};
use crate::seed;
use crate::tasks::{self, Dataset, Episode, IouCounts, Sample, TaskKind};
use crate::tensor::{argmax, Tensor};
use crate::vit::{self, VitWeights};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

fn default_lr() -> f64 {
    0.001
}
fn default_wd() -> f64 {
    1e-4
}
fn default_epochs() -> usize {
    100
}
fn default_warmup() -> usize {
    10
}
fn default_batch() -> usize {
    64
}
fn default_betas() -> (f64, f64) {
    (0.9, 0.999)
}
fn default_eps() -> f64 {
    1e-8
}
fn default_inner() -> usize {
    100
}

/// Learning-rate grid of the reference hyperparameter search.
pub const LR_GRID: [f64; 4] = [0.005, 0.001, 0.0005, 0.0001];
pub const WD_GRID: [f64; 2] = [0.0001, 0.001];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_warmup")]
    pub warmup_epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_betas")]
    pub betas: (f64, f64),
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub seed: u64,
    /// Global gradient-norm clip.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip: Option<f64>,
    /// Full-batch steps per segmentation episode.
    #[serde(default = "default_inner")]
    pub inner_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields default")
    }
}

impl TrainConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.lr.is_finite() && self.lr > 0.0) {
            v.push(format!("train.lr: {} must be > 0", self.lr));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            v.push(format!("train.weight_decay: {} must be ≥ 0", self.weight_decay));
        }
        if self.warmup_epochs > self.epochs {
            v.push(format!("train.warmup_epochs: {} exceeds epochs = {}", self.warmup_epochs, self.epochs));
        }
        if self.batch_size == 0 {
            v.push("train.batch_size: must be ≥ 1".into());
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            v.push(format!("train.betas: ({b1}, {b2}) must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            v.push(format!("train.eps: {} must be > 0", self.eps));
        }
        if let Some(c) = self.clip {
            if !(c > 0.0) {
                v.push(format!("train.clip: {c} must be > 0"));
            }
        }
        if self.inner_steps == 0 {
            v.push("train.inner_steps: must be ≥ 1".into());
        }
        v
    }
}

// -------------------------------------------------------------- optimizer

#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState {
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
    pub t: u64,
}

/// Whether weight decay applies: not to biases or LayerNorm parameters.
pub fn decays(name: &str) -> bool {
    !(vit::is_bias_name(name) || name.ends_with(".g"))
}

/// One AdamW update with decoupled weight decay:
/// `p ← p − lr_t·(m̂/(√v̂+ε) + wd·p)`.
pub fn adamw_step(
    params: &mut Archive,
    grads: &Archive,
    state: &mut OptimizerState,
    lr_t: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads.get(name).ok_or_else(|| Error::contract(format!("no gradient for `{name}`")))?;
        if g.dims() != p.dims() {
            return Err(Error::shape(name.clone(), format!("gradient {:?} vs parameter {:?}", g.dims(), p.dims())));
        }
        if !g.is_finite() {
            return Err(Error::numeric(name.clone(), "non-finite gradient"));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = cfg.betas;
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    for (name, p) in params.iter_mut() {
        let g = grads[name].data();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let wd = if decays(name) { cfg.weight_decay } else { 0.0 };
        for (i, pv) in p.data_mut().iter_mut().enumerate() {
            let gi = g[i] as f64;
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let (mh, vh) = (m[i] / c1, v[i] / c2);
            let x = *pv as f64;
            *pv = (x - lr_t * (mh / (vh.sqrt() + cfg.eps) + wd * x)) as f32;
        }
    }
    Ok(())
}

/// Linear warmup from 0 to `lr` over `warmup_epochs`, then cosine decay to 0
/// at `epochs`. `epoch` is fractional.
pub fn lr_schedule(epoch: f64, cfg: &TrainConfig) -> f64 {
    let (w, e) = (cfg.warmup_epochs as f64, cfg.epochs as f64);
    if epoch < w {
        return cfg.lr * epoch / w;
    }
    if e <= w {
        return cfg.lr;
    }
    let progress = ((epoch - w) / (e - w)).clamp(0.0, 1.0);
    cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

fn clip_grads(grads: &mut Archive, max_norm: f64) {
    let norm = grads.values().map(Tensor::sum_sq).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
}

// ----------------------------------------------------------- batch graphs

/// How samples are read out and scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskSetup {
    pub kind: TaskKind,
    /// Square input side every image is resized to.
    pub side: usize,
    pub dense: DenseRepr,
}

/// A graph over `slots` images that is rebuilt once and replayed per batch.
struct BatchGraph {
    g: Graph,
    loss: NodeId,
    outputs: Vec<NodeId>,
    slots: usize,
}

impl BatchGraph {
    fn build(model: &Model, setup: TaskSetup, slots: usize) -> Result<Self> {
        let cfg = model.config();
        let mut g = Graph::new();
        let nodes = model.register(&mut g)?;
        let blank = Tensor::zeros(&[cfg.channels, setup.side, setup.side]);
        let mut outputs = Vec::with_capacity(slots);
        let mut rows = Vec::with_capacity(slots);
        for i in 0..slots {
            let trace = model.encode(&mut g, &nodes, &blank, &slot_name(i))?;
            match setup.kind {
                TaskKind::Classification => {
                    let y = model.representation(&mut g, &nodes, &trace)?;
                    rows.push(g.reshape(y, &[1, cfg.d])?);
                }
                TaskKind::Segmentation => {
                    let dense = model.dense(&mut g, &trace, setup.dense)?;
                    let logits = tasks::segment_logits(&mut g, &nodes.head, dense, setup.side, setup.side)?;
                    outputs.push(logits);
                    rows.push(tasks::pixel_rows(&mut g, logits)?);
                }
            }
        }
        let stacked = if rows.len() == 1 { rows[0] } else { g.concat(&rows, 0)? };
        let loss = match setup.kind {
            TaskKind::Classification => {
                let logits = crate::baselines::apply_head(&mut g, &nodes.head, stacked)?;
                outputs.push(logits);
                g.cross_entropy(logits, &vec![0; slots])?
            }
            TaskKind::Segmentation => {
                let n = g.dims(stacked)[0];
                g.cross_entropy(stacked, &vec![0; n])?
            }
        };
        Ok(BatchGraph { g, loss, outputs, slots })
    }

    /// Binds the model's current trainables and the batch, then recomputes.
    fn load(&mut self, model: &Model, setup: TaskSetup, batch: &[&Sample]) -> Result<()> {
        debug_assert_eq!(batch.len(), self.slots);
        for name in model.trainable_names() {
            self.g.bind(name, model.get(name).expect("trainable tensor exists"))?;
        }
        let mut targets = Vec::new();
        for (i, s) in batch.iter().enumerate() {
            let image = tasks::resize_image(&s.image, setup.side)?;
            let patches = vit::extract_patches(&image, model.config().patch_size)?;
            self.g.bind(&slot_name(i), &patches)?;
            match setup.kind {
                TaskKind::Classification => targets.push(s.label),
                TaskKind::Segmentation => {
                    let mask = s.mask.as_ref().ok_or_else(|| Error::contract("segmentation sample without a mask"))?;
                    targets.extend(foreground(&tasks::resize_mask(mask, setup.side)?));
                }
            }
        }
        self.g.set_targets(self.loss, &targets)?;
        self.g.recompute()
    }

    fn loss(&self) -> f64 {
        self.g.scalar(self.loss)
    }

    /// Adds this batch's correct-count (classification) or IoU counts.
    fn score(&self, setup: TaskSetup, batch: &[&Sample], acc: &mut Score) -> Result<()> {
        match setup.kind {
            TaskKind::Classification => {
                let logits = self.g.value(self.outputs[0]);
                for (i, s) in batch.iter().enumerate() {
                    acc.correct += (argmax(logits.row(i)) == s.label) as u64;
                    acc.seen += 1;
                }
            }
            TaskKind::Segmentation => {
                for (i, s) in batch.iter().enumerate() {
                    let pred = tasks::predict_mask(&self.g.value(self.outputs[i]));
                    let truth = tasks::resize_mask(s.mask.as_ref().expect("checked in load"), setup.side)?;
                    let truth = Tensor::new(truth.dims().to_vec(), foreground(&truth).into_iter().map(|v| v as f32).collect())?;
                    acc.iou.add(&pred, &truth)?;
                    acc.seen += 1;
                }
            }
        }
        Ok(())
    }
}

/// Binary targets from a label map: every object label is foreground.
fn foreground(mask: &Tensor) -> Vec<usize> {
    mask.data().iter().map(|&v| (v != 0.0) as usize).collect()
}

fn slot_name(i: usize) -> String {
    format!("image{i}")
}

#[derive(Debug, Clone)]
struct Score {
    correct: u64,
    seen: u64,
    iou: IouCounts,
    loss_sum: f64,
}

impl Score {
    fn new() -> Self {
        Score { correct: 0, seen: 0, iou: IouCounts::new(2), loss_sum: 0.0 }
    }

    fn metric(&self, kind: TaskKind) -> f64 {
        match kind {
            TaskKind::Classification if self.seen > 0 => self.correct as f64 / self.seen as f64,
            TaskKind::Classification => 0.0,
            TaskKind::Segmentation => self.iou.miou() as f64,
        }
    }
}

/// Caches one batch graph per batch length.
struct Graphs<'a> {
    setup: TaskSetup,
    model_template: &'a Model,
    by_len: BTreeMap<usize, BatchGraph>,
}

impl<'a> Graphs<'a> {
    fn new(model: &'a Model, setup: TaskSetup) -> Self {
        Graphs { setup, model_template: model, by_len: BTreeMap::new() }
    }

    fn get(&mut self, len: usize) -> Result<&mut BatchGraph> {
        if !self.by_len.contains_key(&len) {
            let bg = BatchGraph::build(self.model_template, self.setup, len)?;
            self.by_len.insert(len, bg);
        }
        Ok(self.by_len.get_mut(&len).expect("inserted"))
    }
}

// ------------------------------------------------------------ train / eval

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub metric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub records: Vec<MetricsRecord>,
    pub steps: usize,
    /// Loss of every step, in order.
    pub step_losses: Vec<f64>,
}

fn check_setup(model: &Model, data: &Dataset, setup: TaskSetup) -> Result<()> {
    data.check()?;
    if data.is_empty() {
        return Err(Error::contract("empty dataset"));
    }
    if data.kind != setup.kind {
        return Err(Error::contract(format!("{:?} dataset for a {:?} task", data.kind, setup.kind)));
    }
    let classes = match setup.kind {
        TaskKind::Classification => data.num_classes,
        TaskKind::Segmentation => 2,
    };
    if classes != model.num_classes {
        return Err(Error::contract(format!("dataset has {classes} classes, head has {}", model.num_classes)));
    }
    let p = model.config().patch_size;
    if !setup.side.is_multiple_of(p) || setup.side < p {
        return Err(Error::contract(format!("input side {} is not a multiple of patch size {p}", setup.side)));
    }
    if let Some(s) = data.samples.iter().find(|s| s.image.dims()[0] != model.config().channels) {
        return Err(Error::shape("dataset", format!("image {:?} for {} channels", s.image.dims(), model.config().channels)));
    }
    Ok(())
}

/// Trains `model`'s trainable tensors on `train`. Per epoch it logs the mean
/// training loss and the running training metric, plus a `val` record when
/// `val` is given. Non-trainable tensors are hash-checked every epoch.
///
/// On a numeric failure the model keeps its last good values.
pub fn fit(
    model: &mut Model,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    setup: TaskSetup,
    mut on_record: impl FnMut(&MetricsRecord) -> Result<()>,
) -> Result<FitReport> {
    let v = cfg.violations();
    if !v.is_empty() {
        return Err(Error::Config(v));
    }
    check_setup(model, train, setup)?;
    if let Some(val) = val {
        check_setup(model, val, setup)?;
    }
    let frozen = model.frozen_hash();
    let template = model.clone();
    let mut graphs = Graphs::new(&template, setup);
    let mut state = OptimizerState::default();
    let n = train.len();
    let per_epoch = n.div_ceil(cfg.batch_size);
    let mut report = FitReport { records: Vec::new(), steps: 0, step_losses: Vec::new() };
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seed::rng_for(cfg.seed, &format!("shuffle.{epoch}")));
        let mut score = Score::new();
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &train.samples[i]).collect();
            let bg = graphs.get(batch.len())?;
            bg.load(model, setup, &batch)?;
            let loss = bg.loss();
            bg.score(setup, &batch, &mut score)?;
            score.loss_sum += loss * batch.len() as f64;
            let mut grads = bg.g.gradient_all(bg.loss)?;
            if let Some(c) = cfg.clip {
                clip_grads(&mut grads, c);
            }
            let mut params = model.trainable_values();
            let lr_t = lr_schedule(epoch as f64 + (b as f64 + 0.5) / per_epoch as f64, cfg);
            adamw_step(&mut params, &grads, &mut state, lr_t, cfg)?;
            for (name, t) in params {
                model.set(&name, t)?;
            }
            report.steps += 1;
            report.step_losses.push(loss);
        }
        if model.frozen_hash() != frozen {
            return Err(Error::contract("a frozen tensor changed during training"));
        }
        let rec = MetricsRecord {
            epoch,
            split: "train".into(),
            loss: score.loss_sum / n as f64,
            metric: score.metric(setup.kind),
        };
        on_record(&rec)?;
        report.records.push(rec);
        if let Some(val) = val {
            let mut rec = evaluate(model, val, setup, cfg.batch_size)?;
            rec.epoch = epoch;
            on_record(&rec)?;
            report.records.push(rec);
        }
    }
    Ok(report)
}

/// Mean loss and accuracy (classification) or dataset-level mIoU
/// (segmentation). Does not modify the model.
pub fn evaluate(model: &Model, data: &Dataset, setup: TaskSetup, batch_size: usize) -> Result<MetricsRecord> {
    check_setup(model, data, setup)?;
    let mut graphs = Graphs::new(model, setup);
    let mut score = Score::new();
    let all: Vec<&Sample> = data.samples.iter().collect();
    for batch in all.chunks(batch_size.max(1)) {
        let bg = graphs.get(batch.len())?;
        bg.load(model, setup, batch)?;
        score.loss_sum += bg.loss() * batch.len() as f64;
        bg.score(setup, batch, &mut score)?;
    }
    Ok(MetricsRecord {
        epoch: 0,
        split: "eval".into(),
        loss: score.loss_sum / data.len() as f64,
        metric: score.metric(setup.kind),
    })
}

/// Classification logits `[C]` for every sample.
pub fn predict_logits(model: &Model, data: &Dataset, setup: TaskSetup, batch_size: usize) -> Result<Vec<Tensor>> {
    check_setup(model, data, setup)?;
    if setup.kind != TaskKind::Classification {
        return Err(Error::contract("class logits need a classification task"));
    }
    let mut graphs = Graphs::new(model, setup);
    let mut out = Vec::with_capacity(data.len());
    let all: Vec<&Sample> = data.samples.iter().collect();
    for batch in all.chunks(batch_size.max(1)) {
        let bg = graphs.get(batch.len())?;
        bg.load(model, setup, batch)?;
        let logits = bg.g.value(bg.outputs[0]);
        out.extend((0..batch.len()).map(|i| Tensor::from_vec(logits.row(i).to_vec())));
    }
    Ok(out)
}

/// Class predictions for every sample.
pub fn predict(model: &Model, data: &Dataset, setup: TaskSetup, batch_size: usize) -> Result<Vec<usize>> {
    Ok(predict_logits(model, data, setup, batch_size)?.iter().map(|l| argmax(l.data())).collect())
}

// --------------------------------------------------------------- episodes

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub episode: usize,
    pub category: usize,
    pub seed: u64,
    pub miou: f64,
    #[serde(skip)]
    pub counts: Option<IouCounts>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub episodes: usize,
    /// Mean of per-episode mIoU (headline).
    pub mean_miou: f64,
    /// mIoU from counts pooled over all query images.
    pub pooled_miou: f64,
}

/// Trains a fresh adaptation (C = 2 head from scratch) on the episode's
/// support set with `inner_steps` full-batch steps at constant `lr`, then
/// scores the query.
pub fn run_episode(
    weights: &VitWeights,
    spec: &AdaptationSpec,
    cfg: &TrainConfig,
    setup: TaskSetup,
    episode: &Episode,
    index: usize,
) -> Result<EpisodeResult> {
    let mut model = build_adaptation(spec, weights.clone(), 2, seed::derive(episode.seed, "episode.model"))?;
    let support: Vec<&Sample> = episode.support.iter().collect();
    let mut bg = BatchGraph::build(&model, setup, support.len())?;
    let mut state = OptimizerState::default();
    for _ in 0..cfg.inner_steps {
        bg.load(&model, setup, &support)?;
        let mut grads = bg.g.gradient_all(bg.loss)?;
        if let Some(c) = cfg.clip {
            clip_grads(&mut grads, c);
        }
        let mut params = model.trainable_values();
        adamw_step(&mut params, &grads, &mut state, cfg.lr, cfg)?;
        for (name, t) in params {
            model.set(&name, t)?;
        }
    }
    let mut qg = BatchGraph::build(&model, setup, 1)?;
    let query = [&episode.query];
    qg.load(&model, setup, &query)?;
    let mut score = Score::new();
    qg.score(setup, &query, &mut score)?;
    Ok(EpisodeResult {
        episode: index,
        category: episode.category,
        seed: episode.seed,
        miou: score.iou.miou() as f64,
        counts: Some(score.iou),
    })
}

/// Runs `count` seeded episodes, cycling through the categories that hold
/// enough images. Episodes run on a pool of `threads` workers; results are
/// returned in episode order.
pub fn run_episodes(
    weights: &VitWeights,
    spec: &AdaptationSpec,
    cfg: &TrainConfig,
    setup: TaskSetup,
    data: &Dataset,
    count: usize,
    threads: usize,
) -> Result<(Vec<EpisodeResult>, EpisodeSummary)> {
    let categories: Vec<usize> =
        (0..data.num_classes).filter(|&c| data.indices_of(c).len() > tasks::SUPPORT).collect();
    if categories.is_empty() {
        return Err(Error::contract("no category has enough images for an episode"));
    }
    let job = |i: usize| -> Result<EpisodeResult> {
        let category = categories[i % categories.len()];
        let ep = tasks::sample_episode(data, category, seed::derive(cfg.seed, &format!("episode{i}")))?;
        run_episode(weights, spec, cfg, setup, &ep, i)
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::contract(format!("worker pool: {e}")))?;
    let results: Vec<EpisodeResult> =
        pool.install(|| (0..count).into_par_iter().map(job).collect::<Result<Vec<_>>>())?;
    let mut pooled = IouCounts::new(2);
    for r in &results {
        pooled.merge(r.counts.as_ref().expect("set by run_episode"));
    }
    let mean = if results.is_empty() { 0.0 } else { results.iter().map(|r| r.miou).sum::<f64>() / results.len() as f64 };
    let summary = EpisodeSummary { episodes: results.len(), mean_miou: mean, pooled_miou: pooled.miou() as f64 };
    Ok((results, summary))
}

// --------------------------------------------------------- teacher-student

/// Default std of the teacher's random prompts, residuals and head.
pub const TEACHER_SCALE: f32 = 1.0;

/// Random colour mosaic: constant `block x block` tiles.
pub fn mosaic(channels: usize, side: usize, block: usize, rng: &mut seed::Rng) -> Tensor {
    let tiles = side.div_ceil(block);
    let colours = Tensor::uniform(&[channels, tiles, tiles], 0.0, 1.0, rng);
    let mut data = Vec::with_capacity(channels * side * side);
    for c in 0..channels {
        for y in 0..side {
            for x in 0..side {
                data.push(colours.data()[(c * tiles + y / block) * tiles + x / block]);
            }
        }
    }
    Tensor::new(vec![channels, side, side], data).expect("dims")
}

/// Random-mosaic images labelled by a hidden EXPRES teacher on the frozen
/// backbone. Teacher prompts, residuals and head weights are drawn with std
/// `scale`; the head bias is then set to minus the mean logit over
/// the generated images so that every class is reachable. The label is the
/// teacher's argmax.
pub fn teacher_student_data(
    weights: &VitWeights,
    teacher: &AdaptationSpec,
    classes: usize,
    count: usize,
    scale: f32,
    seed: u64,
) -> Result<(Model, Dataset)> {
    if teacher.method != Method::Expres {
        return Err(Error::contract("the teacher is an expres model"));
    }
    if count == 0 {
        return Err(Error::contract("teacher-student task needs at least one image"));
    }
    let cfg = weights.config().clone();
    let mut model = build_adaptation(teacher, weights.clone(), classes, seed::derive(seed, "teacher.init"))?;
    let mut rng = seed::rng_for(seed, "teacher.weights");
    for name in model.trainable_names().clone() {
        let dims = model.get(&name).expect("exists").dims().to_vec();
        let t = if name == "head.b" { Tensor::zeros(&dims) } else { Tensor::trunc_normal(&dims, scale, &mut rng) };
        model.set(&name, t)?;
    }
    let mut img_rng = seed::rng_for(seed, "teacher.images");
    let side = cfg.image_size;
    let samples: Vec<Sample> = (0..count)
        .map(|_| Sample { image: mosaic(cfg.channels, side, cfg.patch_size.div_ceil(2), &mut img_rng), label: 0, mask: None })
        .collect();
    let mut data = Dataset { kind: TaskKind::Classification, num_classes: classes, samples };
    let setup = TaskSetup { kind: TaskKind::Classification, side, dense: DenseRepr::Keys };
    let logits = predict_logits(&model, &data, setup, 64)?;
    let mut mean = vec![0.0f64; classes];
    for l in &logits {
        for (m, &v) in mean.iter_mut().zip(l.data()) {
            *m += v as f64 / count as f64;
        }
    }
    let bias = Tensor::from_vec(mean.iter().map(|&m| -m as f32).collect());
    for (s, l) in data.samples.iter_mut().zip(&logits) {
        let centred: Vec<f32> = l.data().iter().zip(bias.data()).map(|(a, b)| a + b).collect();
        s.label = argmax(&centred);
    }
    model.set("head.b", bias)?;
    Ok((model, data))
}
