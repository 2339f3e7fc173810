//! Classification and few-shot segmentation: heads, losses, metrics,
//! episodes and synthetic data.

use crate::baselines::{apply_head, DenseRepr, HeadNodes, Model};
use crate::error::{Error, Result};
use crate::format;
use crate::graph::{self, Graph, NodeId};
use crate::seed;
use crate::tensor::{argmax, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Segmentation,
}

/// One image in `[0, 1]`, its class (or category), and for segmentation a
/// per-pixel label map: 0 for background, `category + 1` on objects.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub label: usize,
    pub mask: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub kind: TaskKind,
    pub num_classes: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn image_size(&self) -> Option<usize> {
        self.samples.first().map(|s| s.image.dims()[1])
    }

    pub fn check(&self) -> Result<()> {
        if self.num_classes < 1 {
            return Err(Error::contract("dataset declares no classes"));
        }
        for (i, s) in self.samples.iter().enumerate() {
            let d = s.image.dims();
            if d.len() != 3 || d[1] != d[2] {
                return Err(Error::shape(format!("sample {i}"), format!("image {d:?} is not [C, S, S]")));
            }
            if s.image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::format(format!("sample {i}: pixel outside [0, 1]")));
            }
            if s.label >= self.num_classes {
                return Err(Error::format(format!("sample {i}: label {} outside 0..{}", s.label, self.num_classes)));
            }
            match (&s.mask, self.kind) {
                (Some(m), TaskKind::Segmentation) => {
                    if m.dims() != &d[1..] {
                        return Err(Error::shape(format!("sample {i}"), format!("mask {:?} vs image {d:?}", m.dims())));
                    }
                }
                (None, TaskKind::Segmentation) => {
                    return Err(Error::format(format!("sample {i}: segmentation sample without a mask")))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn indices_of(&self, label: usize) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.samples[i].label == label).collect()
    }

    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update([self.kind as u8]);
        h.update((self.num_classes as u64).to_le_bytes());
        for s in &self.samples {
            h.update((s.label as u64).to_le_bytes());
            s.image.hash_into(&mut h);
            if let Some(m) = &s.mask {
                m.hash_into(&mut h);
            }
        }
        hex::encode(h.finalize())
    }
}

// ------------------------------------------------------------------ heads

/// `logits = yᵀW + b` for `y: [d]`, `W: [d, C]`, `b: [C]`.
pub fn classify(y: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (d, c) = match w.dims() {
        [d, c] => (*d, *c),
        other => return Err(Error::shape("classify", format!("W {other:?} is not a matrix"))),
    };
    if y.len() != d || b.dims() != [c] {
        return Err(Error::shape("classify", format!("y {:?}, W {:?}, b {:?}", y.dims(), w.dims(), b.dims())));
    }
    let mut out = Vec::with_capacity(c);
    for j in 0..c {
        let mut acc = 0.0f64;
        for i in 0..d {
            acc += y.data()[i] as f64 * w.data()[i * c + j] as f64;
        }
        out.push((acc + b.data()[j] as f64) as f32);
    }
    Ok(Tensor::from_vec(out))
}

fn square_side(n: usize) -> Option<usize> {
    let s = (n as f64).sqrt().round() as usize;
    (s * s == n).then_some(s)
}

/// Per-patch logits reshaped to the token grid and bilinearly upsampled:
/// `[N, d] → [N, C] → [C, g, g] → [C, h, w]`.
pub fn segment_logits(g: &mut Graph, head: &HeadNodes, dense: NodeId, out_h: usize, out_w: usize) -> Result<NodeId> {
    let n = g.dims(dense)[0];
    let side = square_side(n).ok_or_else(|| Error::contract(format!("{n} patch tokens do not form a square grid")))?;
    let per_patch = apply_head(g, head, dense)?;
    let c = g.dims(per_patch)[1];
    g.set_scope("segment");
    let planes = g.transpose(per_patch)?;
    let planes = g.reshape(planes, &[c, side, side])?;
    g.resize(planes, out_h, out_w)
}

/// Integer targets from a label map, checked against `0..classes`.
pub fn mask_targets(mask: &Tensor, classes: usize) -> Result<Vec<usize>> {
    mask.data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && (v as usize) < classes {
                Ok(v as usize)
            } else {
                Err(Error::contract(format!("mask value {v} outside {{0..{}}}", classes - 1)))
            }
        })
        .collect()
}

/// Rows of pixel logits: `[C, H, W] → [H·W, C]`.
pub fn pixel_rows(g: &mut Graph, logits: NodeId) -> Result<NodeId> {
    let d = g.dims(logits).to_vec();
    if d.len() != 3 {
        return Err(Error::shape("dense_ce", format!("logits {d:?} are not [C, H, W]")));
    }
    let flat = g.reshape(logits, &[d[0], d[1] * d[2]])?;
    g.transpose(flat)
}

/// Per-pixel mean cross-entropy of `[C, H, W]` logits against a label map.
pub fn dense_ce(g: &mut Graph, logits: NodeId, mask: &Tensor) -> Result<NodeId> {
    let d = g.dims(logits).to_vec();
    if d.len() != 3 || mask.dims() != &d[1..] {
        return Err(Error::shape("dense_ce", format!("logits {d:?} with mask {:?}", mask.dims())));
    }
    let targets = mask_targets(mask, d[0])?;
    let rows = pixel_rows(g, logits)?;
    g.cross_entropy(rows, &targets)
}

/// Tensor-level [`dense_ce`].
pub fn dense_ce_loss(logits: &Tensor, mask: &Tensor) -> Result<f32> {
    let mut g = Graph::new();
    let x = g.input("logits", logits)?;
    let l = dense_ce(&mut g, x, mask)?;
    Ok(g.scalar(l) as f32)
}

/// Segmentation logits `[2, H, W]` for one image at its own resolution.
pub fn segment_forward(image: &Tensor, model: &Model, repr: DenseRepr) -> Result<Tensor> {
    let d = image.dims();
    if d.len() != 3 {
        return Err(Error::shape("segment_forward", format!("image {d:?} is not [C, H, W]")));
    }
    let mut g = Graph::new();
    let nodes = model.register(&mut g)?;
    let trace = model.encode(&mut g, &nodes, image, "image")?;
    let dense = model.dense(&mut g, &trace, repr)?;
    let out = segment_logits(&mut g, &nodes.head, dense, d[1], d[2])?;
    Ok(g.value(out))
}

/// Per-pixel argmax of `[C, H, W]` logits.
pub fn predict_mask(logits: &Tensor) -> Tensor {
    let d = logits.dims();
    let (c, hw) = (d[0], d[1] * d[2]);
    let data = (0..hw)
        .map(|p| {
            let col: Vec<f32> = (0..c).map(|k| logits.data()[k * hw + p]).collect();
            argmax(&col) as f32
        })
        .collect();
    Tensor::new(vec![d[1], d[2]], data).expect("dims from logits")
}

// ---------------------------------------------------------------- metrics

/// Intersection and union pixel counts per class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IouCounts {
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
}

impl IouCounts {
    pub fn new(num_classes: usize) -> Self {
        IouCounts { intersection: vec![0; num_classes], union: vec![0; num_classes] }
    }

    pub fn add(&mut self, pred: &Tensor, truth: &Tensor) -> Result<()> {
        if pred.dims() != truth.dims() {
            return Err(Error::shape("miou", format!("pred {:?} vs true {:?}", pred.dims(), truth.dims())));
        }
        let c = self.intersection.len();
        let p = mask_targets(pred, c)?;
        let t = mask_targets(truth, c)?;
        for (&a, &b) in p.iter().zip(&t) {
            if a == b {
                self.intersection[a] += 1;
                self.union[a] += 1;
            } else {
                self.union[a] += 1;
                self.union[b] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &IouCounts) {
        for (a, b) in self.intersection.iter_mut().zip(&other.intersection) {
            *a += b;
        }
        for (a, b) in self.union.iter_mut().zip(&other.union) {
            *a += b;
        }
    }

    pub fn per_class(&self) -> Vec<Option<f64>> {
        self.intersection
            .iter()
            .zip(&self.union)
            .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
            .collect()
    }

    /// Mean IoU over classes seen in either prediction or truth.
    pub fn miou(&self) -> f32 {
        let present: Vec<f64> = self.per_class().into_iter().flatten().collect();
        if present.is_empty() {
            return 1.0;
        }
        (present.iter().sum::<f64>() / present.len() as f64) as f32
    }
}

/// Dataset-level mIoU: counts accumulate over all masks before dividing.
pub fn miou(pred_masks: &[Tensor], true_masks: &[Tensor], num_classes: usize) -> Result<f32> {
    if pred_masks.len() != true_masks.len() {
        return Err(Error::shape("miou", format!("{} predictions for {} masks", pred_masks.len(), true_masks.len())));
    }
    let mut counts = IouCounts::new(num_classes);
    for (p, t) in pred_masks.iter().zip(true_masks) {
        counts.add(p, t)?;
    }
    Ok(counts.miou())
}

// --------------------------------------------------------------- episodes

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub category: usize,
    pub seed: u64,
    /// Dataset indices, support first and the query last.
    pub indices: Vec<usize>,
    pub support: Vec<Sample>,
    pub query: Sample,
}

pub const SUPPORT: usize = 5;

fn binarize(mask: &Tensor, category: usize) -> Tensor {
    let target = (category + 1) as f32;
    let data = mask.data().iter().map(|&v| if v == target { 1.0 } else { 0.0 }).collect();
    Tensor::new(mask.dims().to_vec(), data).expect("same dims")
}

/// Draws five support images and one disjoint query from `category`, with
/// masks binarized to that category.
pub fn sample_episode(dataset: &Dataset, category: usize, seed: u64) -> Result<Episode> {
    if dataset.kind != TaskKind::Segmentation {
        return Err(Error::contract("episodes need a segmentation dataset"));
    }
    let pool = dataset.indices_of(category);
    if pool.len() < SUPPORT + 1 {
        return Err(Error::contract(format!(
            "category {category} has {} images, an episode needs {}",
            pool.len(),
            SUPPORT + 1
        )));
    }
    let mut rng = seed::rng_for(seed, &format!("episode.{category}"));
    let picks = rand::seq::index::sample(&mut rng, pool.len(), SUPPORT + 1);
    let indices: Vec<usize> = picks.iter().map(|i| pool[i]).collect();
    let take = |i: usize| {
        let s = &dataset.samples[i];
        Sample {
            image: s.image.clone(),
            label: 1,
            mask: s.mask.as_ref().map(|m| binarize(m, category)),
        }
    };
    let support = indices[..SUPPORT].iter().map(|&i| take(i)).collect();
    let query = take(indices[SUPPORT]);
    Ok(Episode { category, seed, indices, support, query })
}

// ------------------------------------------------------------------ resize

/// Bilinear image resize with half-pixel centres.
pub fn resize_image(image: &Tensor, side: usize) -> Result<Tensor> {
    if image.dims()[1] == side && image.dims()[2] == side {
        return Ok(image.clone());
    }
    let mut out = graph::resize_bilinear(image, side, side)?;
    for v in out.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Nearest-neighbour label-map resize.
pub fn resize_mask(mask: &Tensor, side: usize) -> Result<Tensor> {
    let d = mask.dims();
    if d.len() != 2 {
        return Err(Error::shape("resize_mask", format!("{d:?} is not [H, W]")));
    }
    let (h, w) = (d[0], d[1]);
    let pick = |o: usize, n: usize| (((o as f64 + 0.5) * n as f64 / side as f64).floor() as usize).min(n - 1);
    let mut data = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            data.push(mask.data()[pick(y, h) * w + pick(x, w)]);
        }
    }
    Tensor::new(vec![side, side], data)
}

pub fn resize_sample(s: &Sample, side: usize) -> Result<Sample> {
    Ok(Sample {
        image: resize_image(&s.image, side)?,
        label: s.label,
        mask: s.mask.as_ref().map(|m| resize_mask(m, side)).transpose()?,
    })
}

// ---------------------------------------------------------- synthetic data

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub kind: TaskKind,
    pub count: usize,
    pub image_size: usize,
    pub classes: usize,
}

impl SynthSpec {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.count == 0 {
            v.push("synthetic.count: must be ≥ 1".into());
        }
        if self.image_size < 8 {
            v.push(format!("synthetic.image_size: {} is below 8", self.image_size));
        }
        match self.kind {
            TaskKind::Classification if !(2..=16).contains(&self.classes) => {
                v.push(format!("synthetic.classes: {} outside [2, 16] for classification", self.classes))
            }
            TaskKind::Segmentation if !(1..=SHAPES).contains(&self.classes) => {
                v.push(format!("synthetic.classes: {} outside [1, {SHAPES}] for segmentation", self.classes))
            }
            _ => {}
        }
        v
    }
}

/// Deterministic synthetic dataset.
///
/// Classification: a low-contrast noisy field carries one random-phase
/// checkerboard marker; the grid cell holding the marker is the class. The
/// marker has the same mean as the background, so raw-pixel linear probes
/// cannot read it.
///
/// Segmentation: one saturated-colour shape per image on a grey textured
/// background; the shape kind is the category and the mask is exact.
pub fn gen_synthetic(spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    let v = spec.violations();
    if !v.is_empty() {
        return Err(Error::Config(v));
    }
    let mut rng = seed::rng_for(seed, "synthetic");
    let samples = (0..spec.count)
        .map(|i| {
            let label = i % spec.classes;
            match spec.kind {
                TaskKind::Classification => marker_image(spec.image_size, spec.classes, label, &mut rng),
                TaskKind::Segmentation => shape_image(spec.image_size, label, &mut rng),
            }
        })
        .collect();
    Ok(Dataset { kind: spec.kind, num_classes: spec.classes, samples })
}

fn marker_image(side: usize, classes: usize, label: usize, rng: &mut seed::Rng) -> Sample {
    let cells = (classes as f64).sqrt().ceil() as usize;
    let cell = side / cells;
    let (cy, cx) = (label / cells, label % cells);
    let phase = rng.random_range(0..2usize);
    let mut data = vec![0.0f32; 3 * side * side];
    for y in 0..side {
        for x in 0..side {
            let inside = y / cell == cy && x / cell == cx && y < cells * cell && x < cells * cell;
            for c in 0..3 {
                let base = 0.5 + rng.random_range(-0.08f32..0.08);
                let v = if inside {
                    let sign = if (x + y + phase) % 2 == 0 { 1.0 } else { -1.0 };
                    base + sign * 0.3
                } else {
                    base
                };
                data[c * side * side + y * side + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    Sample { image: Tensor::new(vec![3, side, side], data).expect("dims"), label, mask: None }
}

pub const SHAPES: usize = 6;

/// Whether the pixel offset `(dx, dy)` from the centre lies inside shape
/// `kind` of radius `r`.
fn inside_shape(kind: usize, dx: f64, dy: f64, r: f64) -> bool {
    let dist = (dx * dx + dy * dy).sqrt();
    match kind {
        0 => dist <= r,
        1 => dx.abs() <= r * 0.85 && dy.abs() <= r * 0.85,
        2 => dy <= r * 0.8 && dy >= -r && dx.abs() <= (dy + r) * 0.6,
        3 => dx.abs() + dy.abs() <= r,
        4 => dist <= r && dist >= r * 0.5,
        _ => (dx.abs() <= r * 0.35 && dy.abs() <= r) || (dy.abs() <= r * 0.35 && dx.abs() <= r),
    }
}

fn hue_to_rgb(h: f32) -> [f32; 3] {
    let k = |n: f32| {
        let k = (n + h * 6.0) % 6.0;
        1.0 - (k.min(4.0 - k).clamp(0.0, 1.0))
    };
    [k(5.0), k(3.0), k(1.0)]
}

fn shape_image(side: usize, kind: usize, rng: &mut seed::Rng) -> Sample {
    let s = side as f64;
    let r = rng.random_range(s * 0.2..s * 0.32);
    let cy = rng.random_range(r..s - r);
    let cx = rng.random_range(r..s - r);
    let colour = hue_to_rgb(rng.random_range(0.0f32..1.0));
    let grey = rng.random_range(0.3f32..0.7);
    let freq = rng.random_range(0.2f32..0.6);
    let angle = rng.random_range(0.0f32..std::f32::consts::PI);
    let (sa, ca) = angle.sin_cos();
    let plane = side * side;
    let mut img = vec![0.0f32; 3 * plane];
    let mut mask = vec![0.0f32; plane];
    for y in 0..side {
        for x in 0..side {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let fg = inside_shape(kind, dx, dy, r);
            let stripe = 0.08 * ((x as f32 * ca + y as f32 * sa) * freq).sin();
            let noise = rng.random_range(-0.06f32..0.06);
            for c in 0..3 {
                let v = if fg { 0.15 + 0.8 * colour[c] + noise * 0.5 } else { grey + stripe + noise };
                img[c * plane + y * side + x] = v.clamp(0.0, 1.0);
            }
            if fg {
                mask[y * side + x] = (kind + 1) as f32;
            }
        }
    }
    Sample {
        image: Tensor::new(vec![3, side, side], img).expect("dims"),
        label: kind,
        mask: Some(Tensor::new(vec![side, side], mask).expect("dims")),
    }
}

// ------------------------------------------------------------- directory

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexFile {
    kind: TaskKind,
    num_classes: usize,
    items: Vec<IndexItem>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexItem {
    file: String,
    label: usize,
}

/// Writes `images/*.xt`, `masks/*.xt` and `index.json` under `dir`.
pub fn write_dataset(dir: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("images"))?;
    if ds.kind == TaskKind::Segmentation {
        fs::create_dir_all(dir.join("masks"))?;
    }
    let mut items = Vec::with_capacity(ds.len());
    for (i, s) in ds.samples.iter().enumerate() {
        let file = format!("{i:06}.xt");
        format::write_tensor(dir.join("images").join(&file), &s.image)?;
        if let Some(m) = &s.mask {
            format::write_tensor(dir.join("masks").join(&file), m)?;
        }
        items.push(IndexItem { file, label: s.label });
    }
    let index = IndexFile { kind: ds.kind, num_classes: ds.num_classes, items };
    fs::write(dir.join("index.json"), serde_json::to_vec_pretty(&index)?)?;
    Ok(())
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let index: IndexFile = serde_json::from_slice(&fs::read(dir.join("index.json"))?)?;
    let mut samples = Vec::with_capacity(index.items.len());
    for item in &index.items {
        if item.file.contains(['/', '\\']) || item.file.starts_with('.') {
            return Err(Error::format(format!("index entry `{}` is not a plain file name", item.file)));
        }
        let image = format::read_tensor(dir.join("images").join(&item.file))?;
        let mask = match index.kind {
            TaskKind::Segmentation => Some(format::read_tensor(dir.join("masks").join(&item.file))?),
            TaskKind::Classification => None,
        };
        samples.push(Sample { image, label: item.label, mask });
    }
    let ds = Dataset { kind: index.kind, num_classes: index.num_classes, samples };
    ds.check()?;
    Ok(ds)
}

/// Hash of a dataset directory's `index.json`.
pub fn index_hash(dir: impl AsRef<Path>) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(dir.as_ref().join("index.json"))?)))
}
