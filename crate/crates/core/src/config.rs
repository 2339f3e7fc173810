//! Run configuration: strict JSON parsing that reports every violation,
//! and preparation of the backbone and datasets it names.

use crate::baselines::{AdaptationSpec, DenseRepr, Method};
use crate::error::{Error, Result};
use crate::format;
use crate::seed;
use crate::tasks::{self, Dataset, SynthSpec, TaskKind};
use crate::trainer::{TaskSetup, TrainConfig};
use crate::vit::{VitConfig, VitWeights};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::path::{Path, PathBuf};

/// A named preset or an explicit encoder shape.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VitSpec {
    Preset(String),
    Custom(VitConfig),
}

impl VitSpec {
    pub fn resolve(&self) -> Result<VitConfig> {
        match self {
            VitSpec::Preset(name) => {
                VitConfig::preset(name).ok_or_else(|| Error::Config(vec![format!("vit: unknown preset `{name}`")]))
            }
            VitSpec::Custom(c) => Ok(c.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskName {
    Classification,
    Segmentation,
    Episodes,
    TeacherStudent,
}

fn default_episodes() -> usize {
    100
}
fn default_teacher_m() -> usize {
    4
}
fn default_teacher_scale() -> f32 {
    crate::trainer::TEACHER_SCALE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub kind: TaskName,
    /// Head width for classification and teacher-student runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    /// Keep only samples whose label is listed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub categories: Option<Vec<usize>>,
    #[serde(default = "default_episodes")]
    pub episodes: usize,
    #[serde(default)]
    pub dense: DenseRepr,
    /// Square input side; defaults to the encoder's image size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolution: Option<usize>,
    /// Teacher-student: number of generated images.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
    /// Teacher-student: further images labelled by the same teacher, held out
    /// as the validation split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_count: Option<usize>,
    #[serde(default = "default_teacher_m")]
    pub teacher_m: usize,
    #[serde(default = "default_teacher_scale")]
    pub teacher_scale: f32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val: Option<PathBuf>,
    /// Backbone archive; a seeded initialisation is used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backbone: Option<PathBuf>,
    /// Generate the training set instead of reading it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SynthSpec>,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub vit: VitSpec,
    pub adaptation: AdaptationSpec,
    #[serde(default)]
    pub train: TrainConfig,
    pub task: TaskConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default = "default_out")]
    pub out: PathBuf,
}

const TOP_KEYS: &[&str] = &["vit", "adaptation", "train", "task", "data", "out"];
const VIT_KEYS: &[&str] = &["image_size", "patch_size", "d", "layers", "heads", "mlp_ratio", "channels"];
const ADAPT_KEYS: &[&str] = &["method", "M", "k", "sites", "start_layer", "end_layer", "cutoff"];
const TRAIN_KEYS: &[&str] = &[
    "lr",
    "weight_decay",
    "epochs",
    "warmup_epochs",
    "batch_size",
    "betas",
    "eps",
    "seed",
    "clip",
    "inner_steps",
];
const TASK_KEYS: &[&str] =
    &["kind", "num_classes", "categories", "episodes", "dense", "resolution", "count", "val_count", "teacher_m", "teacher_scale"];
const DATA_KEYS: &[&str] = &["train", "val", "backbone", "synthetic"];
const SYNTH_KEYS: &[&str] = &["kind", "count", "image_size", "classes"];

fn unknown_keys(v: &Value, path: &str, known: &[&str], out: &mut Vec<String>) {
    if let Value::Object(map) = v {
        for k in map.keys() {
            if !known.contains(&k.as_str()) {
                let at = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                out.push(format!("{at}: unknown key"));
            }
        }
    }
}

fn section<T: serde::de::DeserializeOwned>(v: Option<&Value>, name: &str, out: &mut Vec<String>) -> Option<T> {
    let v = v.cloned().unwrap_or(Value::Object(Default::default()));
    match serde_json::from_value(v) {
        Ok(t) => Some(t),
        Err(e) => {
            out.push(format!("{name}: {e}"));
            None
        }
    }
}

impl RunConfig {
    /// Parses and validates; every violation is reported, each prefixed with
    /// its field path.
    pub fn from_json(text: &str) -> Result<Self> {
        let root: Value = serde_json::from_str(text).map_err(|e| Error::Config(vec![format!("config: {e}")]))?;
        if !root.is_object() {
            return Err(Error::Config(vec!["config: top level must be an object".into()]));
        }
        let mut v = Vec::new();
        unknown_keys(&root, "", TOP_KEYS, &mut v);
        if let Some(vit) = root.get("vit") {
            unknown_keys(vit, "vit", VIT_KEYS, &mut v);
        }
        for (key, known) in [("adaptation", ADAPT_KEYS), ("train", TRAIN_KEYS), ("task", TASK_KEYS), ("data", DATA_KEYS)]
        {
            if let Some(s) = root.get(key) {
                unknown_keys(s, key, known, &mut v);
            }
        }
        if let Some(s) = root.get("data").and_then(|d| d.get("synthetic")) {
            unknown_keys(s, "data.synthetic", SYNTH_KEYS, &mut v);
        }
        for key in ["vit", "adaptation", "task"] {
            if root.get(key).is_none() {
                v.push(format!("{key}: missing"));
            }
        }
        if !v.is_empty() {
            return Err(Error::Config(v));
        }
        let vit: Option<VitSpec> = section(root.get("vit"), "vit", &mut v);
        let adaptation: Option<AdaptationSpec> = section(root.get("adaptation"), "adaptation", &mut v);
        let train: Option<TrainConfig> = section(root.get("train"), "train", &mut v);
        let task: Option<TaskConfig> = section(root.get("task"), "task", &mut v);
        let data: Option<DataConfig> = section(root.get("data"), "data", &mut v);
        let out = match root.get("out") {
            None => Some(default_out()),
            Some(o) => section(Some(o), "out", &mut v),
        };
        match (vit, adaptation, train, task, data, out) {
            (Some(vit), Some(adaptation), Some(train), Some(task), Some(data), Some(out)) if v.is_empty() => {
                let cfg = RunConfig { vit, adaptation, train, task, data, out };
                cfg.validate()?;
                Ok(cfg)
            }
            _ => Err(Error::Config(v)),
        }
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn vit_config(&self) -> Result<VitConfig> {
        self.vit.resolve()
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let vit = match self.vit.resolve() {
            Ok(c) => c,
            Err(Error::Config(e)) => return e,
            Err(e) => return vec![e.to_string()],
        };
        v.extend(vit.violations().into_iter().map(|s| format!("vit.{s}")));
        if !v.is_empty() {
            return v;
        }
        v.extend(self.adaptation.violations(&vit));
        v.extend(self.train.violations());
        let t = &self.task;
        let side = t.resolution.unwrap_or(vit.image_size);
        if side == 0 || !side.is_multiple_of(vit.patch_size) {
            v.push(format!("task.resolution: {side} is not a positive multiple of patch_size {}", vit.patch_size));
        }
        if !(t.teacher_scale.is_finite() && t.teacher_scale > 0.0) {
            v.push(format!("task.teacher_scale: {} must be > 0", t.teacher_scale));
        }
        let has_data = self.data.train.is_some() || self.data.synthetic.is_some();
        if self.data.train.is_some() && self.data.synthetic.is_some() {
            v.push("data: give either `train` or `synthetic`, not both".into());
        }
        match t.kind {
            TaskName::TeacherStudent => {
                match t.num_classes {
                    Some(c) if c >= 2 => {}
                    _ => v.push("task.num_classes: teacher_student needs C ≥ 2".into()),
                }
                match t.count {
                    Some(c) if c >= 1 => {}
                    _ => v.push("task.count: teacher_student needs count ≥ 1".into()),
                }
                if self.data.val.is_some() {
                    v.push("data.val: teacher_student draws its validation split from `task.val_count`".into());
                }
                if t.teacher_m == 0 {
                    v.push("task.teacher_m: the teacher needs M ≥ 1".into());
                }
            }
            kind => {
                if !has_data {
                    v.push("data: `train` or `synthetic` is required".into());
                }
                let want = if kind == TaskName::Classification { TaskKind::Classification } else { TaskKind::Segmentation };
                if let Some(s) = &self.data.synthetic {
                    if s.kind != want {
                        v.push(format!("data.synthetic.kind: {:?} data for a {:?} task", s.kind, kind));
                    }
                    v.extend(s.violations().into_iter().map(|e| format!("data.{e}")));
                }
                if kind == TaskName::Episodes && t.episodes == 0 {
                    v.push("task.episodes: must be ≥ 1".into());
                }
            }
        }
        if let Some(c) = t.num_classes {
            if c < 2 {
                v.push(format!("task.num_classes: {c} is below 2"));
            }
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    /// Loads the named backbone or draws the seeded initialisation.
    pub fn backbone(&self) -> Result<VitWeights> {
        let cfg = self.vit_config()?;
        match &self.data.backbone {
            Some(p) => load_backbone(&cfg, p),
            None => VitWeights::init(&cfg, seed::derive(self.train.seed, "backbone")),
        }
    }

    pub fn setup(&self) -> Result<TaskSetup> {
        let cfg = self.vit_config()?;
        let kind = match self.task.kind {
            TaskName::Classification | TaskName::TeacherStudent => TaskKind::Classification,
            TaskName::Segmentation | TaskName::Episodes => TaskKind::Segmentation,
        };
        Ok(TaskSetup { kind, side: self.task.resolution.unwrap_or(cfg.image_size), dense: self.task.dense })
    }

    fn filter(&self, mut ds: Dataset) -> Dataset {
        if let Some(keep) = &self.task.categories {
            ds.samples.retain(|s| keep.contains(&s.label));
        }
        ds
    }

    /// Images labelled by the hidden teacher; the first `count` train, the
    /// next `val_count` validate.
    fn teacher_student(&self, weights: &VitWeights) -> Result<Dataset> {
        let teacher = AdaptationSpec::new(Method::Expres).with_m(self.task.teacher_m);
        let count = self.task.count.unwrap_or(1) + self.task.val_count.unwrap_or(0);
        let (_, ds) = crate::trainer::teacher_student_data(
            weights,
            &teacher,
            self.task.num_classes.unwrap_or(2),
            count,
            self.task.teacher_scale,
            seed::derive(self.train.seed, "teacher"),
        )?;
        Ok(ds)
    }

    /// The training set: read, generated, or (teacher-student) labelled by
    /// the hidden teacher.
    pub fn train_data(&self, weights: &VitWeights) -> Result<Dataset> {
        let ds = if self.task.kind == TaskName::TeacherStudent {
            let mut ds = self.teacher_student(weights)?;
            ds.samples.truncate(self.task.count.unwrap_or(1));
            ds
        } else if let Some(p) = &self.data.train {
            tasks::read_dataset(p)?
        } else {
            let spec = self.data.synthetic.as_ref().ok_or_else(|| Error::Config(vec!["data: no training set".into()]))?;
            tasks::gen_synthetic(spec, seed::derive(self.train.seed, "data"))?
        };
        let ds = self.filter(ds);
        if ds.is_empty() {
            return Err(Error::contract("the training set is empty after category filtering"));
        }
        Ok(ds)
    }

    pub fn val_data(&self, weights: &VitWeights) -> Result<Option<Dataset>> {
        if self.task.kind == TaskName::TeacherStudent {
            return match self.task.val_count {
                Some(n) if n > 0 => {
                    let mut ds = self.teacher_student(weights)?;
                    ds.samples.drain(..self.task.count.unwrap_or(1));
                    Ok(Some(ds))
                }
                _ => Ok(None),
            };
        }
        self.data.val.as_ref().map(|p| tasks::read_dataset(p).map(|d| self.filter(d))).transpose()
    }

    /// Classes of the trained head for a dataset of this task.
    pub fn head_classes(&self, data: &Dataset) -> usize {
        match self.task.kind {
            TaskName::Classification | TaskName::TeacherStudent => self.task.num_classes.unwrap_or(data.num_classes),
            TaskName::Segmentation | TaskName::Episodes => 2,
        }
    }
}

/// Reads a backbone archive. Adaptation-owned entries (`head.*`,
/// `prompt.*`) are ignored, so a full-finetune checkpoint loads directly.
pub fn load_backbone(cfg: &VitConfig, path: impl AsRef<Path>) -> Result<VitWeights> {
    let mut a = format::read_archive(path)?;
    a.retain(|n, _| !(n.starts_with("head.") || n.starts_with("prompt.")));
    VitWeights::from_archive(cfg, a)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "vit": "toy",
        "adaptation": {"method": "expres", "M": 2},
        "task": {"kind": "teacher_student", "num_classes": 3, "count": 8}
    }"#;

    #[test]
    fn minimal_config_fills_defaults() {
        let c = RunConfig::from_json(MINIMAL).unwrap();
        assert_eq!(c.train.epochs, 100);
        assert_eq!(c.train.warmup_epochs, 10);
        let cfg = c.vit_config().unwrap();
        let sites = c.adaptation.site_config(&cfg);
        assert_eq!(sites.sites.len(), 5);
        assert_eq!(c.out, PathBuf::from("out"));
    }

    #[test]
    fn every_violation_is_reported() {
        let text = r#"{
            "vit": "toy",
            "adaptation": {"method": "expres", "M": 0, "start_layer": 0, "end_layer": 2},
            "train": {"lr": -1, "epochs": 3, "warmup_epochs": 4},
            "task": {"kind": "classification"}
        }"#;
        let Err(Error::Config(v)) = RunConfig::from_json(text) else { panic!("expected config error") };
        let joined = v.join("\n");
        for needle in ["M ≥ 1", "end_layer", "train.lr", "warmup_epochs", "data"] {
            assert!(joined.contains(needle), "missing {needle} in {joined}");
        }
    }

    #[test]
    fn unknown_keys_are_named_with_paths() {
        let text = r#"{"vit": "toy", "adaptation": {"method": "linear", "alpha": 1},
            "task": {"kind": "teacher_student", "num_classes": 2, "count": 4}, "extra": 0}"#;
        let Err(Error::Config(v)) = RunConfig::from_json(text) else { panic!("expected config error") };
        assert!(v.contains(&"adaptation.alpha: unknown key".to_string()), "{v:?}");
        assert!(v.contains(&"extra: unknown key".to_string()), "{v:?}");
    }
}
