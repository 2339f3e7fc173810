use crate::output::{print_table, write_json, write_table, JsonLines};
use crate::{AblateKind, CliError, CliResult, Command, Common, DataKind, SweepKind};
use expres::baselines::{build_adaptation, AdaptationSpec, Method, Model};
use expres::config::{RunConfig, TaskName};
use expres::error::LoadReport;
use expres::expres::{self as ex, ForwardOptions, Site};
use expres::format;
use expres::gradcheck::finite_diff_check;
use expres::graph::Graph;
use expres::tasks::{self, SynthSpec, TaskKind};
use expres::trainer::{self, MetricsRecord};
use expres::vit::{self, VitConfig};
use expres::{seed, Error, Tensor};
use serde::Serialize;
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

pub fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Train(c) => {
            let cfg = load_config(&c, true)?;
            let outcome = train_run(&cfg, &cfg.out)?;
            if let Some(r) = outcome.records.iter().rev().find(|r| r.split == "train") {
                println!("epochs {}  steps {}  loss {:.6}  metric {:.4}", outcome.records.len(), outcome.steps, r.loss, r.metric);
            }
            Ok(())
        }
        Command::Eval { common, checkpoint } => eval(&common, &checkpoint),
        Command::Episodes(c) => episodes(&c),
        Command::Gradcheck { common, epsilon, tolerance } => gradcheck(&common, epsilon, tolerance),
        Command::Account { vit, classes, m, out } => account(&vit, classes, &m, &out),
        Command::Sweep { what: SweepKind::Prompts, common } => sweep_prompts(&common),
        Command::Ablate { what, common } => ablate(what, &common),
        Command::DumpAttn { common, checkpoint, index } => dump_attn(&common, checkpoint.as_deref(), index),
        Command::GenData { kind, count, size, classes, seed, out } => gen_data(kind, count, size, classes, seed, &out),
    }
}

/// Reads `--config`, applies flag overrides and revalidates. Relative data
/// paths resolve against the config file's directory.
fn load_config(c: &Common, single_m: bool) -> CliResult<RunConfig> {
    let path = c.config.as_ref().ok_or_else(|| CliError::Usage("--config is required".into()))?;
    let mut cfg = RunConfig::from_path(path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    for p in [&mut cfg.data.train, &mut cfg.data.val, &mut cfg.data.backbone].into_iter().flatten() {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
    if let Some(s) = c.seed {
        cfg.train.seed = s;
    }
    if single_m {
        match c.m.as_slice() {
            [] => {}
            [m] => cfg.adaptation.m = Some(*m),
            _ => return Err(CliError::Usage("this command takes a single --M value".into())),
        }
    }
    if let Some(cut) = c.cutoff {
        cfg.adaptation.cutoff = Some(cut);
    }
    if let Some(s) = &c.sites {
        cfg.adaptation.sites = Some(ex::parse_sites(s).map_err(|e| Error::Config(vec![format!("--sites: {e}")]))?);
    }
    if let Some(o) = &c.out {
        cfg.out = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

// ------------------------------------------------------------------ train

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub records: Vec<MetricsRecord>,
    pub model: Model,
    pub steps: usize,
}

impl TrainOutcome {
    pub fn last(&self, split: &str) -> Option<&MetricsRecord> {
        self.records.iter().rev().find(|r| r.split == split)
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    config: &'a RunConfig,
    backbone_source: String,
    backbone_hash: String,
    dataset_source: String,
    dataset_hash: String,
    trainable: Vec<String>,
    tuned_params: u64,
    checkpoint_hash: String,
    steps: usize,
}

/// Trains per `cfg`, writing into `out`: `metrics.jsonl` (streamed),
/// `metrics.csv`/`metrics.json`, `checkpoint.xt` (trainable tensors only),
/// `backbone.xt` when backbone tensors were trained, and `manifest.json`.
/// After a numeric failure the checkpoint holds the last good values.
pub fn train_run(cfg: &RunConfig, out: &Path) -> CliResult<TrainOutcome> {
    std::fs::create_dir_all(out)?;
    let weights = cfg.backbone()?;
    let backbone_hash = weights.content_hash();
    let data = cfg.train_data(&weights)?;
    let val = cfg.val_data(&weights)?;
    let setup = cfg.setup()?;
    let classes = cfg.head_classes(&data);
    let mut model = build_adaptation(&cfg.adaptation, weights, classes, seed::derive(cfg.train.seed, "adaptation"))?;
    let mut log = JsonLines::create(&out.join("metrics.jsonl"))?;
    let fitted = trainer::fit(&mut model, &data, val.as_ref(), &cfg.train, setup, |r| log.push(r));
    let trainables = model.trainable_values();
    format::write_archive(out.join("checkpoint.xt"), &trainables)?;
    let report = fitted?;
    let trains_backbone = model.trainable_names().iter().any(|n| model.weights.tensors().contains_key(n));
    if trains_backbone {
        vit::save_checkpoint(&model.weights, out.join("backbone.xt"))?;
    } else if model.weights.content_hash() != backbone_hash {
        return Err(Error::contract("backbone changed although no backbone tensor is trainable").into());
    }
    write_table(out, "metrics", &report.records)?;
    let (dataset_source, dataset_hash) = match (&cfg.data.train, cfg.task.kind) {
        (Some(p), kind) if kind != TaskName::TeacherStudent => (p.display().to_string(), tasks::index_hash(p)?),
        _ => ("generated".to_string(), data.content_hash()),
    };
    let manifest = Manifest {
        config: cfg,
        backbone_source: cfg.data.backbone.as_ref().map_or("seeded-init".into(), |p| p.display().to_string()),
        backbone_hash,
        dataset_source,
        dataset_hash,
        trainable: model.trainable_names().iter().cloned().collect(),
        tuned_params: ex::count_trainable(&model.spec, model.config(), classes).tuned_params,
        checkpoint_hash: vit::archive_hash(&trainables),
        steps: report.steps,
    };
    write_json(out, "manifest", &manifest)?;
    Ok(TrainOutcome { records: report.records, model, steps: report.steps })
}

fn load_trainables(model: &mut Model, path: &Path) -> CliResult<()> {
    let archive = format::read_archive(path)?;
    let expected: &BTreeSet<String> = model.trainable_names();
    let mut report = LoadReport::default();
    for name in expected {
        match archive.get(name) {
            None => report.missing.push(name.clone()),
            Some(t) => {
                let want = model.get(name).expect("trainable exists").dims().to_vec();
                if t.dims() != want.as_slice() {
                    report.misshaped.push((name.clone(), want, t.dims().to_vec()));
                }
            }
        }
    }
    report.unexpected = archive.keys().filter(|k| !expected.contains(*k)).cloned().collect();
    if !report.is_clean() {
        return Err(Error::Load(report).into());
    }
    for (name, t) in archive {
        model.set(&name, t)?;
    }
    Ok(())
}

fn eval(c: &Common, checkpoint: &Path) -> CliResult<()> {
    let cfg = load_config(c, true)?;
    let weights = cfg.backbone()?;
    let train = cfg.train_data(&weights)?;
    let data = cfg.val_data(&weights)?.unwrap_or(train);
    let setup = cfg.setup()?;
    let classes = cfg.head_classes(&data);
    let mut model = build_adaptation(&cfg.adaptation, weights, classes, seed::derive(cfg.train.seed, "adaptation"))?;
    load_trainables(&mut model, checkpoint)?;
    let rec = trainer::evaluate(&model, &data, setup, cfg.train.batch_size)?;
    println!("loss {:.6}  metric {:.4}", rec.loss, rec.metric);
    write_table(&cfg.out, "eval", &[rec])
}

// --------------------------------------------------------------- episodes

fn worker_threads() -> usize {
    let avail = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var("EXPRES_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        Some(n) if n >= 1 => n.min(avail.max(n)),
        _ => avail,
    }
}

#[derive(Serialize)]
struct SummaryLine<'a> {
    summary: &'a trainer::EpisodeSummary,
}

fn episodes(c: &Common) -> CliResult<()> {
    let cfg = load_config(c, true)?;
    if cfg.task.kind != TaskName::Episodes {
        return Err(Error::Config(vec!["task.kind: the episodes command needs `episodes`".into()]).into());
    }
    let weights = cfg.backbone()?;
    let data = cfg.train_data(&weights)?;
    let setup = cfg.setup()?;
    let (results, summary) =
        trainer::run_episodes(&weights, &cfg.adaptation, &cfg.train, setup, &data, cfg.task.episodes, worker_threads())?;
    let mut log = JsonLines::create(&cfg.out.join("episodes.jsonl"))?;
    for r in &results {
        log.push(r)?;
    }
    log.push(&SummaryLine { summary: &summary })?;
    write_table(&cfg.out, "episodes", &results)?;
    write_table(&cfg.out, "summary", &[&summary])?;
    println!(
        "episodes {}  mean mIoU {:.4}  pooled mIoU {:.4}",
        summary.episodes, summary.mean_miou, summary.pooled_miou
    );
    Ok(())
}

// -------------------------------------------------------------- gradcheck

#[derive(Serialize)]
struct GradRow {
    tensor: String,
    elements: usize,
    max_rel_error: f32,
    pass: bool,
}

fn gradcheck(c: &Common, epsilon: f32, tolerance: f32) -> CliResult<()> {
    let cfg = load_config(c, true)?;
    let weights = cfg.backbone()?;
    let data = cfg.train_data(&weights)?;
    let setup = cfg.setup()?;
    let classes = cfg.head_classes(&data);
    let mut model = build_adaptation(&cfg.adaptation, weights, classes, seed::derive(cfg.train.seed, "adaptation"))?;
    // Zero residuals would leave their downstream paths untested, and
    // near-zero prompt rows put LayerNorm where central differences are
    // too coarse.
    let mut rng = seed::rng_for(cfg.train.seed, "gradcheck");
    for name in model.trainable_names().clone() {
        let std = if name.starts_with("prompt.d") {
            0.1
        } else if name.starts_with("prompt.P") {
            1.0
        } else {
            continue;
        };
        let dims = model.get(&name).expect("exists").dims().to_vec();
        model.set(&name, Tensor::trunc_normal(&dims, std, &mut rng))?;
    }
    let sample = &data.samples[0];
    let image = tasks::resize_image(&sample.image, setup.side)?;
    let mut g = Graph::new();
    let nodes = model.register(&mut g)?;
    let loss = match setup.kind {
        TaskKind::Classification => {
            let logits = model.logits(&mut g, &nodes, &image, "image")?;
            g.cross_entropy(logits, &[sample.label])?
        }
        TaskKind::Segmentation => {
            let trace = model.encode(&mut g, &nodes, &image, "image")?;
            let dense = model.dense(&mut g, &trace, setup.dense)?;
            let logits = tasks::segment_logits(&mut g, &nodes.head, dense, setup.side, setup.side)?;
            let mask = tasks::resize_mask(sample.mask.as_ref().expect("segmentation sample"), setup.side)?;
            let fg = Tensor::new(mask.dims().to_vec(), mask.data().iter().map(|&v| (v != 0.0) as u8 as f32).collect())?;
            tasks::dense_ce(&mut g, logits, &fg)?
        }
    };
    let mut rows = Vec::new();
    for name in model.trainable_names().clone() {
        let err = finite_diff_check(&mut g, loss, &name, epsilon)?;
        rows.push(GradRow {
            elements: model.get(&name).expect("exists").len(),
            tensor: name,
            max_rel_error: err,
            pass: err < tolerance,
        });
    }
    print_table(
        &["tensor", "elements", "max_rel_error", "pass"],
        &rows
            .iter()
            .map(|r| vec![r.tensor.clone(), r.elements.to_string(), format!("{:.3e}", r.max_rel_error), r.pass.to_string()])
            .collect::<Vec<_>>(),
    );
    write_table(&cfg.out, "gradcheck", &rows)?;
    if let Some(bad) = rows.iter().find(|r| !r.pass) {
        return Err(Error::numeric(
            bad.tensor.clone(),
            format!("max relative error {:.3e} exceeds {tolerance:e}", bad.max_rel_error),
        )
        .into());
    }
    Ok(())
}

// ----------------------------------------------------------------- account

#[derive(Serialize)]
struct AccountRow {
    method: Method,
    #[serde(rename = "M")]
    m: Option<usize>,
    k: Option<usize>,
    tuned_params: u64,
    total_params: u64,
    tuned_ratio_pct: f64,
    gmacs: f64,
}

fn account(vit_name: &str, classes: usize, ms: &[usize], out: &Path) -> CliResult<()> {
    let cfg = VitConfig::preset(vit_name).ok_or_else(|| CliError::Usage(format!("unknown --vit preset `{vit_name}`")))?;
    if classes < 2 {
        return Err(Error::Config(vec![format!("--classes: {classes} is below 2")]).into());
    }
    if ms.contains(&0) {
        return Err(Error::Config(vec!["--M: prompt counts must be ≥ 1".into()]).into());
    }
    let mut specs = vec![
        AdaptationSpec::new(Method::Linear),
        AdaptationSpec::new(Method::MlpK).with_k(3),
        AdaptationSpec::new(Method::Bias),
        AdaptationSpec::new(Method::PartialK).with_k(1),
        AdaptationSpec::new(Method::FtAll),
    ];
    for method in [Method::VptShallow, Method::VptDeep, Method::Expres] {
        specs.extend(ms.iter().map(|&m| AdaptationSpec::new(method).with_m(m)));
    }
    let rows: Vec<AccountRow> = specs
        .iter()
        .map(|s| {
            let r = ex::count_trainable(s, &cfg, classes);
            AccountRow {
                method: s.method,
                m: s.m,
                k: s.k,
                tuned_params: r.tuned_params,
                total_params: r.backbone_params + ex::head_params(s, &cfg, classes),
                tuned_ratio_pct: r.tuned_ratio_pct,
                gmacs: r.gmacs,
            }
        })
        .collect();
    print_table(
        &["method", "M", "k", "tuned", "ratio_%", "GMACs"],
        &rows
            .iter()
            .map(|r| {
                vec![
                    r.method.to_string(),
                    r.m.map_or("-".into(), |v| v.to_string()),
                    r.k.map_or("-".into(), |v| v.to_string()),
                    r.tuned_params.to_string(),
                    format!("{:.3}", r.tuned_ratio_pct),
                    format!("{:.2}", r.gmacs),
                ]
            })
            .collect::<Vec<_>>(),
    );
    write_table(out, "account", &rows)
}

// ------------------------------------------------------- sweeps, ablations

#[derive(Serialize)]
struct VariantRow {
    variant: String,
    #[serde(rename = "M")]
    m: Option<usize>,
    cutoff: Option<usize>,
    sites: String,
    start_layer: Option<usize>,
    tuned_params: u64,
    tuned_ratio_pct: f64,
    gmacs: f64,
    train_loss: f64,
    train_metric: f64,
    val_loss: Option<f64>,
    val_metric: Option<f64>,
}

fn run_variant(cfg: &RunConfig, variant: String, dir: PathBuf) -> CliResult<VariantRow> {
    cfg.validate()?;
    let outcome = train_run(cfg, &dir)?;
    let vit = cfg.vit_config()?;
    let cost = ex::count_trainable(&outcome.model.spec, &vit, outcome.model.num_classes);
    let spec = &outcome.model.spec;
    let train = outcome.last("train").cloned();
    let val = outcome.last("eval").cloned();
    Ok(VariantRow {
        variant,
        m: spec.m,
        cutoff: spec.cutoff,
        sites: spec.sites.as_ref().map_or(String::new(), |s| s.iter().map(Site::to_string).collect::<Vec<_>>().join("+")),
        start_layer: spec.start_layer,
        tuned_params: cost.tuned_params,
        tuned_ratio_pct: cost.tuned_ratio_pct,
        gmacs: cost.gmacs,
        train_loss: train.as_ref().map_or(f64::NAN, |r| r.loss),
        train_metric: train.as_ref().map_or(f64::NAN, |r| r.metric),
        val_loss: val.as_ref().map(|r| r.loss),
        val_metric: val.as_ref().map(|r| r.metric),
    })
}

fn report_variants(out: &Path, stem: &str, rows: &[VariantRow]) -> CliResult<()> {
    print_table(
        &["variant", "tuned", "train_loss", "train_metric"],
        &rows
            .iter()
            .map(|r| {
                vec![
                    r.variant.clone(),
                    r.tuned_params.to_string(),
                    format!("{:.6}", r.train_loss),
                    format!("{:.4}", r.train_metric),
                ]
            })
            .collect::<Vec<_>>(),
    );
    write_table(out, stem, rows)
}

fn sweep_prompts(c: &Common) -> CliResult<()> {
    let cfg = load_config(c, false)?;
    if !cfg.adaptation.method.uses_prompts() {
        return Err(Error::Config(vec![format!("adaptation.method: {} has no prompts to sweep", cfg.adaptation.method)]).into());
    }
    let ms = if c.m.is_empty() { vec![1, 5, 10, 30, 100] } else { c.m.clone() };
    let mut rows = Vec::with_capacity(ms.len());
    for m in ms {
        let mut run = cfg.clone();
        run.adaptation.m = Some(m);
        rows.push(run_variant(&run, format!("M={m}"), cfg.out.join("sweep_prompts").join(format!("M{m}")))?);
    }
    report_variants(&cfg.out, "sweep_prompts", &rows)
}

fn ablate(what: AblateKind, c: &Common) -> CliResult<()> {
    let cfg = load_config(c, true)?;
    if cfg.adaptation.method != Method::Expres {
        return Err(Error::Config(vec!["adaptation.method: ablations need `expres`".into()]).into());
    }
    let vit = cfg.vit_config()?;
    let l = vit.layers;
    let mut variants: Vec<(String, RunConfig)> = Vec::new();
    let (stem, dir) = match what {
        AblateKind::Propagation => {
            if l < 2 {
                return Err(Error::Config(vec![format!("vit.layers: propagation ablation needs L ≥ 2, got {l}")]).into());
            }
            for cut in 2..=l {
                let mut run = cfg.clone();
                run.adaptation.cutoff = Some(cut);
                variants.push((format!("cutoff={cut}"), run));
            }
            ("ablate_propagation", "propagation")
        }
        AblateKind::Sites => {
            let sets: Vec<(&str, Vec<Site>)> = vec![
                ("LN", vec![Site::Ln]),
                ("Q", vec![Site::Q]),
                ("K", vec![Site::K]),
                ("V", vec![Site::V]),
                ("proj", vec![Site::Proj]),
                ("Att", Site::ATT.to_vec()),
                ("MLP", Site::MLP.to_vec()),
                ("Att+MLP", Site::ALL.to_vec()),
            ];
            for (name, sites) in sets {
                let mut run = cfg.clone();
                run.adaptation.sites = Some(sites.into_iter().collect());
                variants.push((name.to_string(), run));
            }
            ("ablate_sites", "sites")
        }
        AblateKind::StartLayer => {
            for s in 0..l {
                let mut run = cfg.clone();
                run.adaptation.start_layer = Some(s);
                run.adaptation.end_layer = Some(l - 1);
                variants.push((format!("start={s}"), run));
            }
            ("ablate_start_layer", "start_layer")
        }
    };
    let mut rows = Vec::with_capacity(variants.len());
    for (name, run) in variants {
        let sub = cfg.out.join(dir).join(name.replace(['=', '+'], "_"));
        rows.push(run_variant(&run, name, sub)?);
    }
    report_variants(&cfg.out, stem, &rows)
}

// ----------------------------------------------------------- attention dump

#[derive(Serialize)]
struct AttnRow {
    layer: usize,
    prompt: usize,
    row: usize,
    col: usize,
    weight: f32,
}

fn dump_attn(c: &Common, checkpoint: Option<&Path>, index: usize) -> CliResult<()> {
    let cfg = load_config(c, true)?;
    if cfg.adaptation.method != Method::Expres {
        return Err(Error::Config(vec!["adaptation.method: attention dumps need `expres`".into()]).into());
    }
    let weights = cfg.backbone()?;
    let data = cfg.train_data(&weights)?;
    let setup = cfg.setup()?;
    let sample = data
        .samples
        .get(index)
        .ok_or_else(|| CliError::Usage(format!("--index {index} is outside the {}-sample set", data.len())))?;
    let image = tasks::resize_image(&sample.image, setup.side)?;
    let classes = cfg.head_classes(&data);
    let mut model = build_adaptation(&cfg.adaptation, weights, classes, seed::derive(cfg.train.seed, "adaptation"))?;
    if let Some(p) = checkpoint {
        load_trainables(&mut model, p)?;
    }
    let bank = model.bank().expect("expres model");
    let fwd = ex::expres_forward(&image, &model.weights, &bank, ForwardOptions { shallow_only: false, cutoff: cfg.adaptation.cutoff })?;
    let m = bank.m();
    let maps = cfg.out.join("attention");
    std::fs::create_dir_all(&maps)?;
    let mut rows = Vec::new();
    for layer in 0..fwd.layers.len() {
        for prompt in 0..m {
            let map = ex::dump_prompt_attention(&fwd.layers, m, prompt, layer)?;
            format::write_tensor(maps.join(format!("layer{layer}_prompt{prompt}.xt")), &map)?;
            let side = map.dims()[1];
            for (i, &w) in map.data().iter().enumerate() {
                rows.push(AttnRow { layer, prompt, row: i / side, col: i % side, weight: w });
            }
        }
    }
    println!("{} maps written", fwd.layers.len() * m);
    write_table(&cfg.out, "attention", &rows)
}

// --------------------------------------------------------------- gen-data

#[derive(Serialize)]
struct DataRow {
    label: usize,
    count: usize,
}

fn gen_data(kind: DataKind, count: usize, size: usize, classes: usize, seed: u64, out: &Path) -> CliResult<()> {
    let kind = match kind {
        DataKind::Classification => TaskKind::Classification,
        DataKind::Segmentation => TaskKind::Segmentation,
    };
    let ds = tasks::gen_synthetic(&SynthSpec { kind, count, image_size: size, classes }, seed)?;
    tasks::write_dataset(out, &ds)?;
    let rows: Vec<DataRow> = (0..classes).map(|label| DataRow { label, count: ds.indices_of(label).len() }).collect();
    write_table(out, "gen_data", &rows)?;
    println!("{} samples written", ds.len());
    Ok(())
}
