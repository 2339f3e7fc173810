//! The twelve acceptance criteria, one PASS/FAIL line each. Exits nonzero
//! when any criterion fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use common::*;
use expres::baselines::{build_adaptation, AdaptationSpec, Method};
use expres::config::RunConfig;
use expres::expres::{self as ex, ForwardOptions, Site};
use expres::tasks::TaskKind;
use expres::trainer::{self, TaskSetup, TrainConfig};
use expres::vit::VitConfig;
use expres::Tensor;
use serde_json::Value;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn run(args: &[&str]) -> i32 {
    expres_cli::run_command(std::iter::once("expres").chain(args.iter().copied()))
}

fn read_json(p: impl AsRef<Path>) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn parameter_accounting() -> Outcome {
    let t = Instant::now();
    let b16 = VitConfig::vit_b16();
    let rows = [
        (AdaptationSpec::new(Method::Linear), 0.090),
        (AdaptationSpec::new(Method::VptShallow).with_m(1), 0.091),
        (AdaptationSpec::new(Method::VptShallow).with_m(100), 0.179),
        (AdaptationSpec::new(Method::VptDeep).with_m(1), 0.100),
        (AdaptationSpec::new(Method::VptDeep).with_m(100), 1.166),
        (AdaptationSpec::new(Method::Expres).with_m(1), 0.144),
        (AdaptationSpec::new(Method::Expres).with_m(100), 5.560),
    ];
    let mut worst = 0.0f64;
    let mut detail = Vec::new();
    for (spec, want) in &rows {
        let got = ex::count_trainable(spec, &b16, 100).tuned_ratio_pct;
        worst = worst.max((got - want).abs());
        detail.push(format!("{}{}={got:.3}", spec.method, spec.m.map_or(String::new(), |m| format!("@{m}"))));
    }
    let secs = t.elapsed().as_secs_f64();
    check(worst <= 0.05 && secs < 1.0, format!("{} (max dev {worst:.3} pp, {secs:.3}s)", detail.join(" ")))
}

fn mac_accounting() -> Outcome {
    let t = Instant::now();
    let b16 = VitConfig::vit_b16();
    let m0 = ex::estimate_macs(&b16, 0) as f64 / 1e9;
    let m100 = ex::estimate_macs(&b16, 100) as f64 / 1e9;
    let (e0, e100) = (m0 / 17.47 - 1.0, m100 / 26.87 - 1.0);
    let secs = t.elapsed().as_secs_f64();
    check(
        e0.abs() <= 0.03 && e100.abs() <= 0.03 && secs < 1.0,
        format!("M=0 {m0:.2} GMACs ({:+.1}%), M=100 {m100:.2} GMACs ({:+.1}%)", e0 * 100.0, e100 * 100.0),
    )
}

fn zero_residual_equivalence() -> Outcome {
    let cfg = toy_cfg(8, 2, 2, 2);
    let mut mismatches = 0;
    for seed in 0..100 {
        let w = rich_weights(&cfg, seed);
        let mut bank = random_bank(&cfg, 1 + (seed % 3) as usize, &Site::ALL, 0.0, seed);
        bank.residuals.values_mut().for_each(|t| *t = Tensor::zeros(t.dims()));
        let img = image(&cfg, seed);
        let full = ex::expres_forward(&img, &w, &bank, ForwardOptions::default()).unwrap();
        let shallow = ex::expres_forward(&img, &w, &bank, ForwardOptions { shallow_only: true, cutoff: None }).unwrap();
        if full.y != shallow.y {
            mismatches += 1;
        }
    }
    check(mismatches == 0, format!("{mismatches}/100 instances differ"))
}

fn reweighting_factorization() -> Outcome {
    let mut worst = 0.0f32;
    for seed in 0..100 {
        let cfg = toy_cfg(8, 2, if seed % 2 == 0 { 1 } else { 4 }, 2);
        let w = rich_weights(&cfg, seed);
        let bank = random_bank(&cfg, 1 + (seed % 4) as usize, &Site::ATT, 0.5, seed);
        worst = worst.max(ex::verify_reweighting(&w, &bank, &image(&cfg, seed)).unwrap());
    }
    check(worst < 1e-6, format!("max abs error {worst:.2e} over 100 instances"))
}

fn gradient_correctness() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let code = run(&["gradcheck", "--config", config("toy.json").to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    let rows = read_json(dir.path().join("gradcheck.json"));
    let rows = rows.as_array().unwrap();
    let worst = rows.iter().map(|r| r["max_rel_error"].as_f64().unwrap()).fold(0.0, f64::max);
    let sites = rows.iter().filter(|r| r["tensor"].as_str().unwrap().starts_with("prompt.d")).count();
    check(
        code == 0 && worst < 1e-3 && sites == 2 * Site::ALL.len(),
        format!("{} tensors, {sites} residual sites, max rel error {worst:.2e}", rows.len()),
    )
}

fn frozen_backbone() -> Outcome {
    let t = Instant::now();
    let cfg = toy_cfg(8, 2, 2, 2);
    let w = expres::vit::VitWeights::init(&cfg, 6).unwrap();
    let source = w.content_hash();
    let (_, data) = trainer::teacher_student_data(&w, &AdaptationSpec::new(Method::Expres).with_m(2), 3, 8, 1.0, 6).unwrap();
    let setup = TaskSetup { kind: TaskKind::Classification, side: cfg.image_size, dense: Default::default() };
    let tc = TrainConfig { epochs: 100, warmup_epochs: 10, batch_size: 4, lr: 0.005, ..TrainConfig::default() };
    let mut specs = vec![
        AdaptationSpec::new(Method::Linear),
        AdaptationSpec::new(Method::MlpK).with_k(2),
        AdaptationSpec::new(Method::Bias),
        AdaptationSpec::new(Method::PartialK).with_k(1),
        AdaptationSpec::new(Method::FtAll),
        AdaptationSpec::new(Method::VptShallow).with_m(2),
        AdaptationSpec::new(Method::VptDeep).with_m(2),
        AdaptationSpec::new(Method::Expres).with_m(2),
        AdaptationSpec::new(Method::Expres).with_m(2).with_sites(Site::ALL),
    ];
    specs.push(AdaptationSpec::new(Method::Expres).with_m(2).with_cutoff(Some(1)));
    let mut bad = Vec::new();
    for spec in &specs {
        let mut model = build_adaptation(spec, w.clone(), 3, 0).unwrap();
        let frozen = model.frozen_hash();
        let report = trainer::fit(&mut model, &data, None, &tc, setup, |_| Ok(())).unwrap();
        let trains_backbone = model.trainable_names().iter().any(|n| w.tensors().contains_key(n));
        let backbone_ok = trains_backbone || model.weights.content_hash() == source;
        if report.steps != 200 || model.frozen_hash() != frozen || !backbone_ok {
            bad.push(spec.method.to_string());
        }
    }
    let secs = t.elapsed().as_secs_f64();
    check(
        bad.is_empty() && w.content_hash() == source,
        format!("{} methods × 200 steps, changed: {bad:?} ({secs:.1}s)", specs.len()),
    )
}

fn permutation_invariance() -> Outcome {
    let cfg = toy_cfg(8, 2, 2, 2);
    let mut worst = 0.0f32;
    for seed in 0..50 {
        let w = rich_weights(&cfg, seed);
        let m = 2 + (seed % 4) as usize;
        let bank = random_bank(&cfg, m, &Site::ALL, 0.3, seed);
        let perm = permutation(m, &mut expres::seed::rng_for(seed, "perm"));
        let img = image(&cfg, seed);
        let a = ex::expres_forward(&img, &w, &bank, ForwardOptions::default()).unwrap();
        let b = ex::expres_forward(&img, &w, &bank.permute_rows(&perm).unwrap(), ForwardOptions::default()).unwrap();
        worst = worst.max(a.y.max_abs_diff(&b.y));
    }
    check(worst < 1e-6, format!("max |Δy| {worst:.2e} over 50 trials"))
}

fn oracle_equivalence() -> Outcome {
    let cfg = toy_cfg(4, 2, 2, 2);
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let w = rich_weights(&cfg, seed);
        let sites: &[Site] = if seed % 2 == 0 { &Site::ATT } else { &Site::ALL };
        let bank = random_bank(&cfg, 2, sites, 0.5, seed);
        let img = image(&cfg, seed);
        let got = ex::expres_forward(&img, &w, &bank, ForwardOptions::default()).unwrap();
        let z = encode(&w, &img, Some(&mat(&bank.prompts)), &residuals(&bank), None);
        worst = worst.max(max_diff(&pooled(&w, &z, 2), got.y.data()));
    }
    check(worst < 1e-6, format!("max per-element error {worst:.2e} over 20 instances"))
}

/// Full-dataset loss before and after training under `spec`.
fn loss_ratio(rc: &RunConfig, spec: AdaptationSpec) -> (f64, f64, usize) {
    let w = rc.backbone().unwrap();
    let data = rc.train_data(&w).unwrap();
    let setup = rc.setup().unwrap();
    let mut model = build_adaptation(&spec, w, rc.head_classes(&data), expres::seed::derive(rc.train.seed, "adaptation")).unwrap();
    let before = trainer::evaluate(&model, &data, setup, 64).unwrap().loss;
    let report = trainer::fit(&mut model, &data, None, &rc.train, setup, |_| Ok(())).unwrap();
    let after = trainer::evaluate(&model, &data, setup, 64).unwrap().loss;
    (before, after, report.steps)
}

fn teacher_student_learnability() -> Outcome {
    let rc = RunConfig::from_path(config("teacher_student.json")).unwrap();
    let (e0, e1, steps) = loss_ratio(&rc, rc.adaptation.clone());
    let (l0, l1, lsteps) = loss_ratio(&rc, AdaptationSpec::new(Method::Linear));
    let (re, rl) = (e1 / e0, l1 / l0);
    check(
        steps == 200 && lsteps == 200 && re < 0.2 && rl > 0.5,
        format!("expres {e0:.3}→{e1:.3} ({:.1}%), linear {l0:.3}→{l1:.3} ({:.1}%), {steps} steps", re * 100.0, rl * 100.0),
    )
}

/// Pretrains the segmentation backbone and writes an episodes config that
/// points at it.
fn episodes_config(dir: &Path) -> PathBuf {
    let pre = dir.join("pretrain");
    assert_eq!(run(&["train", "--config", config("seg_pretrain.json").to_str().unwrap(), "--out", pre.to_str().unwrap()]), 0);
    let mut v = read_json(config("episodes.json"));
    v["data"]["backbone"] = Value::String(pre.join("backbone.xt").display().to_string());
    let path = dir.join("episodes.json");
    std::fs::write(&path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    path
}

fn segmentation_pipeline(dir: &Path, cfg: &Path) -> Outcome {
    let t = Instant::now();
    let out = dir.join("episodes_a");
    let code = run(&["episodes", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let summary = &read_json(out.join("summary.json"))[0];
    let mean = summary["mean_miou"].as_f64().unwrap();
    let n = summary["episodes"].as_u64().unwrap();
    check(
        code == 0 && n == 100 && mean >= 0.80,
        format!("mean episode mIoU {mean:.4} over {n} episodes ({:.0}s)", t.elapsed().as_secs_f64()),
    )
}

fn ablation_machinery() -> Outcome {
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let code = run(&["ablate", "propagation", "--config", config("ablate.json").to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    let rows = read_json(dir.path().join("ablate_propagation.json"));
    let rows = rows.as_array().unwrap();
    let at = |c: u64| rows.iter().find(|r| r["cutoff"].as_u64() == Some(c)).map(|r| r["val_metric"].as_f64().unwrap());
    let cutoffs: Vec<u64> = rows.iter().filter_map(|r| r["cutoff"].as_u64()).collect();
    let (lo, hi) = (at(2), at(6));
    let table = rows
        .iter()
        .map(|r| format!("{}:{:.3}", r["cutoff"], r["val_metric"].as_f64().unwrap_or(f64::NAN)))
        .collect::<Vec<_>>()
        .join(" ");
    check(
        code == 0 && cutoffs == [2, 3, 4, 5, 6] && matches!((lo, hi), (Some(a), Some(b)) if b >= a),
        format!("val accuracy by cutoff {table} ({:.0}s)", t.elapsed().as_secs_f64()),
    )
}

fn determinism(dir: &Path, cfg: &Path) -> Outcome {
    let ts = config("teacher_student.json");
    let mut outs = Vec::new();
    for tag in ["a", "b"] {
        let out = dir.join(format!("train_{tag}"));
        assert_eq!(run(&["train", "--config", ts.to_str().unwrap(), "--out", out.to_str().unwrap()]), 0);
        outs.push(out);
    }
    let mut differing = Vec::new();
    for file in ["metrics.jsonl", "metrics.csv", "checkpoint.xt"] {
        if std::fs::read(outs[0].join(file)).unwrap() != std::fs::read(outs[1].join(file)).unwrap() {
            differing.push(format!("train/{file}"));
        }
    }
    let second = dir.join("episodes_b");
    assert_eq!(run(&["episodes", "--config", cfg.to_str().unwrap(), "--out", second.to_str().unwrap()]), 0);
    for file in ["episodes.jsonl", "episodes.csv", "summary.csv"] {
        if std::fs::read(dir.join("episodes_a").join(file)).unwrap() != std::fs::read(second.join(file)).unwrap() {
            differing.push(format!("episodes/{file}"));
        }
    }
    check(differing.is_empty(), format!("differing logs: {differing:?}"))
}

fn main() {
    let work = tempfile::tempdir().unwrap();
    let dir = work.path().to_path_buf();
    let episodes_cfg = std::cell::OnceCell::new();
    let episodes = || episodes_config(&dir);
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("parameter accounting", Box::new(parameter_accounting)),
        ("MAC accounting", Box::new(mac_accounting)),
        ("zero-residual equivalence", Box::new(zero_residual_equivalence)),
        ("reweighting factorization", Box::new(reweighting_factorization)),
        ("gradient correctness", Box::new(gradient_correctness)),
        ("frozen-backbone immutability", Box::new(frozen_backbone)),
        ("prompt-permutation invariance", Box::new(permutation_invariance)),
        ("oracle equivalence", Box::new(oracle_equivalence)),
        ("teacher-student learnability", Box::new(teacher_student_learnability)),
        ("segmentation pipeline", Box::new(|| segmentation_pipeline(&dir, episodes_cfg.get_or_init(episodes)))),
        ("ablation machinery", Box::new(ablation_machinery)),
        ("determinism", Box::new(|| determinism(&dir, episodes_cfg.get_or_init(episodes)))),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {:>2} {tag} {name}: {detail}", i + 1);
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
