// SPDX-License-Identifier: MIT OR Apache-2.0

//! One PASS/FAIL line per acceptance criterion, written straight to stderr so
//! it shows even when test output is captured.
//!
//! Criteria 7 and 8 need the real TAS-B checkpoint and an MS MARCO subset and
//! are ignored by default; see the README for how to run them.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use common::{snapshot, Desk};
use patchlens::io::{read_dataset, read_jsonl, write_jsonl};
use patchlens::{build_dataset, run_experiment, write_report, RunArgs, RunConfig, RunOptions};
use patchlens_core::patching::patching_impact;
use patchlens_core::tokenizer::{basic_words, text_token_count};
use patchlens_core::{
    relevance_score, Capture, Encoding, Error as CoreError, HookPoint, ImpactRecord, Model, ModelConfig, PatchSpec,
    PatchingScores, Site, TriplePatcher, WeightStore,
};
use patchlens_testkit::oracle::{self, Point, Substitution};
use patchlens_testkit::{random_ids, random_model, RawModel, TinyConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

fn verdict(n: u32, pass: bool, detail: &str) {
    let line = format!("{} criterion {n}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    std::io::stderr().write_all(line.as_bytes()).unwrap();
    assert!(pass, "criterion {n} failed: {detail}");
}

const CLS: u32 = 2;
const SEP: u32 = 3;
const FIRST_WORD: u32 = 5;

fn tiny(seed: u64) -> (RawModel, Model) {
    let raw = random_model(TinyConfig::tiny(common::VOCAB_SIZE), seed);
    let c = raw.cfg;
    let cfg = ModelConfig {
        n_layers: c.n_layers,
        n_heads: c.n_heads,
        d_model: c.d_model,
        d_ff: c.d_ff,
        vocab_size: c.vocab_size,
        max_positions: c.max_positions,
        ln_eps: c.ln_eps as f32,
    };
    let mut store = WeightStore::new();
    for (name, (shape, data)) in &raw.tensors {
        store.insert(name.clone(), patchlens_core::Tensor::new(shape.clone(), data.clone()).unwrap());
    }
    let model = Model::from_weights(cfg, store).unwrap();
    (raw, model)
}

struct Pair {
    qcls: Vec<f32>,
    dest: Encoding,
    src: Encoding,
}

/// Equal-length synthetic triple: the source redraws every third content token.
fn pair(model: &Model, rng: &mut ChaCha8Rng, len: usize) -> Pair {
    let v = common::VOCAB_SIZE as u32;
    let q = random_ids(rng, 6, CLS, SEP, FIRST_WORD, v);
    let dest = random_ids(rng, len, CLS, SEP, FIRST_WORD, v);
    let mut src = dest.clone();
    for p in (1..len - 1).filter(|p| p % 3 == 1) {
        src[p] = rng.gen_range(FIRST_WORD..v);
    }
    let qcls = model.forward(&q, &vec![1; q.len()], &Capture::none(), None).unwrap().cls_embedding();
    Pair { qcls, dest: Encoding::from_ids(dest), src: Encoding::from_ids(src) }
}

/// Draws pairs until one has a score gap of at least `min_gap`.
fn patcher<'m>(model: &'m Model, rng: &mut ChaCha8Rng, len: usize, min_gap: f64) -> (Pair, TriplePatcher<'m>) {
    for _ in 0..200 {
        let p = pair(model, rng, len);
        if let Ok(t) = TriplePatcher::new(model, p.qcls.clone(), p.dest.clone(), &p.src, min_gap) {
            return (p, t);
        }
    }
    panic!("no synthetic pair with a score gap of {min_gap}");
}

fn point(t: &HookPoint) -> Point {
    match t.site {
        Site::ResidPre => Point::ResidPre(t.layer),
        Site::AttnOut => Point::AttnOut(t.layer),
        Site::MlpOut => Point::MlpOut(t.layer),
        Site::HeadOut => Point::Head(t.layer, t.head.unwrap()),
    }
}

#[test]
fn criterion_1_forward_parity() {
    let (raw, model) = tiny(101);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let start = Instant::now();
    for len in [3, 12, 40, 96] {
        let ids = random_ids(&mut rng, len, CLS, SEP, FIRST_WORD, common::VOCAB_SIZE as u32);
        let mut mask = vec![1u8; len];
        if len > 10 {
            for m in &mut mask[len - 3..] {
                *m = 0;
            }
        }
        let got = model.forward(&ids, &mask, &Capture::none(), None).unwrap();
        let want = oracle::run(&raw, &ids, &mask, &[]);
        let scale = want.hidden.iter().flatten().fold(1.0f64, |m, v| m.max(v.abs()));
        for (p, row) in want.hidden.iter().enumerate() {
            for (g, w) in got.hidden.row(p).iter().zip(row) {
                worst = worst.max((f64::from(*g) - w).abs() / scale);
            }
        }
        for (g, w) in got.cls_embedding().iter().zip(want.cls()) {
            worst = worst.max((f64::from(*g) - w).abs() / scale);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        1,
        worst <= 1e-5 && secs < 1.0,
        &format!("forward parity max rel err {worst:.2e} (tol 1e-5), oracle + engine in {secs:.3}s (limit 1s)"),
    );
}

#[test]
fn criterion_2_patching_identity() {
    let (_, model) = tiny(102);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = model.config().clone();
    let mut worst = 0.0f64;
    let mut patches = 0;
    for _ in 0..3 {
        let (p, t) = patcher(&model, &mut rng, 20, 1e-3);
        let s = t.scores();
        let denom = f64::from(s.score_perturbed) - f64::from(s.score_baseline);
        let clean = model.forward_encoding(&p.dest, &Capture::all(), None).unwrap();
        let mut positions: Vec<usize> = (0..p.dest.len()).collect();
        positions.shuffle(&mut rng);
        positions.truncate(5);
        for l in 0..cfg.n_layers {
            let mut targets: Vec<HookPoint> = Vec::new();
            for &pos in &positions {
                targets.extend(Site::BLOCK.iter().map(|&site| HookPoint::block(l, site, pos)));
            }
            targets.extend((0..cfg.n_heads).map(|h| HookPoint::head(l, h)));
            for target in targets {
                let out = model
                    .forward_encoding(
                        &p.dest,
                        &Capture::none(),
                        Some(PatchSpec { targets: &[target], source: &clean.cache }),
                    )
                    .unwrap();
                let x = f64::from(relevance_score(&p.qcls, &out.cls_embedding()).unwrap());
                worst = worst.max(((x - f64::from(s.score_baseline)) / denom).abs());
                patches += 1;
            }
        }
    }
    verdict(2, worst <= 1e-5, &format!("self-patching max |impact| {worst:.2e} over {patches} patches (tol 1e-5)"));
}

#[test]
fn criterion_3_patching_completeness() {
    let (_, model) = tiny(103);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let mut n = 0;
    for len in [4, 9, 17, 33, 60] {
        for _ in 0..2 {
            let p = pair(&model, &mut rng, len);
            let t = match TriplePatcher::new(&model, p.qcls.clone(), p.dest.clone(), &p.src, 1e-6) {
                Ok(t) => t,
                Err(CoreError::DegenerateTriple { .. }) => continue,
                Err(e) => panic!("{e}"),
            };
            let all: Vec<HookPoint> = (0..len).map(|pos| HookPoint::block(0, Site::ResidPre, pos)).collect();
            let (_, impact) = t.impact_of(&all).unwrap();
            worst = worst.max((impact - 1.0).abs());
            n += 1;
        }
    }
    verdict(
        3,
        n >= 8 && worst <= 1e-4,
        &format!("layer-0 resid_pre full patch max |impact - 1| {worst:.2e} over {n} triples (tol 1e-4)"),
    );
}

#[test]
fn criterion_4_oracle_equivalence() {
    let (raw, model) = tiny(104);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = model.config().clone();
    let mut worst = 0.0f64;
    let mut n = 0;
    while n < 50 {
        // f32 scores carry ~1e-6 noise, so impacts resolve to 1e-5 only for well-separated pairs
        let (p, t) = patcher(&model, &mut rng, 12, 0.25);
        let mask = vec![1u8; p.dest.len()];
        let q64: Vec<f64> = p.qcls.iter().map(|&v| f64::from(v)).collect();
        let src_trace = oracle::run(&raw, &p.src.ids, &mask, &[]);
        let dest_score = oracle::dot(&q64, oracle::run(&raw, &p.dest.ids, &mask, &[]).cls());
        let src_score = oracle::dot(&q64, src_trace.cls());
        for _ in 0..10 {
            let layer = rng.gen_range(0..cfg.n_layers);
            let target = match rng.gen_range(0..4) {
                3 => HookPoint::head(layer, rng.gen_range(0..cfg.n_heads)),
                s => HookPoint::block(layer, Site::BLOCK[s], rng.gen_range(0..p.dest.len())),
            };
            let pt = point(&target);
            let sub = Substitution { point: pt, position: target.position, values: src_trace.at(pt).clone() };
            let patched = oracle::dot(&q64, oracle::run(&raw, &p.dest.ids, &mask, &[sub]).cls());
            let want = (patched - dest_score) / (src_score - dest_score);
            worst = worst.max((t.cell(target).unwrap().impact - want).abs());
            n += 1;
        }
    }
    verdict(4, worst <= 1e-5, &format!("{n} random single-site patches, max |impact - oracle| {worst:.2e} (tol 1e-5)"));
}

#[test]
fn criterion_5_impact_arithmetic() {
    let imp = |b: f32, p: f32, x: f32| {
        patching_impact(&PatchingScores { score_baseline: b, score_perturbed: p, score_patched: x }, 1e-6)
    };
    let exact = imp(10.0, 14.0, 10.0).unwrap() == 0.0
        && imp(10.0, 14.0, 14.0).unwrap() == 1.0
        && imp(10.0, 14.0, 12.0).unwrap() == 0.5;
    let degenerate = matches!(imp(10.0, 10.0, 12.0), Err(CoreError::DegenerateTriple { .. }))
        && matches!(imp(3.0, 3.0 + 5e-7, 3.0), Err(CoreError::DegenerateTriple { .. }));
    verdict(5, exact && degenerate, &format!("exact cases {exact}, sub-epsilon denominator refused {degenerate}"));
}

#[test]
fn criterion_6_dataset_invariants() {
    let desk = Desk::new(10, 50, 6);
    let args = |axiom: &str, out: &str| RunArgs {
        axiom: Some(axiom.into()),
        n_queries: Some(10),
        k: Some(50),
        ..desk.args(out)
    };
    let vocab = patchlens::io::read_vocab(&desk.path("vocab.txt")).unwrap();
    let mut problems = Vec::new();
    let mut counts = BTreeMap::new();

    for axiom in ["TFC1_I", "TFC1_R"] {
        let cfg = args(axiom, axiom).resolve().unwrap();
        build_dataset(&cfg).unwrap();
        let triples = read_dataset(&cfg.dataset).unwrap();
        counts.insert(axiom, triples.len());
        for t in &triples {
            if text_token_count(&t.baseline_text, &vocab) != text_token_count(&t.perturbed_text, &vocab) {
                problems.push(format!("{axiom} ({}, {}) token lengths differ", t.query.query_id, t.doc_id));
            }
            if axiom == "TFC1_R" {
                let term = t.selected_term.as_deref().unwrap();
                if basic_words(&t.perturbed_text).iter().any(|w| w.text == term) {
                    problems.push(format!("TFC1_R ({}, {}) keeps `{term}`", t.query.query_id, t.doc_id));
                }
            }
        }
    }

    let cfg = args("LNC1", "LNC1").resolve().unwrap();
    build_dataset(&cfg).unwrap();
    let triples = read_dataset(&cfg.dataset).unwrap();
    counts.insert("LNC1", triples.len());
    for t in &triples {
        let n = t.baseline_text.split_whitespace().count();
        let tail = t.perturbed_text.strip_prefix(t.baseline_text.as_str()).unwrap_or("");
        let noise: Vec<&str> = tail.split_whitespace().collect();
        let ok = noise.iter().all(|w| *w == t.filler) && (noise.len() == n || (t.truncated && noise.len() < n));
        if !ok {
            problems.push(format!(
                "LNC1 ({}, {}) has {} noise words for {n} source words",
                t.query.query_id,
                t.doc_id,
                noise.len()
            ));
        }
    }

    let again = args("TFC1_I", "TFC1_I_again").resolve().unwrap();
    build_dataset(&again).unwrap();
    let identical = snapshot(&desk.path("TFC1_I")) == snapshot(&desk.path("TFC1_I_again"));
    if !identical {
        problems.push("rebuild with the same seed differs".into());
    }
    let nonempty = counts.values().all(|&n| n > 0);
    verdict(
        6,
        problems.is_empty() && nonempty,
        &format!("10x50 desk corpus, triples {counts:?}, rebuild byte-identical {identical}, violations {problems:?}"),
    );
}

fn shuffled_copy(cfg: &RunConfig, to: &Path, seed: u64) {
    fs::create_dir_all(to).unwrap();
    for name in ["run_summary.json", "dataset.jsonl"] {
        fs::copy(cfg.output_dir.join(name), to.join(name)).unwrap();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for site in Site::ALL {
        let mut recs: Vec<ImpactRecord> = read_jsonl(&cfg.results_path(site)).unwrap();
        recs.shuffle(&mut rng);
        write_jsonl(&to.join(format!("results_{}.jsonl", site.as_str())), &recs).unwrap();
    }
}

#[test]
fn criterion_9_reporting_determinism() {
    let desk = Desk::new(8, 40, 9);
    let args = RunArgs { n_queries: Some(3), k: Some(5), ..desk.args("out") };
    let cfg = args.resolve().unwrap();
    build_dataset(&cfg).unwrap();
    run_experiment(&cfg, RunOptions::default()).unwrap();
    let first = snapshot(&write_report(&cfg).unwrap());
    let second = snapshot(&write_report(&cfg).unwrap());
    let rerun = first == second;

    let mut invariant = true;
    for seed in 0..3 {
        let dir = desk.path(&format!("shuffled{seed}"));
        shuffled_copy(&cfg, &dir, seed);
        let cfg2 = RunArgs { output_dir: Some(dir.clone()), dataset: Some(dir.join("dataset.jsonl")), ..args.clone() }
            .resolve()
            .unwrap();
        invariant &= snapshot(&write_report(&cfg2).unwrap()) == first;
    }
    verdict(
        9,
        rerun && invariant && first.len() >= 14,
        &format!(
            "{} report files; rerun byte-identical {rerun}; identical under 3 record shuffles {invariant}",
            first.len()
        ),
    );
}

// ---- real checkpoint and corpus ----

struct RealAssets {
    model_dir: PathBuf,
    data_dir: PathBuf,
}

fn real_assets(n: u32) -> RealAssets {
    let get = |var: &str| std::env::var_os(var).map(PathBuf::from).filter(|p| p.is_dir());
    match (get("PATCHLENS_TASB_DIR"), get("PATCHLENS_MSMARCO_DIR")) {
        (Some(model_dir), Some(data_dir)) => RealAssets { model_dir, data_dir },
        _ => {
            verdict(n, false, "needs PATCHLENS_TASB_DIR (model.safetensors, config.json, vocab.txt) and PATCHLENS_MSMARCO_DIR (collection.tsv, queries.tsv, optional qrels.tsv)");
            unreachable!()
        }
    }
}

fn real_args(a: &RealAssets, out: &Path, axiom: &str) -> RunArgs {
    let qrels = a.data_dir.join("qrels.tsv");
    RunArgs {
        model_archive: Some(a.model_dir.join("model.safetensors")),
        vocab: Some(a.model_dir.join("vocab.txt")),
        corpus: Some(a.data_dir.join("collection.tsv")),
        queries: Some(a.data_dir.join("queries.tsv")),
        qrels: qrels.is_file().then_some(qrels),
        output_dir: Some(out.to_path_buf()),
        axiom: Some(axiom.into()),
        n_queries: Some(10),
        k: Some(20),
        threads: std::thread::available_parallelism().ok().map(|n| n.get()),
        ..RunArgs::default()
    }
}

fn heatmap<'a>(report: &'a Value, name: &str) -> &'a Value {
    report["heatmaps"].as_array().unwrap().iter().find(|h| h["name"] == name).unwrap()
}

fn cell(h: &Value, layer: usize, column: &str) -> Option<f64> {
    let c = h["columns"].as_array().unwrap().iter().position(|v| v == column)?;
    h["values"][layer][c].as_f64()
}

fn argmax(h: &Value) -> Option<(usize, String, f64)> {
    let cols: Vec<String> = h["columns"].as_array().unwrap().iter().map(|v| v.as_str().unwrap().to_string()).collect();
    let mut best: Option<(usize, String, f64)> = None;
    for (l, row) in h["values"].as_array().unwrap().iter().enumerate() {
        for (c, v) in row.as_array().unwrap().iter().enumerate() {
            if let Some(v) = v.as_f64() {
                if best.as_ref().is_none_or(|b| v > b.2) {
                    best = Some((l, cols[c].clone(), v));
                }
            }
        }
    }
    best
}

fn run_real(args: &RunArgs, sites: &[&str]) -> (RunConfig, Value) {
    let args = RunArgs { sites: Some(sites.iter().map(|s| s.to_string()).collect()), ..args.clone() };
    let cfg = args.resolve().unwrap();
    fs::create_dir_all(&cfg.output_dir).unwrap();
    build_dataset(&cfg).unwrap();
    run_experiment(&cfg, RunOptions::default()).unwrap();
    let dir = write_report(&cfg).unwrap();
    let report: Value = serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    (cfg, report)
}

#[test]
#[ignore = "needs the TAS-B checkpoint and an MS MARCO subset"]
fn criterion_7_real_model_tfc1_structure() {
    let assets = real_assets(7);
    let out = tempfile::tempdir().unwrap();
    let (cfg, report) = run_real(&real_args(&assets, out.path(), "TFC1_I"), &["resid_pre", "head_out"]);
    let block = heatmap(&report, "block_resid_pre");
    let early = [0usize, 1];
    let a = early.iter().all(|&l| {
        let other = cell(block, l, "tok_other").unwrap_or(f64::INFINITY);
        cell(block, l, "tok_inj").is_some_and(|v| v > other) && cell(block, l, "tok_qterm+").is_some_and(|v| v > other)
    });
    let top = argmax(block);
    let b = top.as_ref().is_some_and(|(l, c, _)| *l == 5 && c == "tok_CLS");
    let heads: Vec<(u64, u64)> = heatmap(&report, "heads_top10")["top_heads"]
        .as_array()
        .unwrap()
        .iter()
        .take(6)
        .map(|t| (t[0].as_u64().unwrap(), t[1].as_u64().unwrap()))
        .collect();
    let known = [(0, 9), (1, 6), (2, 3), (3, 8)];
    let overlap = heads.iter().filter(|h| known.contains(h)).count();
    let c = overlap >= 2;
    let triples = read_dataset(&cfg.dataset).unwrap().len();
    verdict(
        7,
        a && b && c,
        &format!("{triples} triples; (a) early inj/qterm+ > other {a}; (b) max cell {top:?} is L5 tok_CLS {b}; (c) top-6 heads {heads:?} share {overlap} with the reported set"),
    );
}

#[test]
#[ignore = "needs the TAS-B checkpoint and an MS MARCO subset"]
fn criterion_8_real_model_lnc1_direction() {
    let assets = real_assets(8);
    let out = tempfile::tempdir().unwrap();
    let args = RunArgs { keep_noncompliant: Some(true), ..real_args(&assets, out.path(), "LNC1") };
    let (cfg, report) = run_real(&args, &["resid_pre"]);
    let triples = read_dataset(&cfg.dataset).unwrap();
    let compliant: Vec<_> = triples.iter().filter(|t| t.compliant).collect();
    let mean = |f: &dyn Fn(&&patchlens_core::Triple) -> f32| {
        compliant.iter().map(|t| f64::from(f(t))).sum::<f64>() / compliant.len().max(1) as f64
    };
    let (base, pert) = (mean(&|t| t.baseline_score), mean(&|t| t.perturbed_score));
    let top = argmax(heatmap(&report, "block_resid_pre"));
    let dominated = top.as_ref().is_some_and(|(l, c, _)| *l == 5 && c == "tok_CLS");
    verdict(
        8,
        !compliant.is_empty() && pert < base && dominated,
        &format!(
            "{} of {} triples compliant; mean perturbed {pert:.4} vs baseline {base:.4}; max cell {top:?}",
            compliant.len(),
            triples.len()
        ),
    );
}
