// SPDX-License-Identifier: MIT OR Apache-2.0

//! Patching runs over a dataset, with a resumable checkpoint.
//!
//! Each finished triple appends its records to `checkpoint/<site>.jsonl` and
//! then a line to `checkpoint/progress.jsonl`; a triple counts as finished only
//! once its progress line exists. The final `results_<site>.jsonl` files are
//! written sorted when every triple is finished, so their bytes do not depend
//! on scheduling or on interruptions.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use anyhow::{bail, Context, Result};
use patchlens_core::patching::{embed_cls, encode_pair};
use patchlens_core::{
    encode, Axiom, Error as CoreError, ImpactRecord, Model, PadMode, Site, Triple, TriplePatcher, Variant, Vocab,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::archive;
use crate::config::RunConfig;
use crate::io;

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub resume: bool,
    /// Stop after this many newly finished triples, leaving the checkpoint in place.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Status {
    Done,
    Skipped,
    Error,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Progress {
    query_id: String,
    doc_id: String,
    status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    message: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripleNote {
    pub query_id: String,
    pub doc_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub axiom: Axiom,
    pub variant: Variant,
    pub sites: Vec<Site>,
    pub impact_epsilon: f64,
    pub lnc1_mask_mode: PadMode,
    pub max_len: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub triples: usize,
    pub compliant: usize,
    pub completed: usize,
    pub skipped_degenerate: usize,
    pub errored: usize,
    /// Triples taken from an earlier interrupted run.
    pub resumed: usize,
    /// Triples processed by this invocation.
    pub computed: usize,
    pub finished: bool,
    pub records: BTreeMap<Site, usize>,
    pub skipped: Vec<TripleNote>,
    pub errors: Vec<TripleNote>,
}

pub const RUN_SUMMARY: &str = "run_summary.json";

fn checkpoint_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join("checkpoint")
}

fn checkpoint_file(cfg: &RunConfig, site: Site) -> PathBuf {
    checkpoint_dir(cfg).join(format!("{}.jsonl", site.as_str()))
}

/// Lines that parse; a torn final line from an interrupted write is dropped.
fn read_lines_lenient<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().filter_map(|l| serde_json::from_str(l).ok()).collect())
}

type Key = (String, String);

fn key_of(t: &Triple) -> Key {
    (t.query.query_id.clone(), t.doc_id.clone())
}

/// All records of one triple, per site.
fn patch_triple(
    model: &Model,
    vocab: &Vocab,
    cfg: &RunConfig,
    max_len: usize,
    qcls: &[f32],
    t: &Triple,
) -> patchlens_core::Result<Vec<(Site, Vec<ImpactRecord>)>> {
    let pair = encode_pair(t, vocab, max_len, cfg.lnc1_mask_mode);
    let patcher = TriplePatcher::for_triple(model, qcls.to_vec(), pair, t.axiom, cfg.impact_epsilon)?;
    let scores = patcher.scores();
    let mut out = Vec::with_capacity(cfg.sites.len());
    for &site in &cfg.sites {
        let cells = if site == Site::HeadOut { patcher.run_heads()?.cells } else { patcher.run_block(site)?.cells };
        out.push((site, cells.iter().map(|c| ImpactRecord::from_cell(t, scores, c)).collect()));
    }
    Ok(out)
}

struct Sink {
    sites: BTreeMap<Site, BufWriter<File>>,
    progress: BufWriter<File>,
}

impl Sink {
    fn open(cfg: &RunConfig) -> Result<Self> {
        let open = |p: PathBuf| -> Result<BufWriter<File>> {
            let f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&p)
                .with_context(|| format!("opening {}", p.display()))?;
            Ok(BufWriter::new(f))
        };
        let mut sites = BTreeMap::new();
        for &s in &cfg.sites {
            sites.insert(s, open(checkpoint_file(cfg, s))?);
        }
        Ok(Self { sites, progress: open(checkpoint_dir(cfg).join("progress.jsonl"))? })
    }

    fn commit(&mut self, p: &Progress, records: &[(Site, Vec<ImpactRecord>)]) -> Result<()> {
        for (site, recs) in records {
            let w = self.sites.get_mut(site).expect("site writer");
            for r in recs {
                serde_json::to_writer(&mut *w, r)?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
        }
        serde_json::to_writer(&mut self.progress, p)?;
        self.progress.write_all(b"\n")?;
        self.progress.flush()?;
        Ok(())
    }
}

fn load_triples(cfg: &RunConfig) -> Result<Vec<Triple>> {
    if !cfg.dataset.is_file() {
        bail!("dataset {} does not exist; run build-dataset first", cfg.dataset.display());
    }
    let mut triples = io::read_dataset(&cfg.dataset)?;
    if triples.is_empty() {
        log::warn!("dataset {} is empty", cfg.dataset.display());
    }
    for t in &triples {
        if (t.axiom, t.variant) != (cfg.axiom, cfg.variant) {
            bail!(
                "dataset triple ({}, {}) is {}/{}, the configuration asks for {}/{}",
                t.query.query_id,
                t.doc_id,
                t.axiom,
                t.variant,
                cfg.axiom,
                cfg.variant
            );
        }
    }
    triples.sort_by_key(key_of);
    let before = triples.len();
    triples.dedup_by(|a, b| key_of(a) == key_of(b));
    if triples.len() != before {
        bail!("dataset {} repeats a (query_id, doc_id) pair", cfg.dataset.display());
    }
    Ok(triples)
}

/// Runs every requested site over the dataset.
pub fn run_experiment(cfg: &RunConfig, opts: RunOptions) -> Result<RunSummary> {
    let (model, vocab) = (|| -> Result<_> {
        let vocab = io::read_vocab(cfg.require("vocab", &cfg.vocab)?)?;
        let archive_path = cfg.require("model-archive", &cfg.model_archive)?;
        let mcfg = archive::resolve_model_config(archive_path, cfg.model_config.as_deref())?;
        Ok((archive::load_model(archive_path, mcfg)?, vocab))
    })()
    .context("[load]")?;
    let triples = load_triples(cfg).context("[dataset]")?;
    let max_len = cfg.max_len.min(model.config().max_positions);
    let pool = cfg.thread_pool()?;

    // checkpoint state
    let ck = checkpoint_dir(cfg);
    let mut finished: BTreeMap<Key, Progress> = BTreeMap::new();
    (|| -> Result<()> {
        if opts.resume && ck.is_dir() {
            for p in read_lines_lenient::<Progress>(&ck.join("progress.jsonl"))? {
                if p.status != Status::Error {
                    finished.insert((p.query_id.clone(), p.doc_id.clone()), p);
                }
            }
            // keep only records of finished triples, then rewrite the checkpoint cleanly
            for &s in &cfg.sites {
                let recs: Vec<ImpactRecord> = read_lines_lenient::<ImpactRecord>(&checkpoint_file(cfg, s))?
                    .into_iter()
                    .filter(|r| finished.contains_key(&(r.query_id.clone(), r.doc_id.clone())))
                    .collect();
                io::write_jsonl(&checkpoint_file(cfg, s), &recs)?;
            }
            let kept: Vec<&Progress> = finished.values().collect();
            io::write_jsonl(&ck.join("progress.jsonl"), &kept)?;
            log::info!("resuming: {} of {} triples already finished", finished.len(), triples.len());
        } else {
            if opts.resume {
                log::warn!("--resume given but no checkpoint in {}; starting fresh", ck.display());
            }
            if ck.exists() {
                fs::remove_dir_all(&ck).with_context(|| format!("clearing {}", ck.display()))?;
            }
            for s in Site::ALL {
                let p = cfg.results_path(s);
                if p.exists() {
                    fs::remove_file(&p).with_context(|| format!("removing {}", p.display()))?;
                }
            }
        }
        fs::create_dir_all(&ck).with_context(|| format!("creating {}", ck.display()))?;
        Ok(())
    })()
    .context("[checkpoint]")?;
    let resumed = finished.len();

    let mut todo: Vec<&Triple> = triples.iter().filter(|t| !finished.contains_key(&key_of(t))).collect();
    if let Some(n) = opts.stop_after {
        todo.truncate(n);
    }

    // query embeddings, once per query
    let mut query_text: BTreeMap<&str, &str> = BTreeMap::new();
    for t in &todo {
        query_text.insert(&t.query.query_id, &t.query.text);
    }
    let qcls: BTreeMap<&str, Vec<f32>> = pool
        .install(|| {
            query_text
                .par_iter()
                .map(|(id, text)| Ok((*id, embed_cls(&model, &encode(text, &vocab, max_len))?)))
                .collect::<patchlens_core::Result<_>>()
        })
        .context("[embed]")?;

    let sink = Mutex::new(Sink::open(cfg).context("[checkpoint]")?);
    let computed = todo.len();
    pool.install(|| {
        todo.par_iter().try_for_each(|t| -> Result<()> {
            let outcome = patch_triple(&model, &vocab, cfg, max_len, &qcls[t.query.query_id.as_str()], t);
            let (status, message, records) = match outcome {
                Ok(r) => (Status::Done, None, r),
                Err(e @ CoreError::DegenerateTriple { .. }) => (Status::Skipped, Some(e.to_string()), Vec::new()),
                Err(e) => {
                    log::warn!("triple ({}, {}) failed: {e}", t.query.query_id, t.doc_id);
                    (Status::Error, Some(e.to_string()), Vec::new())
                }
            };
            let p = Progress { query_id: t.query.query_id.clone(), doc_id: t.doc_id.clone(), status, message };
            sink.lock().expect("checkpoint lock").commit(&p, &records)
        })
    })
    .context("[run]")?;
    drop(sink);

    // gather everything recorded so far
    let all_progress = read_lines_lenient::<Progress>(&ck.join("progress.jsonl")).context("[finalize]")?;
    let mut status: BTreeMap<Key, Progress> = BTreeMap::new();
    for p in all_progress {
        status.insert((p.query_id.clone(), p.doc_id.clone()), p);
    }
    let note = |p: &Progress| TripleNote {
        query_id: p.query_id.clone(),
        doc_id: p.doc_id.clone(),
        reason: p.message.clone().unwrap_or_default(),
    };
    let skipped: Vec<TripleNote> = status.values().filter(|p| p.status == Status::Skipped).map(note).collect();
    let errors: Vec<TripleNote> = status.values().filter(|p| p.status == Status::Error).map(note).collect();
    let done: BTreeSet<&Key> = status.iter().filter(|(_, p)| p.status == Status::Done).map(|(k, _)| k).collect();
    let all_finished = triples.iter().all(|t| status.contains_key(&key_of(t)));

    let mut summary = RunSummary {
        axiom: cfg.axiom,
        variant: cfg.variant,
        sites: cfg.sites.clone(),
        impact_epsilon: cfg.impact_epsilon,
        lnc1_mask_mode: cfg.lnc1_mask_mode,
        max_len,
        n_layers: model.config().n_layers,
        n_heads: model.config().n_heads,
        triples: triples.len(),
        compliant: triples.iter().filter(|t| t.compliant).count(),
        completed: done.len(),
        skipped_degenerate: skipped.len(),
        errored: errors.len(),
        resumed,
        computed,
        finished: all_finished,
        records: BTreeMap::new(),
        skipped,
        errors,
    };
    if !all_finished {
        log::info!(
            "stopped with {} of {} triples finished; rerun with --resume to continue",
            status.len(),
            triples.len()
        );
        return Ok(summary);
    }

    (|| -> Result<()> {
        for &s in &cfg.sites {
            let mut recs: Vec<ImpactRecord> = read_lines_lenient(&checkpoint_file(cfg, s))?;
            recs.retain(|r| done.contains(&(r.query_id.clone(), r.doc_id.clone())));
            recs.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
            recs.dedup_by(|a, b| a.sort_key() == b.sort_key());
            summary.records.insert(s, recs.len());
            io::write_jsonl(&cfg.results_path(s), &recs)?;
        }
        io::write_json(&cfg.output_dir.join(RUN_SUMMARY), &summary)?;
        fs::remove_dir_all(&ck).with_context(|| format!("removing {}", ck.display()))?;
        Ok(())
    })()
    .context("[finalize]")?;
    log::info!(
        "{} triples patched, {} skipped as degenerate, {} failed",
        summary.completed,
        summary.skipped_degenerate,
        summary.errored
    );
    Ok(summary)
}
