// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dataset construction: ingest, retrieve, select queries, perturb, score, classify.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;

use anyhow::{Context, Result};
use patchlens_core::dataset::{
    classify_tokens, perturb_lnc1, perturb_tfc1_inject, perturb_tfc1_replace, rank_top_k, select_queries, triple_seed,
    LNC1_NOISE,
};
use patchlens_core::patching::{embed_cls, encode_pair, score_pair};
use patchlens_core::tokenizer::normalize;
use patchlens_core::{encode, Axiom, ChangeBasis, CorpusDoc, Error as CoreError, Model, Query, Triple, Variant, Vocab};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::archive;
use crate::config::RunConfig;
use crate::io;

/// Written next to the dataset; everything needed to rebuild it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildManifest {
    pub seed: u64,
    pub k: usize,
    pub k_effective: usize,
    pub n_queries: usize,
    pub basis: ChangeBasis,
    pub axiom: Axiom,
    pub variant: Variant,
    pub filler: String,
    pub max_len: usize,
    pub lnc1_mask_mode: patchlens_core::PadMode,
    pub keep_noncompliant: bool,
    pub corpus_docs: usize,
    pub corpus_malformed_lines: usize,
    pub queries_total: usize,
    pub queries_malformed_lines: usize,
    pub retrieval_pool: usize,
    pub selected_queries: Vec<SelectedQuery>,
    pub discards: DiscardStats,
    pub triples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedQuery {
    pub query_id: String,
    /// Mean append score change; `None` when every triple was excluded.
    pub mean_change: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DiscardStats {
    /// Selection-stage append triples that could not be built.
    pub selection_dropped: usize,
    /// Triples that could not be built for the requested axiom.
    pub perturbation_dropped: usize,
    /// Of those, documents or queries that already contain the LNC1 noise word.
    pub noise_present: usize,
    /// Built and scored triples whose score moved against the axiom.
    pub non_compliant: usize,
    /// `non_compliant / scored`.
    pub non_compliant_rate: f64,
    /// LNC1 triples whose noise region was shortened.
    pub truncated: usize,
}

pub const DATASET_MANIFEST: &str = "dataset_manifest.json";

struct Inputs {
    vocab: Vocab,
    model: Model,
    docs: Vec<CorpusDoc>,
    queries: Vec<Query>,
    corpus_total: usize,
    corpus_malformed: usize,
    queries_malformed: usize,
}

fn load_inputs(cfg: &RunConfig) -> Result<Inputs> {
    let vocab = io::read_vocab(cfg.require("vocab", &cfg.vocab)?)?;
    let archive_path = cfg.require("model-archive", &cfg.model_archive)?;
    let mcfg = archive::resolve_model_config(archive_path, cfg.model_config.as_deref())?;
    let model = archive::load_model(archive_path, mcfg)?;
    let corpus = io::read_tsv(cfg.require("corpus", &cfg.corpus)?)?;
    let queries = io::read_tsv(cfg.require("queries", &cfg.queries)?)?;
    let corpus_total = corpus.rows.len();
    let mut docs: Vec<CorpusDoc> = corpus.rows.into_iter().map(|(doc_id, text)| CorpusDoc { doc_id, text }).collect();
    if let Some(path) = &cfg.qrels {
        let qids: BTreeSet<&str> = queries.rows.iter().map(|(id, _)| id.as_str()).collect();
        let judged: BTreeSet<String> =
            io::read_qrels(path)?.into_iter().filter(|(q, _)| qids.contains(q.as_str())).map(|(_, d)| d).collect();
        docs.retain(|d| judged.contains(&d.doc_id));
        log::info!("qrels restrict the retrieval pool to {} documents", docs.len());
    }
    if docs.is_empty() {
        anyhow::bail!("the retrieval pool is empty");
    }
    let queries_malformed = queries.malformed;
    let queries = queries.rows.into_iter().map(|(id, text)| Query::new(id, text)).collect();
    Ok(Inputs { vocab, model, docs, queries, corpus_total, corpus_malformed: corpus.malformed, queries_malformed })
}

fn score_triple(
    model: &Model,
    vocab: &Vocab,
    cfg: &RunConfig,
    max_len: usize,
    qcls: &[f32],
    t: &mut Triple,
) -> Result<()> {
    let pair = encode_pair(t, vocab, max_len, cfg.lnc1_mask_mode);
    let (b, p) = score_pair(model, qcls, &pair)?;
    t.set_scores(b, p);
    Ok(())
}

/// Builds the dataset and writes `dataset.jsonl` plus its manifest.
pub fn build_dataset(cfg: &RunConfig) -> Result<BuildManifest> {
    let inputs = load_inputs(cfg).context("[load]")?;
    let Inputs { vocab, model, docs, queries, .. } = &inputs;
    let pool = cfg.thread_pool()?;
    let max_len = cfg.max_len.min(model.config().max_positions);

    // retrieval
    let k_eff = cfg.k.min(docs.len());
    if k_eff < cfg.k {
        log::warn!("k = {} exceeds the retrieval pool of {} documents; using {k_eff}", cfg.k, docs.len());
    }
    let (qcls, ranked) = pool
        .install(|| -> Result<_> {
            let doc_cls: Vec<Vec<f32>> = docs
                .par_iter()
                .map(|d| embed_cls(model, &encode(&d.text, vocab, max_len)))
                .collect::<patchlens_core::Result<_>>()?;
            let qcls: Vec<Vec<f32>> = queries
                .par_iter()
                .map(|q| embed_cls(model, &encode(&q.text, vocab, max_len)))
                .collect::<patchlens_core::Result<_>>()?;
            let ranked: Vec<Vec<(String, f32)>> = qcls
                .par_iter()
                .map(|q| {
                    let scored = docs
                        .iter()
                        .zip(&doc_cls)
                        .map(|(d, c)| Ok((d.doc_id.clone(), patchlens_core::relevance_score(q, c)?)))
                        .collect::<patchlens_core::Result<Vec<_>>>()?;
                    Ok(rank_top_k(scored, k_eff))
                })
                .collect::<patchlens_core::Result<_>>()?;
            Ok((qcls, ranked))
        })
        .context("[retrieve]")?;
    let doc_index: BTreeMap<&str, &CorpusDoc> = docs.iter().map(|d| (d.doc_id.as_str(), d)).collect();

    // query selection on append injections
    let selection: Vec<(Vec<Triple>, usize)> = pool
        .install(|| {
            queries
                .par_iter()
                .zip(&qcls)
                .zip(&ranked)
                .map(|((q, qc), top)| {
                    let mut out = Vec::new();
                    let mut dropped = 0;
                    for (doc_id, retrieval) in top {
                        let doc = doc_index[doc_id.as_str()];
                        let seed = triple_seed(cfg.seed, &q.query_id, doc_id);
                        match perturb_tfc1_inject(q, doc, Variant::Append, seed, &cfg.filler, vocab, max_len) {
                            Ok(mut t) => {
                                t.retrieval_score = *retrieval;
                                score_triple(model, vocab, cfg, max_len, qc, &mut t)?;
                                out.push(t);
                            }
                            Err(CoreError::Dropped(why)) => {
                                log::debug!("selection drop ({}, {doc_id}): {why}", q.query_id);
                                dropped += 1;
                            }
                            Err(e) => return Err(e.into()),
                        }
                    }
                    Ok((out, dropped))
                })
                .collect::<Result<_>>()
        })
        .context("[select]")?;
    let mut discards =
        DiscardStats { selection_dropped: selection.iter().map(|s| s.1).sum(), ..DiscardStats::default() };
    let candidates: Vec<(String, Vec<(f32, f32)>)> = queries
        .iter()
        .zip(&selection)
        .map(|(q, (ts, _))| (q.query_id.clone(), ts.iter().map(|t| (t.baseline_score, t.perturbed_score)).collect()))
        .collect();
    let chosen = select_queries(&candidates, cfg.n_queries, cfg.basis);
    if chosen.len() < cfg.n_queries {
        log::warn!("only {} queries available, {} requested", chosen.len(), cfg.n_queries);
    }
    let chosen_ids: BTreeSet<&str> = chosen.iter().map(|(id, _)| id.as_str()).collect();

    // perturbation of the selected queries
    let reuse = cfg.axiom == Axiom::Tfc1Inject && cfg.variant == Variant::Append;
    let noise = normalize(LNC1_NOISE);
    let per_query: Vec<(Vec<Triple>, usize, usize)> = pool
        .install(|| {
            queries
                .par_iter()
                .enumerate()
                .filter(|(_, q)| chosen_ids.contains(q.query_id.as_str()))
                .map(|(i, q)| {
                    if reuse {
                        return Ok((selection[i].0.clone(), selection[i].1, 0));
                    }
                    let mut out = Vec::new();
                    let (mut dropped, mut noisy) = (0, 0);
                    for (doc_id, retrieval) in &ranked[i] {
                        let doc = doc_index[doc_id.as_str()];
                        let seed = triple_seed(cfg.seed, &q.query_id, doc_id);
                        let made = match cfg.axiom {
                            Axiom::Tfc1Inject => {
                                perturb_tfc1_inject(q, doc, cfg.variant, seed, &cfg.filler, vocab, max_len)
                            }
                            Axiom::Tfc1Replace => perturb_tfc1_replace(q, doc, seed, &cfg.filler, vocab, max_len),
                            Axiom::Lnc1 => {
                                if q.terms.contains(&noise)
                                    || patchlens_core::tokenizer::query_terms(&doc.text).contains(&noise)
                                {
                                    noisy += 1;
                                    dropped += 1;
                                    continue;
                                }
                                perturb_lnc1(q, doc, LNC1_NOISE, vocab, max_len)
                            }
                        };
                        match made {
                            Ok(mut t) => {
                                t.retrieval_score = *retrieval;
                                score_triple(model, vocab, cfg, max_len, &qcls[i], &mut t)?;
                                out.push(t);
                            }
                            Err(CoreError::Dropped(why)) => {
                                log::debug!("drop ({}, {doc_id}): {why}", q.query_id);
                                dropped += 1;
                            }
                            Err(e) => return Err(e.into()),
                        }
                    }
                    Ok((out, dropped, noisy))
                })
                .collect::<Result<_>>()
        })
        .context("[perturb]")?;

    let mut triples = Vec::new();
    let mut scored = 0usize;
    for (ts, dropped, noisy) in per_query {
        discards.perturbation_dropped += dropped;
        discards.noise_present += noisy;
        for t in ts {
            scored += 1;
            if !t.compliant {
                discards.non_compliant += 1;
                if !cfg.keep_noncompliant {
                    continue;
                }
            }
            discards.truncated += usize::from(t.truncated);
            triples.push(t);
        }
    }
    discards.non_compliant_rate = if scored > 0 { discards.non_compliant as f64 / scored as f64 } else { 0.0 };
    triples.sort_by(|a, b| (&a.query.query_id, &a.doc_id).cmp(&(&b.query.query_id, &b.doc_id)));

    // every kept triple must classify cleanly
    for t in &triples {
        let enc = encode(t.classification_text(), vocab, max_len);
        classify_tokens(t, &enc).with_context(|| format!("[classify] ({}, {})", t.query.query_id, t.doc_id))?;
    }

    let manifest = BuildManifest {
        seed: cfg.seed,
        k: cfg.k,
        k_effective: k_eff,
        n_queries: cfg.n_queries,
        basis: cfg.basis,
        axiom: cfg.axiom,
        variant: cfg.variant,
        filler: if cfg.axiom == Axiom::Lnc1 { LNC1_NOISE.to_string() } else { cfg.filler.clone() },
        max_len,
        lnc1_mask_mode: cfg.lnc1_mask_mode,
        keep_noncompliant: cfg.keep_noncompliant,
        corpus_docs: inputs.corpus_total,
        corpus_malformed_lines: inputs.corpus_malformed,
        queries_total: queries.len(),
        queries_malformed_lines: inputs.queries_malformed,
        retrieval_pool: docs.len(),
        selected_queries: chosen
            .into_iter()
            .map(|(query_id, mean_change)| SelectedQuery { query_id, mean_change })
            .collect(),
        discards,
        triples: triples.len(),
    };
    (|| -> Result<()> {
        if let Some(dir) = cfg.dataset.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        io::write_dataset(&cfg.dataset, &triples)?;
        io::write_json(&manifest_path(cfg), &manifest)?;
        Ok(())
    })()
    .context("[write]")?;
    log::info!(
        "wrote {} triples for {} queries to {}",
        triples.len(),
        manifest.selected_queries.len(),
        cfg.dataset.display()
    );
    Ok(manifest)
}

pub fn manifest_path(cfg: &RunConfig) -> std::path::PathBuf {
    cfg.dataset.with_file_name(DATASET_MANIFEST)
}
