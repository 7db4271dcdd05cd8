// SPDX-License-Identifier: MIT OR Apache-2.0

//! Report bundle: class and head heatmaps as CSV, SVG and one JSON file.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use patchlens_core::dataset::classify_tokens;
use patchlens_core::report::{
    aggregate_block, aggregate_heads, heatmap_svg, matrix_csv, round_sig9, score_summary, top_heads, TripleKey,
};
use patchlens_core::{encode, Axiom, HeadSplit, ImpactRecord, Site, TokenClassMap, Variant, Weighting};
use serde::Serialize;

use crate::config::RunConfig;
use crate::io;
use crate::run::{RunSummary, RUN_SUMMARY};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeatmapEntry {
    pub name: String,
    pub site: Site,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<HeadSplit>,
    /// Residual-stream views are the primary figures; `mlp_out` is supporting.
    pub secondary: bool,
    pub rows: Vec<String>,
    pub columns: Vec<String>,
    pub values: Vec<Vec<Option<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub counts: Option<Vec<Vec<usize>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub triples: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top_heads: Option<Vec<(usize, usize, f64)>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportMeta {
    pub axiom: Axiom,
    pub variant: Variant,
    pub weighting: Weighting,
    pub fixed_scale: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scale: Option<(f64, f64)>,
    pub triples: usize,
    pub skipped_degenerate: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub meta: ReportMeta,
    pub heatmaps: Vec<HeatmapEntry>,
}

pub const REPORT_DIR: &str = "report";
const TOP_HEADS: usize = 10;

fn rounded(values: &[Vec<Option<f64>>]) -> Vec<Vec<Option<f64>>> {
    values.iter().map(|r| r.iter().map(|v| v.map(round_sig9)).collect()).collect()
}

/// Aggregates the run in `cfg.output_dir` and writes `<output_dir>/report/`.
pub fn write_report(cfg: &RunConfig) -> Result<PathBuf> {
    let summary: RunSummary = io::read_json(&cfg.output_dir.join(RUN_SUMMARY))
        .context("[report] no finished run in the output directory; run first")?;
    let triples = io::read_dataset(&cfg.dataset).context("[report]")?;
    let vocab = io::read_vocab(cfg.require("vocab", &cfg.vocab)?).context("[report]")?;

    let mut classmaps: BTreeMap<TripleKey, TokenClassMap> = BTreeMap::new();
    let mut retrieval: BTreeMap<TripleKey, f32> = BTreeMap::new();
    for t in &triples {
        let key = (t.query.query_id.clone(), t.doc_id.clone());
        let enc = encode(t.classification_text(), &vocab, summary.max_len);
        classmaps.insert(key.clone(), classify_tokens(t, &enc).context("[report] classify")?);
        retrieval.insert(key, t.retrieval_score);
    }

    let rows: Vec<String> = (0..summary.n_layers).map(|l| format!("L{l}")).collect();
    let mut heatmaps = Vec::new();
    for &site in &summary.sites {
        let path = cfg.results_path(site);
        let records: Vec<ImpactRecord> = io::read_jsonl(&path).context("[report]")?;
        if records.is_empty() {
            log::warn!("{} has no records", path.display());
            continue;
        }
        if site.is_block() {
            let hm = aggregate_block(&records, &classmaps, summary.n_layers, cfg.weighting)
                .with_context(|| format!("[report] {site}"))?;
            heatmaps.push(HeatmapEntry {
                name: format!("block_{site}"),
                site,
                split: None,
                secondary: site == Site::MlpOut,
                rows: rows.clone(),
                columns: hm.col_labels(),
                values: hm.values,
                counts: Some(hm.counts),
                triples: None,
                top_heads: None,
            });
        } else {
            let columns: Vec<String> = (0..summary.n_heads).map(|h| format!("H{h}")).collect();
            for split in HeadSplit::ALL {
                let hm = aggregate_heads(&records, &retrieval, split, summary.n_layers, summary.n_heads)
                    .with_context(|| format!("[report] heads {}", split.as_str()))?;
                let top = top_heads(&hm, TOP_HEADS).into_iter().map(|(l, h, v)| (l, h, round_sig9(v))).collect();
                heatmaps.push(HeatmapEntry {
                    name: format!("heads_{}", split.as_str()),
                    site,
                    split: Some(split),
                    secondary: false,
                    rows: rows.clone(),
                    columns: columns.clone(),
                    values: hm.values,
                    counts: None,
                    triples: Some(hm.triples),
                    top_heads: Some(top),
                });
            }
        }
    }
    if heatmaps.is_empty() {
        bail!("[report] no impact records to aggregate");
    }

    let scale = cfg.fixed_scale.then(|| {
        heatmaps
            .iter()
            .flat_map(|h| h.values.iter().flatten().flatten().copied())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
    });
    let scale = scale.filter(|(lo, _)| lo.is_finite());

    let dir = cfg.output_dir.join(REPORT_DIR);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let write = |name: String, text: String| -> Result<()> {
        let p = dir.join(name);
        fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
    };
    for h in &heatmaps {
        let title = match h.split {
            Some(split) => format!("{} {}: head impact, {} documents", summary.axiom, summary.variant, split.as_str()),
            None if h.secondary => format!("{} {}: {} (secondary)", summary.axiom, summary.variant, h.site),
            None => format!("{} {}: {}", summary.axiom, summary.variant, h.site),
        };
        write(format!("{}.csv", h.name), matrix_csv(&h.rows, &h.columns, &h.values))?;
        write(format!("{}.svg", h.name), heatmap_svg(&title, &h.rows, &h.columns, &h.values, scale)?)?;
    }

    let mut csv = String::from("axiom,variant,filler,count,mean_baseline,mean_perturbed\n");
    for r in score_summary(&triples) {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.axiom,
            r.variant,
            r.filler,
            r.count,
            patchlens_core::report::fmt_sig9(r.mean_baseline),
            patchlens_core::report::fmt_sig9(r.mean_perturbed)
        ));
    }
    write("score_summary.csv".into(), csv)?;

    let report = Report {
        meta: ReportMeta {
            axiom: summary.axiom,
            variant: summary.variant,
            weighting: cfg.weighting,
            fixed_scale: cfg.fixed_scale,
            scale: scale.map(|(lo, hi)| (round_sig9(lo), round_sig9(hi))),
            triples: summary.completed,
            skipped_degenerate: summary.skipped_degenerate,
        },
        heatmaps: heatmaps.into_iter().map(|h| HeatmapEntry { values: rounded(&h.values), ..h }).collect(),
    };
    io::write_json(&dir.join("report.json"), &report)?;
    Ok(dir)
}
