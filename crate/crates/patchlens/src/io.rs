// SPDX-License-Identifier: MIT OR Apache-2.0

//! Vocab, TSV corpus/query ingestion, qrels and JSON-lines files.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use patchlens_core::{Axiom, Query, Triple, Variant, Vocab};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn read_vocab(path: &Path) -> Result<Vocab> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Vocab::from_text(&text).map_err(|e| Error::format(path, e.to_string()))
}

/// Rows of an `id<TAB>text` file.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TsvTable {
    pub rows: Vec<(String, String)>,
    /// Non-empty lines seen.
    pub lines: usize,
    /// Lines skipped for lacking a tab or an id.
    pub malformed: usize,
}

/// Reads an `id<TAB>text` file, skipping malformed lines.
///
/// More than 1% malformed lines, or a repeated id, is a format error.
pub fn read_tsv(path: &Path) -> Result<TsvTable> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut table = TsvTable::default();
    let mut seen = BTreeSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        table.lines += 1;
        match line.split_once('\t') {
            Some((id, text)) if !id.trim().is_empty() => {
                let id = id.trim().to_string();
                if !seen.insert(id.clone()) {
                    return Err(Error::format(path, format!("line {}: duplicate id `{id}`", i + 1)));
                }
                table.rows.push((id, text.to_string()));
            }
            _ => {
                log::debug!("{}: line {} malformed, skipped", path.display(), i + 1);
                table.malformed += 1;
            }
        }
    }
    if table.malformed * 100 > table.lines {
        return Err(Error::format(path, format!("{} of {} lines malformed (over 1%)", table.malformed, table.lines)));
    }
    if table.malformed > 0 {
        log::warn!("{}: skipped {} malformed line(s)", path.display(), table.malformed);
    }
    Ok(table)
}

/// `(query_id, doc_id)` pairs from a qrels file: `qid 0 docid rel` or `qid docid`.
pub fn read_qrels(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let cols: Vec<&str> = line.split_whitespace().collect();
        match cols.len() {
            0 => continue,
            4 => out.push((cols[0].to_string(), cols[2].to_string())),
            2 | 3 => out.push((cols[0].to_string(), cols[1].to_string())),
            n => return Err(Error::format(path, format!("line {}: {n} columns", i + 1))),
        }
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| Error::format(path, e.to_string()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1))))
        .collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

/// One dataset line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub query_id: String,
    pub query_text: String,
    pub doc_id: String,
    pub axiom: Axiom,
    pub variant: Variant,
    pub selected_term: Option<String>,
    pub filler: String,
    pub baseline_text: String,
    pub perturbed_text: String,
    pub baseline_score: f32,
    pub perturbed_score: f32,
    pub retrieval_score: f32,
    pub compliant: bool,
    pub truncated: bool,
}

impl From<&Triple> for DatasetRecord {
    fn from(t: &Triple) -> Self {
        Self {
            query_id: t.query.query_id.clone(),
            query_text: t.query.text.clone(),
            doc_id: t.doc_id.clone(),
            axiom: t.axiom,
            variant: t.variant,
            selected_term: t.selected_term.clone(),
            filler: t.filler.clone(),
            baseline_text: t.baseline_text.clone(),
            perturbed_text: t.perturbed_text.clone(),
            baseline_score: t.baseline_score,
            perturbed_score: t.perturbed_score,
            retrieval_score: t.retrieval_score,
            compliant: t.compliant,
            truncated: t.truncated,
        }
    }
}

impl From<DatasetRecord> for Triple {
    fn from(r: DatasetRecord) -> Self {
        Triple {
            query: Query::new(r.query_id, r.query_text),
            doc_id: r.doc_id,
            baseline_text: r.baseline_text,
            perturbed_text: r.perturbed_text,
            selected_term: r.selected_term,
            axiom: r.axiom,
            variant: r.variant,
            filler: r.filler,
            baseline_score: r.baseline_score,
            perturbed_score: r.perturbed_score,
            retrieval_score: r.retrieval_score,
            compliant: r.compliant,
            truncated: r.truncated,
        }
    }
}

pub fn read_dataset(path: &Path) -> Result<Vec<Triple>> {
    Ok(read_jsonl::<DatasetRecord>(path)?.into_iter().map(Triple::from).collect())
}

pub fn write_dataset(path: &Path, triples: &[Triple]) -> Result<()> {
    let recs: Vec<DatasetRecord> = triples.iter().map(DatasetRecord::from).collect();
    write_jsonl(path, &recs)
}
