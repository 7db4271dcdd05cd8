// SPDX-License-Identifier: MIT OR Apache-2.0

//! Aggregation of per-triple impacts into heatmaps, plus CSV/SVG rendering.
//!
//! All sums are taken over records sorted by their identity, so results
//! do not depend on the order records arrive in.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write;

use crate::dataset::{Axiom, TokenClass, TokenClassMap, Triple, Variant};
use crate::error::{Error, Result};
use crate::model::Site;
use crate::patching::ImpactRecord;

/// Triple identity: `(query_id, doc_id)`.
pub type TripleKey = (String, String);

/// How token occurrences are pooled into a class cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Weighting {
    /// Every (triple, position) counts once.
    #[default]
    Occurrence,
    /// Each triple's class mean counts once.
    Document,
}

/// Layer × token-class mean impacts.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassHeatmap {
    pub axiom: Axiom,
    pub variant: Variant,
    pub site: Site,
    pub classes: Vec<TokenClass>,
    /// `[n_layers][n_classes]`; `None` where nothing contributed.
    pub values: Vec<Vec<Option<f64>>>,
    /// Contributing positions (occurrence weighting) or triples (document weighting).
    pub counts: Vec<Vec<usize>>,
    pub weighting: Weighting,
}

impl ClassHeatmap {
    pub fn col_labels(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.label().to_string()).collect()
    }

    pub fn value(&self, layer: usize, class: TokenClass) -> Option<f64> {
        let c = self.classes.iter().position(|x| *x == class)?;
        self.values[layer][c]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum HeadSplit {
    All,
    Top10,
    Bottom10,
}

impl HeadSplit {
    pub const ALL: [HeadSplit; 3] = [HeadSplit::All, HeadSplit::Top10, HeadSplit::Bottom10];

    pub fn as_str(self) -> &'static str {
        match self {
            HeadSplit::All => "all",
            HeadSplit::Top10 => "top10",
            HeadSplit::Bottom10 => "bottom10",
        }
    }
}

/// Layer × head mean impacts over one document split.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadHeatmap {
    pub split: HeadSplit,
    /// `[n_layers][n_heads]`; `None` when no triple was selected.
    pub values: Vec<Vec<Option<f64>>>,
    pub triples: usize,
    pub excluded_queries: usize,
}

/// `(sum, count)` per (layer, class).
type CellSums = Vec<Vec<(f64, usize)>>;

fn sorted_block_records(records: &[ImpactRecord]) -> Vec<&ImpactRecord> {
    let mut v: Vec<&ImpactRecord> = records.iter().collect();
    v.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    v
}

/// Mean block impact per (layer, token class).
pub fn aggregate_block(
    records: &[ImpactRecord],
    classmaps: &BTreeMap<TripleKey, TokenClassMap>,
    n_layers: usize,
    weighting: Weighting,
) -> Result<ClassHeatmap> {
    let first = records.first().ok_or_else(|| Error::Aggregation("no block records".into()))?;
    let (axiom, variant, site) = (first.axiom, first.variant, first.site);
    if !site.is_block() {
        return Err(Error::Aggregation(format!("{site} records are not block results")));
    }
    let classes = TokenClass::for_axiom(axiom);
    let n_classes = classes.len();

    // (sum, count) per cell, plus a per-triple accumulator for document weighting
    let mut totals = vec![vec![(0.0f64, 0usize); n_classes]; n_layers];
    let mut doc_acc: BTreeMap<(&str, &str), CellSums> = BTreeMap::new();

    for r in sorted_block_records(records) {
        if (r.axiom, r.variant, r.site) != (axiom, variant, site) {
            return Err(Error::Aggregation(format!(
                "mixed records: {}/{}/{} vs {axiom}/{variant}/{site}",
                r.axiom, r.variant, r.site
            )));
        }
        let key = (r.query_id.clone(), r.doc_id.clone());
        let map = classmaps
            .get(&key)
            .ok_or_else(|| Error::Aggregation(format!("no token classes for triple ({}, {})", r.query_id, r.doc_id)))?;
        let pos = r.position.ok_or_else(|| {
            Error::Aggregation(format!("block record without position in triple ({}, {})", r.query_id, r.doc_id))
        })?;
        if r.layer >= n_layers {
            return Err(Error::Aggregation(format!(
                "layer {} out of range in ({}, {})",
                r.layer, r.query_id, r.doc_id
            )));
        }
        let Some(class) = map.get(pos) else {
            continue; // padding beyond the unpadded length
        };
        let c = classes.iter().position(|x| *x == class).ok_or_else(|| {
            Error::Aggregation(format!(
                "position {pos} of ({}, {}) has class {} which {axiom} does not report",
                r.query_id,
                r.doc_id,
                class.label()
            ))
        })?;
        match weighting {
            Weighting::Occurrence => {
                let cell = &mut totals[r.layer][c];
                cell.0 += r.impact;
                cell.1 += 1;
            }
            Weighting::Document => {
                let acc = doc_acc
                    .entry((&r.query_id, &r.doc_id))
                    .or_insert_with(|| vec![vec![(0.0, 0); n_classes]; n_layers]);
                acc[r.layer][c].0 += r.impact;
                acc[r.layer][c].1 += 1;
            }
        }
    }
    for acc in doc_acc.values() {
        for (l, row) in acc.iter().enumerate() {
            for (c, &(sum, n)) in row.iter().enumerate() {
                if n > 0 {
                    totals[l][c].0 += sum / n as f64;
                    totals[l][c].1 += 1;
                }
            }
        }
    }
    let values = totals.iter().map(|row| row.iter().map(|&(s, n)| (n > 0).then(|| s / n as f64)).collect()).collect();
    let counts = totals.iter().map(|row| row.iter().map(|&(_, n)| n).collect()).collect();
    Ok(ClassHeatmap { axiom, variant, site, classes, values, counts, weighting })
}

/// Number of documents a 10% split keeps out of `n`.
pub fn split_size(n: usize) -> usize {
    n.div_ceil(10)
}

/// Mean head impacts over the selected documents of every query.
///
/// Documents are ranked per query by their original retrieval score
/// (descending, ties by doc id).
pub fn aggregate_heads(
    records: &[ImpactRecord],
    retrieval: &BTreeMap<TripleKey, f32>,
    split: HeadSplit,
    n_layers: usize,
    n_heads: usize,
) -> Result<HeadHeatmap> {
    let mut per_triple: BTreeMap<(&str, &str), Vec<&ImpactRecord>> = BTreeMap::new();
    for r in records {
        if r.site != Site::HeadOut {
            return Err(Error::Aggregation(format!("{} record in head aggregation", r.site)));
        }
        per_triple.entry((&r.query_id, &r.doc_id)).or_default().push(r);
    }
    let mut per_query: BTreeMap<&str, Vec<(&str, f32)>> = BTreeMap::new();
    for &(q, d) in per_triple.keys() {
        let score = *retrieval
            .get(&(q.to_string(), d.to_string()))
            .ok_or_else(|| Error::Aggregation(format!("no retrieval score for triple ({q}, {d})")))?;
        per_query.entry(q).or_default().push((d, score));
    }

    let mut sums = vec![vec![(0.0f64, 0usize); n_heads]; n_layers];
    let mut triples = 0;
    let mut excluded = 0;
    for (q, mut docs) in per_query {
        docs.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let k = split_size(docs.len());
        let chosen: Vec<&str> = match split {
            HeadSplit::All => docs.iter().map(|d| d.0).collect(),
            HeadSplit::Top10 => docs.iter().take(k).map(|d| d.0).collect(),
            HeadSplit::Bottom10 => docs.iter().skip(docs.len() - k).map(|d| d.0).collect(),
        };
        if chosen.is_empty() {
            excluded += 1;
            continue;
        }
        let mut chosen = chosen;
        chosen.sort_unstable();
        for d in chosen {
            triples += 1;
            let mut recs = per_triple[&(q, d)].clone();
            recs.sort_by_key(|r| (r.layer, r.head));
            for r in recs {
                let h = r.head.ok_or_else(|| Error::Aggregation(format!("head record without head in ({q}, {d})")))?;
                if r.layer >= n_layers || h >= n_heads {
                    return Err(Error::Aggregation(format!("head cell ({}, {h}) out of range in ({q}, {d})", r.layer)));
                }
                sums[r.layer][h].0 += r.impact;
                sums[r.layer][h].1 += 1;
            }
        }
    }
    let values = sums.iter().map(|row| row.iter().map(|&(s, n)| (n > 0).then(|| s / n as f64)).collect()).collect();
    Ok(HeadHeatmap { split, values, triples, excluded_queries: excluded })
}

/// The `k` largest cells, descending, ties by (layer, head).
pub fn top_heads(heatmap: &HeadHeatmap, k: usize) -> Vec<(usize, usize, f64)> {
    let mut cells: Vec<(usize, usize, f64)> = heatmap
        .values
        .iter()
        .enumerate()
        .flat_map(|(l, row)| row.iter().enumerate().filter_map(move |(h, v)| v.map(|v| (l, h, v))))
        .collect();
    cells.sort_by(|a, b| b.2.total_cmp(&a.2).then_with(|| (a.0, a.1).cmp(&(b.0, b.1))));
    cells.truncate(k);
    cells
}

/// Mean scores for one `(axiom, variant, filler)` condition.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ScoreSummaryRow {
    pub axiom: Axiom,
    pub variant: Variant,
    pub filler: String,
    pub count: usize,
    pub mean_baseline: f64,
    pub mean_perturbed: f64,
}

pub fn score_summary(triples: &[Triple]) -> Vec<ScoreSummaryRow> {
    let mut sorted: Vec<&Triple> = triples.iter().collect();
    sorted.sort_by(|a, b| (&a.query.query_id, &a.doc_id).cmp(&(&b.query.query_id, &b.doc_id)));
    let mut groups: BTreeMap<(Axiom, Variant, &str), (f64, f64, usize)> = BTreeMap::new();
    for t in sorted {
        let g = groups.entry((t.axiom, t.variant, &t.filler)).or_default();
        g.0 += f64::from(t.baseline_score);
        g.1 += f64::from(t.perturbed_score);
        g.2 += 1;
    }
    groups
        .into_iter()
        .map(|((axiom, variant, filler), (b, p, n))| ScoreSummaryRow {
            axiom,
            variant,
            filler: filler.to_string(),
            count: n,
            mean_baseline: b / n as f64,
            mean_perturbed: p / n as f64,
        })
        .collect()
}

/// `%.9g`-style formatting: nine significant digits, trailing zeros trimmed.
pub fn fmt_sig9(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-5..9).contains(&exp) {
        let m = trim_zeros(mantissa);
        return format!("{m}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs());
    }
    let decimals = (8 - exp).max(0) as usize;
    trim_zeros(&format!("{x:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Rounds to the value `fmt_sig9` prints.
pub fn round_sig9(x: f64) -> f64 {
    fmt_sig9(x).parse().unwrap_or(x)
}

/// Matrix as CSV: a header of column labels, one row per layer; empty cells stay empty.
pub fn matrix_csv(row_labels: &[String], col_labels: &[String], values: &[Vec<Option<f64>>]) -> String {
    let mut out = String::from("layer");
    for c in col_labels {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    for (label, row) in row_labels.iter().zip(values) {
        out.push_str(label);
        for v in row {
            out.push(',');
            if let Some(v) = v {
                out.push_str(&fmt_sig9(*v));
            }
        }
        out.push('\n');
    }
    out
}

// light-to-dark sequential blues
const BLUES: [(f64, [u8; 3]); 5] = [
    (0.0, [247, 251, 255]),
    (0.25, [198, 219, 239]),
    (0.5, [107, 174, 214]),
    (0.75, [33, 113, 181]),
    (1.0, [8, 48, 107]),
];

fn blue(t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let i = BLUES.iter().rposition(|(s, _)| *s <= t).unwrap_or(0).min(BLUES.len() - 2);
    let (s0, c0) = BLUES[i];
    let (s1, c1) = BLUES[i + 1];
    let f = (t - s0) / (s1 - s0);
    let ch = |k: usize| libm::round(f64::from(c0[k]) + f * (f64::from(c1[k]) - f64::from(c0[k]))) as u8;
    format!("#{:02x}{:02x}{:02x}", ch(0), ch(1), ch(2))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Standalone SVG heatmap with annotated cells and a colorbar.
///
/// The color scale spans `scale` if given, otherwise the matrix min/max.
/// Absent cells are drawn grey. Negative values get a red annotation.
pub fn heatmap_svg(
    title: &str,
    row_labels: &[String],
    col_labels: &[String],
    values: &[Vec<Option<f64>>],
    scale: Option<(f64, f64)>,
) -> Result<String> {
    if values.len() != row_labels.len() || values.iter().any(|r| r.len() != col_labels.len()) {
        return Err(Error::Shape(format!(
            "heatmap labels {}x{} do not match matrix",
            row_labels.len(),
            col_labels.len()
        )));
    }
    let present = values.iter().flatten().flatten().copied();
    let (lo, hi) =
        scale.unwrap_or_else(|| present.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v))));
    let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, 0.0) };
    let span = hi - lo;
    let t_of = |v: f64| if span > 0.0 { (v - lo) / span } else { 1.0 };

    let (cw, ch, left, top) = (72.0, 32.0, 70.0, 60.0);
    let grid_w = cw * col_labels.len() as f64;
    let grid_h = ch * row_labels.len() as f64;
    let bar_x = left + grid_w + 24.0;
    let width = bar_x + 90.0;
    let height = top + grid_h + 30.0;

    let mut s = String::new();
    let w = |s: &mut String, args: core::fmt::Arguments<'_>| {
        s.write_fmt(args).expect("writing to a String");
    };
    w(&mut s, format_args!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    ));
    w(&mut s, format_args!("<rect width=\"{width}\" height=\"{height}\" fill=\"#ffffff\"/>\n"));
    w(&mut s, format_args!("<text x=\"{left}\" y=\"18\" font-size=\"13\">{}</text>\n", escape(title)));
    for (c, label) in col_labels.iter().enumerate() {
        let x = left + cw * (c as f64 + 0.5);
        w(
            &mut s,
            format_args!("<text x=\"{x}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n", top - 8.0, escape(label)),
        );
    }
    for (r, (label, row)) in row_labels.iter().zip(values).enumerate() {
        let y = top + ch * r as f64;
        w(
            &mut s,
            format_args!(
                "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>\n",
                left - 6.0,
                y + ch / 2.0 + 4.0,
                escape(label)
            ),
        );
        for (c, v) in row.iter().enumerate() {
            let x = left + cw * c as f64;
            match v {
                Some(v) => {
                    let t = t_of(*v);
                    let fg = match (*v < 0.0, t > 0.6) {
                        (true, true) => "#fddbc7",
                        (true, false) => "#b2182b",
                        (false, true) => "#ffffff",
                        (false, false) => "#000000",
                    };
                    let exact = fmt_sig9(*v);
                    w(&mut s, format_args!(
                        "<rect x=\"{x}\" y=\"{y}\" width=\"{cw}\" height=\"{ch}\" fill=\"{}\" data-value=\"{exact}\"><title>{exact}</title></rect>\n",
                        blue(t)
                    ));
                    w(
                        &mut s,
                        format_args!(
                            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" fill=\"{fg}\">{:.3}</text>\n",
                            x + cw / 2.0,
                            y + ch / 2.0 + 4.0,
                            v
                        ),
                    );
                }
                None => {
                    w(&mut s, format_args!(
                        "<rect x=\"{x}\" y=\"{y}\" width=\"{cw}\" height=\"{ch}\" fill=\"#d9d9d9\"><title>absent</title></rect>\n"
                    ));
                }
            }
        }
    }
    // colorbar
    if span > 0.0 {
        w(&mut s, format_args!("<defs><linearGradient id=\"cbar\" x1=\"0\" y1=\"1\" x2=\"0\" y2=\"0\">\n"));
        for (stop, _) in BLUES {
            w(&mut s, format_args!("<stop offset=\"{stop}\" stop-color=\"{}\"/>\n", blue(stop)));
        }
        w(&mut s, format_args!("</linearGradient></defs>\n"));
        w(
            &mut s,
            format_args!("<rect x=\"{bar_x}\" y=\"{top}\" width=\"16\" height=\"{grid_h}\" fill=\"url(#cbar)\"/>\n"),
        );
    } else {
        w(
            &mut s,
            format_args!("<rect x=\"{bar_x}\" y=\"{top}\" width=\"16\" height=\"{grid_h}\" fill=\"{}\"/>\n", blue(1.0)),
        );
    }
    w(&mut s, format_args!("<text x=\"{}\" y=\"{}\">{}</text>\n", bar_x + 20.0, top + 10.0, fmt_sig9(hi)));
    w(&mut s, format_args!("<text x=\"{}\" y=\"{}\">{}</text>\n", bar_x + 20.0, top + grid_h, fmt_sig9(lo)));
    s.push_str("</svg>\n");
    Ok(s)
}
