// SPDX-License-Identifier: MIT OR Apache-2.0

//! Activation patching over `(q, d_b, d_p)` triples.
//!
//! The source run is the input whose activations get cached and the
//! destination run is the one they are patched into. TFC1-I and LNC1 cache
//! from `d_p` and patch into `d_b`; TFC1-R caches from `d_b` (the document
//! that still holds the term) and patches into `d_p`. With `dest`,
//! `source` and `patched` the three relevance scores, the impact of one
//! patch is
//!
//! ```text
//! impact = (patched - dest) / (source - dest)
//! ```
//!
//! so 0 means the patch changed nothing and 1 means it fully recreated the
//! source score. The query embedding is computed once and never patched.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::dataset::{Axiom, Triple, Variant};
use crate::error::{Error, Result};
use crate::model::{relevance_score, ActivationCache, Capture, HookPoint, Model, PatchSpec, Site, SiteAddr};
use crate::tokenizer::{encode, Encoding, Vocab};

pub const DEFAULT_IMPACT_EPSILON: f64 = 1e-6;

/// Scores feeding the impact ratio, named after the destination/source roles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchingScores {
    /// Destination run, unpatched.
    pub score_baseline: f32,
    /// Source run, unpatched.
    pub score_perturbed: f32,
    pub score_patched: f32,
}

/// `(patched − baseline) / (perturbed − baseline)`, rejecting near-zero denominators.
pub fn patching_impact(s: &PatchingScores, epsilon: f64) -> Result<f64> {
    let denom = f64::from(s.score_perturbed) - f64::from(s.score_baseline);
    if denom.abs() < epsilon {
        return Err(Error::DegenerateTriple { diff: denom, epsilon });
    }
    Ok((f64::from(s.score_patched) - f64::from(s.score_baseline)) / denom)
}

/// How the padded tail of the shorter document is presented to attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum PadMode {
    #[default]
    Masked,
    Attended,
}

/// Baseline and perturbed encodings padded to one common length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedPair {
    pub baseline: Encoding,
    pub perturbed: Encoding,
}

impl EncodedPair {
    pub fn len(&self) -> usize {
        self.baseline.len()
    }

    pub fn is_empty(&self) -> bool {
        self.baseline.is_empty()
    }
}

pub fn encode_pair(triple: &Triple, vocab: &Vocab, max_len: usize, pad: PadMode) -> EncodedPair {
    let mut baseline = encode(&triple.baseline_text, vocab, max_len);
    let mut perturbed = encode(&triple.perturbed_text, vocab, max_len);
    let len = baseline.len().max(perturbed.len());
    let attend = pad == PadMode::Attended;
    baseline.pad_to(len, vocab.pad_id, attend);
    perturbed.pad_to(len, vocab.pad_id, attend);
    EncodedPair { baseline, perturbed }
}

/// Pooled embedding of one encoding.
pub fn embed_cls(model: &Model, enc: &Encoding) -> Result<Vec<f32>> {
    Ok(model.forward_encoding(enc, &Capture::none(), None)?.cls_embedding())
}

/// Relevance of baseline and perturbed document for a query embedding.
pub fn score_pair(model: &Model, query_cls: &[f32], pair: &EncodedPair) -> Result<(f32, f32)> {
    let b = relevance_score(query_cls, &embed_cls(model, &pair.baseline)?)?;
    let p = relevance_score(query_cls, &embed_cls(model, &pair.perturbed)?)?;
    Ok((b, p))
}

/// One patched forward and its impact.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub target: HookPoint,
    pub score_patched: f32,
    pub impact: f64,
}

/// Per-(layer, position) impacts for one block site.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockResult {
    pub site: Site,
    pub n_layers: usize,
    pub seq_len: usize,
    pub scores: PatchingScores,
    /// Row-major `[n_layers × seq_len]`.
    pub cells: Vec<Cell>,
}

impl BlockResult {
    pub fn impact(&self, layer: usize, position: usize) -> f64 {
        self.cells[layer * self.seq_len + position].impact
    }
}

/// Per-(layer, head) impacts.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadResult {
    pub n_layers: usize,
    pub n_heads: usize,
    pub scores: PatchingScores,
    /// Row-major `[n_layers × n_heads]`.
    pub cells: Vec<Cell>,
}

impl HeadResult {
    pub fn impact(&self, layer: usize, head: usize) -> f64 {
        self.cells[layer * self.n_heads + head].impact
    }
}

/// Prepared state for patching one triple: the source cache, the clean
/// destination residual stream and the reference scores.
#[derive(Debug)]
pub struct TriplePatcher<'m> {
    model: &'m Model,
    query_cls: Vec<f32>,
    dest: Encoding,
    dest_resid: ActivationCache,
    source: ActivationCache,
    scores: PatchingScores,
    epsilon: f64,
}

impl<'m> TriplePatcher<'m> {
    /// Runs the clean source and destination passes.
    ///
    /// Fails with [`Error::DegenerateTriple`] when the two scores are closer than `epsilon`.
    pub fn new(model: &'m Model, query_cls: Vec<f32>, dest: Encoding, source: &Encoding, epsilon: f64) -> Result<Self> {
        if dest.len() != source.len() {
            return Err(Error::Patch(format!(
                "destination length {} differs from source length {}",
                dest.len(),
                source.len()
            )));
        }
        let src_out = model.forward_encoding(source, &Capture::all(), None)?;
        let dest_out = model.forward_encoding(&dest, &Capture::sites([Site::ResidPre]), None)?;
        let score_baseline = relevance_score(&query_cls, &dest_out.cls_embedding())?;
        let score_perturbed = relevance_score(&query_cls, &src_out.cls_embedding())?;
        let scores = PatchingScores { score_baseline, score_perturbed, score_patched: score_baseline };
        patching_impact(&scores, epsilon)?;
        Ok(Self { model, query_cls, dest, dest_resid: dest_out.cache, source: src_out.cache, scores, epsilon })
    }

    /// Picks the caching direction for the triple's axiom.
    pub fn for_triple(
        model: &'m Model,
        query_cls: Vec<f32>,
        pair: EncodedPair,
        axiom: Axiom,
        epsilon: f64,
    ) -> Result<Self> {
        let (dest, source) = match axiom {
            Axiom::Tfc1Replace => (pair.perturbed, pair.baseline),
            Axiom::Tfc1Inject | Axiom::Lnc1 => (pair.baseline, pair.perturbed),
        };
        Self::new(model, query_cls, dest, &source, epsilon)
    }

    pub fn scores(&self) -> PatchingScores {
        self.scores
    }

    pub fn seq_len(&self) -> usize {
        self.dest.len()
    }

    pub fn source_cache(&self) -> &ActivationCache {
        &self.source
    }

    /// Destination score with `targets` substituted from the source cache.
    pub fn patched_score(&self, targets: &[HookPoint]) -> Result<f32> {
        let start = targets.iter().map(|t| t.layer).min().unwrap_or(0);
        let addr = SiteAddr { layer: start, site: Site::ResidPre, head: None };
        let resid = self
            .dest_resid
            .get(&addr)
            .cloned()
            .ok_or_else(|| Error::Patch(format!("layer {start} outside the model")))?;
        let patch = PatchSpec { targets, source: &self.source };
        let out = self.model.forward_from(start, resid, &self.dest.attention_mask, &Capture::none(), Some(patch))?;
        relevance_score(&self.query_cls, &out.cls_embedding())
    }

    /// Impact of patching all `targets` together.
    pub fn impact_of(&self, targets: &[HookPoint]) -> Result<(f32, f64)> {
        let score_patched = self.patched_score(targets)?;
        let impact = patching_impact(&PatchingScores { score_patched, ..self.scores }, self.epsilon)?;
        Ok((score_patched, impact))
    }

    pub fn cell(&self, target: HookPoint) -> Result<Cell> {
        let (score_patched, impact) = self.impact_of(&[target])?;
        Ok(Cell { target, score_patched, impact })
    }

    /// Single-position targets of a block site, row-major over (layer, position).
    pub fn block_targets(&self, site: Site) -> Result<Vec<HookPoint>> {
        if !site.is_block() {
            return Err(Error::Patch(format!("{site} is not a block site")));
        }
        let n_layers = self.model.config().n_layers;
        Ok((0..n_layers).flat_map(|l| (0..self.seq_len()).map(move |p| HookPoint::block(l, site, p))).collect())
    }

    /// One target per (layer, head), row-major.
    pub fn head_targets(&self) -> Vec<HookPoint> {
        let cfg = self.model.config();
        (0..cfg.n_layers).flat_map(|l| (0..cfg.n_heads).map(move |h| HookPoint::head(l, h))).collect()
    }

    pub fn block_from_cells(&self, site: Site, cells: Vec<Cell>) -> BlockResult {
        BlockResult {
            site,
            n_layers: self.model.config().n_layers,
            seq_len: self.seq_len(),
            scores: self.scores,
            cells,
        }
    }

    pub fn heads_from_cells(&self, cells: Vec<Cell>) -> HeadResult {
        let cfg = self.model.config();
        HeadResult { n_layers: cfg.n_layers, n_heads: cfg.n_heads, scores: self.scores, cells }
    }

    /// Block experiment: one patched run per (layer, position).
    pub fn run_block(&self, site: Site) -> Result<BlockResult> {
        let cells = self.block_targets(site)?.into_iter().map(|t| self.cell(t)).collect::<Result<Vec<_>>>()?;
        Ok(self.block_from_cells(site, cells))
    }

    /// Head experiment: one patched run per (layer, head), all positions at once.
    pub fn run_heads(&self) -> Result<HeadResult> {
        let cells = self.head_targets().into_iter().map(|t| self.cell(t)).collect::<Result<Vec<_>>>()?;
        Ok(self.heads_from_cells(cells))
    }
}

/// One line of a result file.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ImpactRecord {
    pub query_id: String,
    pub doc_id: String,
    pub axiom: Axiom,
    pub variant: Variant,
    pub site: Site,
    pub layer: usize,
    #[cfg_attr(feature = "serde", serde(default, skip_serializing_if = "Option::is_none"))]
    pub position: Option<usize>,
    #[cfg_attr(feature = "serde", serde(default, skip_serializing_if = "Option::is_none"))]
    pub head: Option<usize>,
    pub impact: f64,
    pub score_baseline: f32,
    pub score_perturbed: f32,
    pub score_patched: f32,
}

impl ImpactRecord {
    pub fn from_cell(triple: &Triple, scores: PatchingScores, cell: &Cell) -> Self {
        Self {
            query_id: triple.query.query_id.clone(),
            doc_id: triple.doc_id.clone(),
            axiom: triple.axiom,
            variant: triple.variant,
            site: cell.target.site,
            layer: cell.target.layer,
            position: cell.target.position,
            head: cell.target.head,
            impact: cell.impact,
            score_baseline: scores.score_baseline,
            score_perturbed: scores.score_perturbed,
            score_patched: cell.score_patched,
        }
    }

    /// Emission order: query, doc, site, layer, position/head.
    pub fn sort_key(&self) -> (&str, &str, Site, usize, usize) {
        (&self.query_id, &self.doc_id, self.site, self.layer, self.position.or(self.head).unwrap_or(usize::MAX))
    }
}
