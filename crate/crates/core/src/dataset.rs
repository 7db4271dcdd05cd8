// SPDX-License-Identifier: MIT OR Apache-2.0

//! Axiomatic diagnostic triples.
//!
//! A triple pairs a query with a baseline document `d_b` and a perturbed
//! document `d_p`:
//!
//! - **TFC1-I** injects one sampled query term at the end (append) or start
//!   (prepend) of the document; the baseline gets the filler word at the same
//!   place, repeated until both documents have the same token length.
//! - **TFC1-R** keeps the document as baseline and replaces every whole-word
//!   occurrence of the sampled term with filler of the same token length.
//! - **LNC1** doubles the document with a noise word the corpus never
//!   contains; the baseline is the original document padded to the same
//!   length.
//!
//! Perturbations here are text-only; scores are filled in afterwards with
//! [`Triple::set_scores`].

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::fmt;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{Error, Result};
use crate::tokenizer::{basic_words, normalize, query_terms, text_token_count, word_token_count, Encoding, Vocab};

pub const DEFAULT_FILLER: &str = "a";
pub const LNC1_NOISE: &str = "guantanamo";

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CorpusDoc {
    pub doc_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Query {
    pub query_id: String,
    pub text: String,
    /// Normalized non-punctuation words of `text`, in order.
    pub terms: Vec<String>,
}

impl Query {
    pub fn new(query_id: impl Into<String>, text: impl Into<String>) -> Self {
        let text = text.into();
        let terms = query_terms(&text);
        Self { query_id: query_id.into(), text, terms }
    }

    /// Terms with duplicates removed, first occurrence order.
    pub fn unique_terms(&self) -> Vec<&str> {
        let mut seen = BTreeSet::new();
        self.terms.iter().map(String::as_str).filter(|t| seen.insert(*t)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Axiom {
    #[cfg_attr(feature = "serde", serde(rename = "TFC1_I"))]
    Tfc1Inject,
    #[cfg_attr(feature = "serde", serde(rename = "TFC1_R"))]
    Tfc1Replace,
    #[cfg_attr(feature = "serde", serde(rename = "LNC1"))]
    Lnc1,
}

impl Axiom {
    pub fn as_str(self) -> &'static str {
        match self {
            Axiom::Tfc1Inject => "TFC1_I",
            Axiom::Tfc1Replace => "TFC1_R",
            Axiom::Lnc1 => "LNC1",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "TFC1_I" => Ok(Axiom::Tfc1Inject),
            "TFC1_R" => Ok(Axiom::Tfc1Replace),
            "LNC1" => Ok(Axiom::Lnc1),
            _ => Err(Error::Format(format!("unknown axiom `{s}`"))),
        }
    }

    /// Whether the perturbation is meant to raise the relevance score.
    pub fn expects_increase(self) -> bool {
        self == Axiom::Tfc1Inject
    }
}

impl fmt::Display for Axiom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Variant {
    Append,
    Prepend,
    None,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Append => "append",
            Variant::Prepend => "prepend",
            Variant::None => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "append" => Ok(Variant::Append),
            "prepend" => Ok(Variant::Prepend),
            "none" => Ok(Variant::None),
            _ => Err(Error::Format(format!("unknown variant `{s}`"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One `(q, d_b, d_p)` record.
#[derive(Debug, Clone, PartialEq)]
pub struct Triple {
    pub query: Query,
    pub doc_id: String,
    pub baseline_text: String,
    pub perturbed_text: String,
    pub selected_term: Option<String>,
    pub axiom: Axiom,
    pub variant: Variant,
    pub filler: String,
    /// `NaN` until scored.
    pub baseline_score: f32,
    /// `NaN` until scored.
    pub perturbed_score: f32,
    /// Score of the untouched document for this query; ranks top/bottom splits.
    pub retrieval_score: f32,
    pub compliant: bool,
    /// The LNC1 noise region was shortened to fit the encoder.
    pub truncated: bool,
}

impl Triple {
    fn unscored(query: &Query, doc: &CorpusDoc, axiom: Axiom, variant: Variant, filler: &str) -> Self {
        Self {
            query: query.clone(),
            doc_id: doc.doc_id.clone(),
            baseline_text: String::new(),
            perturbed_text: String::new(),
            selected_term: None,
            axiom,
            variant,
            filler: filler.to_string(),
            baseline_score: f32::NAN,
            perturbed_score: f32::NAN,
            retrieval_score: f32::NAN,
            compliant: false,
            truncated: false,
        }
    }

    /// Stores scores and updates the compliance flag.
    pub fn set_scores(&mut self, baseline: f32, perturbed: f32) {
        self.baseline_score = baseline;
        self.perturbed_score = perturbed;
        self.compliant = is_compliant(self.axiom, baseline, perturbed);
    }

    /// Text whose encoding carries the token classes: the document that holds the selected term.
    pub fn classification_text(&self) -> &str {
        match self.axiom {
            Axiom::Tfc1Replace => &self.baseline_text,
            _ => &self.perturbed_text,
        }
    }
}

/// The score moved in the direction the axiom predicts.
pub fn is_compliant(axiom: Axiom, baseline: f32, perturbed: f32) -> bool {
    if axiom.expects_increase() {
        perturbed > baseline
    } else {
        perturbed < baseline
    }
}

/// Per-triple seed derived from the run seed and the triple identity.
pub fn triple_seed(seed: u64, query_id: &str, doc_id: &str) -> u64 {
    // FNV-1a over seed bytes, query id, separator, doc id
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |b: u8| {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    };
    seed.to_le_bytes().into_iter().for_each(&mut eat);
    query_id.bytes().for_each(&mut eat);
    eat(0xff);
    doc_id.bytes().for_each(&mut eat);
    h
}

/// Unbiased index in `0..n` (n ≥ 1) by rejection.
fn uniform_index(rng: &mut ChaCha8Rng, n: usize) -> usize {
    let n = n as u64;
    let zone = u64::MAX - (u64::MAX % n);
    loop {
        let v = rng.next_u64();
        if v < zone {
            return (v % n) as usize;
        }
    }
}

/// Filler repetitions that reproduce the token count of `term`.
fn filler_reps(term: &str, filler: &str, vocab: &Vocab) -> Result<usize> {
    let (t, f) = (word_token_count(term, vocab), word_token_count(filler, vocab));
    if f == 0 || t % f != 0 {
        return Err(Error::Dropped(format!(
            "term `{term}` ({t} tokens) cannot be length-matched by filler `{filler}` ({f} tokens)"
        )));
    }
    Ok(t / f)
}

fn repeat_word(word: &str, n: usize) -> String {
    vec![word; n].join(" ")
}

fn candidate_terms<'q>(query: &'q Query, filler: &str) -> Vec<&'q str> {
    let filler = normalize(filler);
    query.unique_terms().into_iter().filter(|t| *t != filler).collect()
}

fn check_fits(vocab: &Vocab, max_len: usize, texts: [&str; 2]) -> Result<()> {
    let [b, p] = texts.map(|t| text_token_count(t, vocab));
    if b != p {
        return Err(Error::Dropped(format!("token lengths differ after filling: {b} vs {p}")));
    }
    if p + 2 > max_len {
        return Err(Error::Dropped(format!("perturbed document needs {} tokens, max_len is {max_len}", p + 2)));
    }
    Ok(())
}

/// TFC1-I: inject a sampled query term, pad the baseline with filler of equal token length.
pub fn perturb_tfc1_inject(
    query: &Query,
    doc: &CorpusDoc,
    variant: Variant,
    seed: u64,
    filler: &str,
    vocab: &Vocab,
    max_len: usize,
) -> Result<Triple> {
    if variant == Variant::None {
        return Err(Error::Format("TFC1-I needs the append or prepend variant".into()));
    }
    let terms = candidate_terms(query, filler);
    if terms.is_empty() {
        return Err(Error::Dropped(format!("query {} has no usable terms", query.query_id)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let term = terms[uniform_index(&mut rng, terms.len())];
    let pad = repeat_word(filler, filler_reps(term, filler, vocab)?);
    let join = |extra: &str| -> String {
        let body = doc.text.trim();
        match (body.is_empty(), variant) {
            (true, _) => extra.to_string(),
            (false, Variant::Prepend) => format!("{extra} {body}"),
            (false, _) => format!("{body} {extra}"),
        }
    };
    let mut t = Triple::unscored(query, doc, Axiom::Tfc1Inject, variant, filler);
    t.perturbed_text = join(term);
    t.baseline_text = join(&pad);
    t.selected_term = Some(term.to_string());
    check_fits(vocab, max_len, [&t.baseline_text, &t.perturbed_text])?;
    Ok(t)
}

/// TFC1-R: replace every whole-word occurrence of a sampled term with filler.
///
/// The term is drawn uniformly among the query terms that occur in the document.
pub fn perturb_tfc1_replace(
    query: &Query,
    doc: &CorpusDoc,
    seed: u64,
    filler: &str,
    vocab: &Vocab,
    max_len: usize,
) -> Result<Triple> {
    let words = basic_words(&doc.text);
    let present: BTreeSet<&str> = words.iter().map(|w| w.text.as_str()).collect();
    let terms: Vec<&str> = candidate_terms(query, filler).into_iter().filter(|t| present.contains(t)).collect();
    if terms.is_empty() {
        return Err(Error::Dropped(format!("no query term of {} occurs in doc {}", query.query_id, doc.doc_id)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let term = terms[uniform_index(&mut rng, terms.len())];
    let pad = repeat_word(filler, filler_reps(term, filler, vocab)?);

    let mut out = String::with_capacity(doc.text.len());
    let mut cursor = 0;
    for w in words.iter().filter(|w| w.text == term) {
        out.push_str(&doc.text[cursor..w.span.start]);
        out.push_str(&pad);
        cursor = w.span.end;
    }
    out.push_str(&doc.text[cursor..]);

    let mut t = Triple::unscored(query, doc, Axiom::Tfc1Replace, Variant::None, filler);
    t.baseline_text = doc.text.clone();
    t.perturbed_text = out;
    t.selected_term = Some(term.to_string());
    if basic_words(&t.perturbed_text).iter().any(|w| w.text == term) {
        return Err(Error::Dropped(format!("term `{term}` survives replacement in doc {}", doc.doc_id)));
    }
    check_fits(vocab, max_len, [&t.baseline_text, &t.perturbed_text])?;
    Ok(t)
}

/// LNC1: append one noise word per document word; the baseline is padded at run time.
pub fn perturb_lnc1(query: &Query, doc: &CorpusDoc, noise: &str, vocab: &Vocab, max_len: usize) -> Result<Triple> {
    let body = doc.text.trim();
    let n = body.split_whitespace().count();
    if n == 0 {
        return Err(Error::Dropped(format!("doc {} is empty", doc.doc_id)));
    }
    let noise_norm = normalize(noise);
    if basic_words(body).iter().any(|w| w.text == noise_norm) || query.terms.contains(&noise_norm) {
        return Err(Error::Dropped(format!("noise word `{noise}` already occurs in query/doc {}", doc.doc_id)));
    }
    let per = word_token_count(noise, vocab);
    let doc_tokens = text_token_count(body, vocab);
    let room = max_len.saturating_sub(2 + doc_tokens) / per.max(1);
    let m = n.min(room);
    if m == 0 {
        return Err(Error::Dropped(format!("doc {} leaves no room for noise within max_len {max_len}", doc.doc_id)));
    }
    let mut t = Triple::unscored(query, doc, Axiom::Lnc1, Variant::Append, noise);
    t.baseline_text = body.to_string();
    t.perturbed_text = format!("{body} {}", repeat_word(noise, m));
    t.truncated = m < n;
    Ok(t)
}

/// Ranks `(doc_id, score)` pairs: score descending, ties by ascending id; keeps `k`.
pub fn rank_top_k(mut scored: Vec<(String, f32)>, k: usize) -> Vec<(String, f32)> {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ChangeBasis {
    /// `(perturbed − baseline) / |baseline|`
    Relative,
    /// `perturbed − baseline`
    Absolute,
}

/// Mean score change of one query's triples; `None` if every triple was excluded.
pub fn mean_change(pairs: &[(f32, f32)], basis: ChangeBasis) -> Option<f64> {
    let vals: Vec<f64> = pairs
        .iter()
        .filter_map(|&(b, p)| {
            let (b, p) = (f64::from(b), f64::from(p));
            match basis {
                ChangeBasis::Relative if b.abs() < 1e-9 => None,
                ChangeBasis::Relative => Some((p - b) / b.abs()),
                ChangeBasis::Absolute => Some(p - b),
            }
        })
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Picks the `n` queries with the largest mean change; ties and empty means go by query id.
pub fn select_queries(
    candidates: &[(String, Vec<(f32, f32)>)],
    n: usize,
    basis: ChangeBasis,
) -> Vec<(String, Option<f64>)> {
    let mut scored: Vec<(String, Option<f64>)> =
        candidates.iter().map(|(id, pairs)| (id.clone(), mean_change(pairs, basis))).collect();
    scored.sort_by(|a, b| match (a.1, b.1) {
        (Some(x), Some(y)) => y.total_cmp(&x).then_with(|| a.0.cmp(&b.0)),
        (Some(_), None) => Ordering::Less,
        (None, Some(_)) => Ordering::Greater,
        (None, None) => a.0.cmp(&b.0),
    });
    scored.truncate(n);
    scored
}

/// Token labels used to aggregate per-position impacts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TokenClass {
    Cls,
    Inj,
    QtermPlus,
    QtermMinus,
    Other,
    Sep,
}

impl TokenClass {
    pub const ALL: [TokenClass; 6] = [
        TokenClass::Cls,
        TokenClass::Inj,
        TokenClass::QtermPlus,
        TokenClass::QtermMinus,
        TokenClass::Other,
        TokenClass::Sep,
    ];

    pub fn label(self) -> &'static str {
        match self {
            TokenClass::Cls => "tok_CLS",
            TokenClass::Inj => "tok_inj",
            TokenClass::QtermPlus => "tok_qterm+",
            TokenClass::QtermMinus => "tok_qterm-",
            TokenClass::Other => "tok_other",
            TokenClass::Sep => "tok_SEP",
        }
    }

    /// Columns reported for an axiom: TFC1-R injects nothing, LNC1 has no selected term.
    pub fn for_axiom(axiom: Axiom) -> Vec<TokenClass> {
        let skip = match axiom {
            Axiom::Tfc1Inject => None,
            Axiom::Tfc1Replace => Some(TokenClass::Inj),
            Axiom::Lnc1 => Some(TokenClass::QtermPlus),
        };
        TokenClass::ALL.into_iter().filter(|c| Some(*c) != skip).collect()
    }
}

/// Per-position labels over the unpadded part of an encoding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenClassMap {
    pub classes: Vec<TokenClass>,
}

impl TokenClassMap {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn get(&self, pos: usize) -> Option<TokenClass> {
        self.classes.get(pos).copied()
    }

    pub fn count(&self, class: TokenClass) -> usize {
        self.classes.iter().filter(|c| **c == class).count()
    }
}

/// Labels every unpadded position of `enc`, the encoding of [`Triple::classification_text`].
pub fn classify_tokens(triple: &Triple, enc: &Encoding) -> Result<TokenClassMap> {
    let len = enc.unpadded_len();
    if len < 2 || enc.words.len() != enc.word_spans.len() {
        return Err(Error::Internal(format!("malformed encoding for doc {}", triple.doc_id)));
    }
    let mut covered = 1;
    for span in &enc.word_spans {
        if span.start != covered || span.end < span.start || span.end > len - 1 {
            return Err(Error::Internal(format!(
                "word spans of doc {} do not tile positions 1..{}",
                triple.doc_id,
                len - 1
            )));
        }
        covered = span.end;
    }
    if covered != len - 1 {
        return Err(Error::Internal(format!(
            "word spans of doc {} stop at {covered}, expected {}",
            triple.doc_id,
            len - 1
        )));
    }

    let selected = triple.selected_term.as_deref().map(normalize);
    let others: BTreeSet<&str> =
        triple.query.terms.iter().map(String::as_str).filter(|t| Some(*t) != selected.as_deref()).collect();
    let noise = normalize(&triple.filler);
    let last = enc.words.len().checked_sub(1);
    let injected = |i: usize, w: &str| match (triple.axiom, triple.variant) {
        (Axiom::Tfc1Inject, Variant::Append) => Some(i) == last,
        (Axiom::Tfc1Inject, Variant::Prepend) => i == 0,
        (Axiom::Lnc1, _) => w == noise,
        _ => false,
    };
    if triple.axiom == Axiom::Tfc1Inject {
        let idx = if triple.variant == Variant::Prepend { Some(0) } else { last };
        let w = idx.and_then(|i| enc.words.get(i)).map(String::as_str);
        if w.is_none() || w != selected.as_deref() {
            return Err(Error::Internal(format!(
                "injected word of doc {} is {w:?}, expected {selected:?}",
                triple.doc_id
            )));
        }
    }

    let mut classes = vec![TokenClass::Other; len];
    classes[0] = TokenClass::Cls;
    classes[len - 1] = TokenClass::Sep;
    for (i, (w, span)) in enc.words.iter().zip(&enc.word_spans).enumerate() {
        let class = if injected(i, w) {
            TokenClass::Inj
        } else if Some(w.as_str()) == selected.as_deref() {
            TokenClass::QtermPlus
        } else if others.contains(w.as_str()) {
            TokenClass::QtermMinus
        } else {
            TokenClass::Other
        };
        for c in &mut classes[span.clone()] {
            *c = class;
        }
    }
    Ok(TokenClassMap { classes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::encode;

    fn vocab() -> Vocab {
        Vocab::from_text(
            "[PAD]\n[UNK]\n[CLS]\n[SEP]\nwhat\nis\nwell\n##es\n##ley\na\ncollege\nin\nmass\n.\ngu\n##anta\n##namo\nthe\n",
        )
        .unwrap()
    }

    fn doc(text: &str) -> CorpusDoc {
        CorpusDoc { doc_id: "d1".into(), text: text.into() }
    }

    #[test]
    fn query_terms_are_normalized() {
        let q = Query::new("q1", "What is Wellesley?");
        assert_eq!(q.terms, ["what", "is", "wellesley"]);
    }

    #[test]
    fn inject_append_wellesley() {
        let v = vocab();
        let q = Query::new("q1", "wellesley");
        let t = perturb_tfc1_inject(&q, &doc("college in mass."), Variant::Append, 7, "a", &v, 512).unwrap();
        assert_eq!(t.perturbed_text, "college in mass. wellesley");
        assert_eq!(t.baseline_text, "college in mass. a a a");
        assert_eq!(text_token_count(&t.baseline_text, &v), text_token_count(&t.perturbed_text, &v));
    }

    #[test]
    fn inject_prepend() {
        let v = vocab();
        let q = Query::new("q1", "college");
        let t = perturb_tfc1_inject(&q, &doc("wellesley is"), Variant::Prepend, 1, "a", &v, 512).unwrap();
        assert_eq!(t.perturbed_text, "college wellesley is");
        assert_eq!(t.baseline_text, "a wellesley is");
    }

    #[test]
    fn single_term_sampling_ignores_seed() {
        let v = vocab();
        let q = Query::new("q1", "college");
        for seed in 0..20 {
            let t = perturb_tfc1_inject(&q, &doc("what"), Variant::Append, seed, "a", &v, 512).unwrap();
            assert_eq!(t.selected_term.as_deref(), Some("college"));
        }
    }

    #[test]
    fn inject_drops_when_too_long() {
        let v = vocab();
        let q = Query::new("q1", "wellesley");
        let err = perturb_tfc1_inject(&q, &doc("college in mass"), Variant::Append, 0, "a", &v, 6).unwrap_err();
        assert!(matches!(err, Error::Dropped(_)));
    }

    #[test]
    fn replace_all_occurrences() {
        let v = vocab();
        let q = Query::new("q1", "wellesley");
        let d = doc("Wellesley college is in mass. wellesley.");
        let t = perturb_tfc1_replace(&q, &d, 3, "a", &v, 512).unwrap();
        assert_eq!(t.perturbed_text, "a a a college is in mass. a a a.");
        assert_eq!(t.baseline_text, d.text);
    }

    #[test]
    fn replace_drops_without_query_terms() {
        let v = vocab();
        let q = Query::new("q1", "wellesley");
        assert!(matches!(perturb_tfc1_replace(&q, &doc("college in mass"), 0, "a", &v, 512), Err(Error::Dropped(_))));
    }

    #[test]
    fn lnc1_doubles_document() {
        let v = vocab();
        let q = Query::new("q1", "what");
        let t = perturb_lnc1(&q, &doc("what is the college ."), LNC1_NOISE, &v, 512).unwrap();
        let words: Vec<_> = t.perturbed_text.split_whitespace().collect();
        assert_eq!(words.len(), 10);
        assert_eq!(words.iter().filter(|w| **w == "guantanamo").count(), 5);
        assert!(!t.truncated);
    }

    #[test]
    fn lnc1_rejects_noise_in_doc_and_truncates() {
        let v = vocab();
        let q = Query::new("q1", "what");
        assert!(perturb_lnc1(&q, &doc("the Guantanamo college"), LNC1_NOISE, &v, 512).is_err());
        // 3 doc tokens + 2 specials leaves room for one 3-token noise word in 9 slots
        let t = perturb_lnc1(&q, &doc("what is the"), LNC1_NOISE, &v, 9).unwrap();
        assert!(t.truncated);
        assert_eq!(t.perturbed_text, "what is the guantanamo");
    }

    #[test]
    fn top_k_tie_break() {
        let r = rank_top_k(vec![("b".into(), 1.0), ("a".into(), 1.0), ("c".into(), 2.0)], 2);
        assert_eq!(r, vec![("c".to_string(), 2.0), ("a".to_string(), 1.0)]);
    }

    #[test]
    fn selection() {
        let c = vec![
            ("q2".to_string(), vec![(1.0, 1.2)]),
            ("q1".to_string(), vec![(1.0, 1.5)]),
            ("q0".to_string(), vec![(0.0, 5.0)]),
        ];
        let s = select_queries(&c, 1, ChangeBasis::Relative);
        assert_eq!(s[0].0, "q1");
        let all = select_queries(&c, 3, ChangeBasis::Relative);
        assert_eq!(all[2], ("q0".to_string(), None));
    }

    #[test]
    fn classify_append() {
        let v = vocab();
        let q = Query::new("q1", "what is wellesley");
        let mut t =
            perturb_tfc1_inject(&q, &doc("wellesley college is the"), Variant::Append, 0, "a", &v, 512).unwrap();
        t.selected_term = Some("wellesley".into());
        t.perturbed_text = "wellesley college is the wellesley".into();
        let enc = encode(t.classification_text(), &v, 512);
        let m = classify_tokens(&t, &enc).unwrap();
        use TokenClass::*;
        assert_eq!(m.classes, vec![Cls, QtermPlus, QtermPlus, QtermPlus, Other, QtermMinus, Other, Inj, Inj, Inj, Sep]);
    }

    #[test]
    fn classify_replace_has_no_inj() {
        let v = vocab();
        let q = Query::new("q1", "what is wellesley");
        let t = perturb_tfc1_replace(&q, &doc("wellesley is the college"), 5, "a", &v, 512).unwrap();
        let enc = encode(t.classification_text(), &v, 512);
        let m = classify_tokens(&t, &enc).unwrap();
        assert_eq!(m.count(TokenClass::Inj), 0);
        assert_eq!(m.count(TokenClass::Cls), 1);
        assert_eq!(m.count(TokenClass::Sep), 1);
    }

    #[test]
    fn class_columns() {
        assert_eq!(TokenClass::for_axiom(Axiom::Tfc1Inject).len(), 6);
        assert!(!TokenClass::for_axiom(Axiom::Tfc1Replace).contains(&TokenClass::Inj));
        assert_eq!(TokenClass::for_axiom(Axiom::Lnc1).len(), 5);
    }
}
