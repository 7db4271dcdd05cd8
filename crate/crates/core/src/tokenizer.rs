// SPDX-License-Identifier: MIT OR Apache-2.0

//! Uncased WordPiece tokenizer.
//!
//! Text goes through the usual uncased-BERT basic tokenizer (drop control
//! characters, split on whitespace, isolate CJK ideographs, lowercase,
//! strip combining accents, split punctuation into its own words) and
//! each resulting word is cut into vocabulary pieces by greedy
//! longest-match, with `##` marking continuation pieces. Words that cannot
//! be fully covered become a single `[UNK]`.
//!
//! Basic words keep the byte range they came from, so perturbations can
//! rewrite the original text word by word, and every [`Encoding`] records
//! which token positions each word occupies.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::ops::Range;

use unicode_general_category::{get_general_category, GeneralCategory};
use unicode_normalization::char::decompose_canonical;

use crate::error::{Error, Result};

pub const CLS_TOKEN: &str = "[CLS]";
pub const SEP_TOKEN: &str = "[SEP]";
pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";

const CONTINUATION: &str = "##";
const MAX_CHARS_PER_WORD: usize = 100;

/// Default encoder length; the positional-embedding limit of the model family.
pub const DEFAULT_MAX_LEN: usize = 512;

/// Token vocabulary; ids are line numbers of the vocab file.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    /// Word-initial pieces.
    heads: BTreeMap<String, u32>,
    /// `##`-pieces, keyed without the prefix.
    tails: BTreeMap<String, u32>,
    pub cls_id: u32,
    pub sep_id: u32,
    pub pad_id: u32,
    pub unk_id: u32,
}

impl Vocab {
    /// Parses vocab text: one token per line, the zero-based line number is the id.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines: Vec<&str> = text.split('\n').collect();
        if lines.last() == Some(&"") {
            lines.pop();
        }
        Self::from_tokens(lines.into_iter().map(|l| l.strip_suffix('\r').unwrap_or(l).to_string()).collect())
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut heads = BTreeMap::new();
        let mut tails = BTreeMap::new();
        let mut seen = BTreeMap::new();
        for (id, tok) in tokens.iter().enumerate() {
            let id = u32::try_from(id).map_err(|_| Error::Format("vocab too large".into()))?;
            if seen.insert(tok.as_str(), id).is_some() {
                return Err(Error::Format(alloc::format!("duplicate vocab token `{tok}` at line {}", id + 1)));
            }
            match tok.strip_prefix(CONTINUATION) {
                Some(rest) if !rest.is_empty() => {
                    tails.insert(rest.to_string(), id);
                }
                _ => {
                    heads.insert(tok.clone(), id);
                }
            }
        }
        let special = |name: &str| {
            seen.get(name)
                .copied()
                .ok_or_else(|| Error::Format(alloc::format!("vocab is missing special token {name}")))
        };
        let (cls_id, sep_id, pad_id, unk_id) =
            (special(CLS_TOKEN)?, special(SEP_TOKEN)?, special(PAD_TOKEN)?, special(UNK_TOKEN)?);
        Ok(Self { tokens, heads, tails, cls_id, sep_id, pad_id, unk_id })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        match token.strip_prefix(CONTINUATION) {
            Some(rest) if !rest.is_empty() => self.tails.get(rest).copied(),
            _ => self.heads.get(token).copied(),
        }
    }

    /// Greedy longest-match WordPiece of one normalized word.
    pub fn wordpiece(&self, word: &str, out: &mut Vec<u32>) {
        if word.chars().count() > MAX_CHARS_PER_WORD {
            out.push(self.unk_id);
            return;
        }
        let mark = out.len();
        let mut start = 0;
        while start < word.len() {
            let table = if start == 0 { &self.heads } else { &self.tails };
            let rest = &word[start..];
            let mut found = None;
            let mut end = rest.len();
            while end > 0 {
                if rest.is_char_boundary(end) {
                    if let Some(&id) = table.get(&rest[..end]) {
                        found = Some((id, end));
                        break;
                    }
                }
                end -= 1;
            }
            match found {
                Some((id, len)) => {
                    out.push(id);
                    start += len;
                }
                None => {
                    out.truncate(mark);
                    out.push(self.unk_id);
                    return;
                }
            }
        }
    }
}

/// One basic-tokenizer word: normalized text plus its byte range in the source.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Word {
    pub text: String,
    pub span: Range<usize>,
    /// The word is a single punctuation character.
    pub punct: bool,
}

fn is_whitespace(c: char) -> bool {
    matches!(c, ' ' | '\t' | '\n' | '\r') || get_general_category(c) == GeneralCategory::SpaceSeparator
}

fn is_control(c: char) -> bool {
    if matches!(c, '\t' | '\n' | '\r') {
        return false;
    }
    matches!(
        get_general_category(c),
        GeneralCategory::Control
            | GeneralCategory::Format
            | GeneralCategory::Surrogate
            | GeneralCategory::PrivateUse
            | GeneralCategory::Unassigned
    )
}

fn is_punctuation(c: char) -> bool {
    let cp = c as u32;
    if (33..=47).contains(&cp) || (58..=64).contains(&cp) || (91..=96).contains(&cp) || (123..=126).contains(&cp) {
        return true;
    }
    matches!(
        get_general_category(c),
        GeneralCategory::ConnectorPunctuation
            | GeneralCategory::DashPunctuation
            | GeneralCategory::OpenPunctuation
            | GeneralCategory::ClosePunctuation
            | GeneralCategory::InitialPunctuation
            | GeneralCategory::FinalPunctuation
            | GeneralCategory::OtherPunctuation
    )
}

fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x4E00..=0x9FFF
        | 0x3400..=0x4DBF
        | 0x20000..=0x2A6DF
        | 0x2A700..=0x2B73F
        | 0x2B740..=0x2B81F
        | 0x2B820..=0x2CEAF
        | 0xF900..=0xFAFF
        | 0x2F800..=0x2FA1F)
}

/// Lowercases, decomposes and drops nonspacing marks.
fn normalize_char(c: char, mut emit: impl FnMut(char)) {
    for lower in c.to_lowercase() {
        decompose_canonical(lower, |d| {
            if get_general_category(d) != GeneralCategory::NonspacingMark {
                emit(d);
            }
        });
    }
}

/// Normalizes a string the way the basic tokenizer does (no splitting).
pub fn normalize(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        normalize_char(c, |n| out.push(n));
    }
    out
}

/// Runs the uncased basic tokenizer, keeping source byte ranges.
pub fn basic_words(text: &str) -> Vec<Word> {
    let mut words = Vec::new();
    let mut cur = String::new();
    let mut cur_span: Option<Range<usize>> = None;

    fn flush(words: &mut Vec<Word>, cur: &mut String, span: &mut Option<Range<usize>>) {
        if let Some(s) = span.take() {
            if !cur.is_empty() {
                words.push(Word { text: core::mem::take(cur), span: s, punct: false });
            }
            cur.clear();
        }
    }

    for (i, c) in text.char_indices() {
        let end = i + c.len_utf8();
        if c == '\0' || c == '\u{FFFD}' || is_control(c) {
            continue;
        }
        if is_whitespace(c) {
            flush(&mut words, &mut cur, &mut cur_span);
            continue;
        }
        if is_cjk(c) {
            flush(&mut words, &mut cur, &mut cur_span);
            let mut t = String::new();
            normalize_char(c, |n| t.push(n));
            words.push(Word { text: t, span: i..end, punct: false });
            continue;
        }
        let mut buf = String::new();
        normalize_char(c, |ch| buf.push(ch));
        if buf.is_empty() {
            // a lone combining mark vanishes but still belongs to the open word
            if let Some(s) = &mut cur_span {
                s.end = end;
            }
        }
        for ch in buf.chars() {
            if is_punctuation(ch) {
                flush(&mut words, &mut cur, &mut cur_span);
                words.push(Word { text: ch.to_string(), span: i..end, punct: true });
            } else {
                cur.push(ch);
                match &mut cur_span {
                    Some(s) => s.end = end,
                    None => cur_span = Some(i..end),
                }
            }
        }
    }
    flush(&mut words, &mut cur, &mut cur_span);
    words
}

/// Query terms: basic words without punctuation, normalized, in order.
pub fn query_terms(text: &str) -> Vec<String> {
    basic_words(text).into_iter().filter(|w| !w.punct).map(|w| w.text).collect()
}

/// Token ids, attention mask and word-to-position bookkeeping for one sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoding {
    pub ids: Vec<u32>,
    pub attention_mask: Vec<u8>,
    /// Normalized text of every word that made it (at least partially) into `ids`.
    pub words: Vec<String>,
    /// Token positions of `words[i]`; disjoint, ordered, inside `[1, unpadded_len - 1)`.
    pub word_spans: Vec<Range<usize>>,
    unpadded_len: usize,
}

impl Encoding {
    /// Builds an encoding from raw ids (no word bookkeeping); used for synthetic inputs.
    pub fn from_ids(ids: Vec<u32>) -> Self {
        let n = ids.len();
        Self { attention_mask: alloc::vec![1; n], ids, words: Vec::new(), word_spans: Vec::new(), unpadded_len: n }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Length before any padding was appended.
    pub fn unpadded_len(&self) -> usize {
        self.unpadded_len
    }

    /// Appends `[PAD]` up to `len`. Pad positions are attention-masked unless `attend` is set.
    pub fn pad_to(&mut self, len: usize, pad_id: u32, attend: bool) {
        while self.ids.len() < len {
            self.ids.push(pad_id);
            self.attention_mask.push(u8::from(attend));
        }
    }
}

/// Tokenizes `text` into `[CLS] pieces… [SEP]`, truncating so `[SEP]` always fits.
pub fn encode(text: &str, vocab: &Vocab, max_len: usize) -> Encoding {
    let budget = max_len.max(2) - 2;
    let mut ids = alloc::vec![vocab.cls_id];
    let mut words = Vec::new();
    let mut word_spans = Vec::new();
    let mut pieces = Vec::new();
    for w in basic_words(text) {
        if ids.len() > budget {
            break;
        }
        pieces.clear();
        vocab.wordpiece(&w.text, &mut pieces);
        let room = budget - (ids.len() - 1);
        let take = pieces.len().min(room);
        let start = ids.len();
        ids.extend_from_slice(&pieces[..take]);
        words.push(w.text);
        word_spans.push(start..start + take);
    }
    ids.push(vocab.sep_id);
    let n = ids.len();
    Encoding { attention_mask: alloc::vec![1; n], ids, words, word_spans, unpadded_len: n }
}

/// Number of WordPiece tokens `word` produces in any untruncated context.
pub fn word_token_count(word: &str, vocab: &Vocab) -> usize {
    let mut pieces = Vec::new();
    for w in basic_words(word) {
        vocab.wordpiece(&w.text, &mut pieces);
    }
    pieces.len()
}

/// Token count of a whole text without special tokens or truncation.
pub fn text_token_count(text: &str, vocab: &Vocab) -> usize {
    word_token_count(text, vocab)
}

/// Indices of case-insensitive whole-word matches of `term` in `doc_words`.
pub fn match_word_positions<S: AsRef<str>>(doc_words: &[S], term: &str) -> Vec<usize> {
    let target = normalize(term);
    doc_words.iter().enumerate().filter(|(_, w)| normalize(w.as_ref()) == target).map(|(i, _)| i).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn toy() -> Vocab {
        Vocab::from_text("[PAD]\n[UNK]\n[CLS]\n[SEP]\nwhat\nis\nwell\n##es\n##ley\na\n,\n.\nun\n##aff\n##able\n")
            .unwrap()
    }

    #[test]
    fn minimal_vocab() {
        let v = Vocab::from_text("[PAD]\n[UNK]\n[CLS]\n[SEP]").unwrap();
        assert_eq!(v.len(), 4);
        assert_eq!((v.pad_id, v.unk_id, v.cls_id, v.sep_id), (0, 1, 2, 3));
    }

    #[test]
    fn vocab_errors() {
        assert!(matches!(Vocab::from_text("[PAD]\n[UNK]\n[SEP]\n"), Err(Error::Format(_))));
        assert!(matches!(Vocab::from_text("[PAD]\n[UNK]\n[CLS]\n[SEP]\nx\nx\n"), Err(Error::Format(_))));
    }

    #[test]
    fn empty_text() {
        let v = toy();
        let e = encode("", &v, 512);
        assert_eq!(e.ids, vec![v.cls_id, v.sep_id]);
        assert_eq!(e.attention_mask, vec![1, 1]);
        assert!(e.word_spans.is_empty());
    }

    #[test]
    fn greedy_continuations() {
        let v = toy();
        let e = encode("What is Wellesley?", &v, 512);
        assert_eq!(e.ids, vec![2, 4, 5, 6, 7, 8, 1, 3]);
        assert_eq!(e.words, vec!["what", "is", "wellesley", "?"]);
        assert_eq!(e.word_spans, vec![1..2, 2..3, 3..6, 6..7]);
    }

    #[test]
    fn undecomposable_word_is_single_unk() {
        let v = toy();
        assert_eq!(word_token_count("wellx", &v), 1);
        assert_eq!(word_token_count("unaffable", &v), 3);
        assert_eq!(word_token_count("a", &v), 1);
    }

    #[test]
    fn truncation_keeps_sep() {
        let v = toy();
        let e = encode("wellesley wellesley wellesley", &v, 6);
        assert_eq!(e.len(), 6);
        assert_eq!(*e.ids.last().unwrap(), v.sep_id);
        assert_eq!(e.word_spans, vec![1..4, 4..5]);
    }

    #[test]
    fn punctuation_and_accents() {
        let ws = basic_words("Café, naïve!");
        let texts: Vec<_> = ws.iter().map(|w| w.text.as_str()).collect();
        assert_eq!(texts, vec!["cafe", ",", "naive", "!"]);
        assert_eq!(&"Café, naïve!"[ws[0].span.clone()], "Café");
        assert!(ws[1].punct);
    }

    #[test]
    fn cjk_is_split_per_character() {
        let ws = basic_words("北京abc大学");
        let texts: Vec<_> = ws.iter().map(|w| w.text.as_str()).collect();
        assert_eq!(texts, vec!["北", "京", "abc", "大", "学"]);
    }

    #[test]
    fn word_matching() {
        assert_eq!(match_word_positions(&["Wellesley", "College", "wellesley"], "wellesley"), vec![0, 2]);
        assert!(match_word_positions(&["well"], "wellesley").is_empty());
    }

    #[test]
    fn padding() {
        let v = toy();
        let mut e = encode("what", &v, 512);
        e.pad_to(5, v.pad_id, false);
        assert_eq!(e.attention_mask, vec![1, 1, 1, 0, 0]);
        assert_eq!(e.unpadded_len(), 3);
    }
}
