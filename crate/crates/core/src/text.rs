//! Sentence splitting, token counting and overlapping chunking of raw documents.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ChunkError {
    #[error("overlap_tokens ({overlap}) must be smaller than max_body_tokens ({body})")]
    InvalidConfig { body: usize, overlap: usize },
}

/// Counts tokens in a piece of text.
///
/// Implementations must be deterministic. `truncate` and `tail` have generic
/// implementations based on `count`; counters that know their own token
/// boundaries should override them.
pub trait TokenCounter: Send + Sync {
    fn name(&self) -> &str;

    fn count(&self, text: &str) -> usize;

    /// Longest prefix of `text` that cuts at a whitespace boundary and holds at most `max` tokens.
    fn truncate<'a>(&self, text: &'a str, max: usize) -> &'a str {
        if self.count(text) <= max {
            return text;
        }
        let cuts = boundary_cuts(text);
        // largest cut whose prefix fits
        let (mut lo, mut hi) = (0usize, cuts.len());
        while lo < hi {
            let mid = (lo + hi).div_ceil(2);
            if self.count(&text[..cuts[mid - 1]]) <= max {
                lo = mid;
            } else {
                hi = mid - 1;
            }
        }
        if lo == 0 {
            ""
        } else {
            text[..cuts[lo - 1]].trim_end()
        }
    }

    /// Longest suffix of `text` starting at a whitespace boundary with at most `max` tokens.
    fn tail<'a>(&self, text: &'a str, max: usize) -> &'a str {
        if self.count(text) <= max {
            return text;
        }
        let starts: Vec<usize> = boundary_starts(text);
        // smallest start whose suffix fits
        let (mut lo, mut hi) = (0usize, starts.len());
        while lo < hi {
            let mid = (lo + hi) / 2;
            if self.count(&text[starts[mid]..]) <= max {
                hi = mid;
            } else {
                lo = mid + 1;
            }
        }
        if lo == starts.len() {
            ""
        } else {
            &text[starts[lo]..]
        }
    }
}

fn boundary_cuts(text: &str) -> Vec<usize> {
    let mut cuts = Vec::new();
    let mut prev_ws = true;
    for (i, c) in text.char_indices() {
        let ws = c.is_whitespace();
        if ws && !prev_ws {
            cuts.push(i);
        }
        prev_ws = ws;
    }
    cuts.push(text.len());
    cuts
}

fn boundary_starts(text: &str) -> Vec<usize> {
    let mut starts = Vec::new();
    let mut prev_ws = true;
    for (i, c) in text.char_indices() {
        let ws = c.is_whitespace();
        if !ws && prev_ws {
            starts.push(i);
        }
        prev_ws = ws;
    }
    starts
}

/// Default counter: every maximal run of word characters is one token and
/// every other non-whitespace character (punctuation, symbols) is its own token.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WordPunctCounter;

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

impl WordPunctCounter {
    /// Byte ranges of each token, in order.
    pub fn spans(&self, text: &str) -> Vec<Range<usize>> {
        let mut spans = Vec::new();
        let mut word_start: Option<usize> = None;
        for (i, c) in text.char_indices() {
            if is_word_char(c) {
                if word_start.is_none() {
                    word_start = Some(i);
                }
                continue;
            }
            if let Some(s) = word_start.take() {
                spans.push(s..i);
            }
            if !c.is_whitespace() {
                spans.push(i..i + c.len_utf8());
            }
        }
        if let Some(s) = word_start {
            spans.push(s..text.len());
        }
        spans
    }
}

impl TokenCounter for WordPunctCounter {
    fn name(&self) -> &str {
        "word-punct"
    }

    fn count(&self, text: &str) -> usize {
        let mut n = 0;
        let mut in_word = false;
        for c in text.chars() {
            if is_word_char(c) {
                if !in_word {
                    n += 1;
                    in_word = true;
                }
            } else {
                in_word = false;
                if !c.is_whitespace() {
                    n += 1;
                }
            }
        }
        n
    }

    fn truncate<'a>(&self, text: &'a str, max: usize) -> &'a str {
        let spans = self.spans(text);
        if spans.len() <= max {
            return text;
        }
        if max == 0 {
            return "";
        }
        &text[..spans[max - 1].end]
    }

    fn tail<'a>(&self, text: &'a str, max: usize) -> &'a str {
        let spans = self.spans(text);
        if spans.len() <= max {
            return text;
        }
        if max == 0 {
            return "";
        }
        &text[spans[spans.len() - max].start..]
    }
}

/// Free-function form of the default counter.
pub fn count_tokens(text: &str) -> usize {
    WordPunctCounter.count(text)
}

const ABBREVIATIONS: &[&str] = &[
    "mr", "mrs", "ms", "dr", "prof", "sr", "jr", "st", "vs", "etc", "e.g", "i.e", "inc", "ltd",
    "co", "corp", "fig", "figs", "no", "vol", "al", "approx", "dept", "est", "jan", "feb", "mar",
    "apr", "jun", "jul", "aug", "sep", "sept", "oct", "nov", "dec", "u.s", "u.k", "mt", "gen",
    "gov", "sen", "rep", "rev", "lt", "col", "capt", "sgt",
];

fn is_closing(c: char) -> bool {
    matches!(c, '"' | '\'' | ')' | ']' | '}' | '\u{201d}' | '\u{2019}')
}

fn is_opening(c: char) -> bool {
    matches!(c, '"' | '\'' | '(' | '[' | '\u{201c}' | '\u{2018}')
}

/// Byte spans of sentences in `text`, without surrounding whitespace.
pub fn sentence_spans(text: &str) -> Vec<Range<usize>> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut spans = Vec::new();
    let mut start: Option<usize> = None;
    let mut i = 0;
    while i < chars.len() {
        let (pos, c) = chars[i];
        if start.is_none() {
            if c.is_whitespace() {
                i += 1;
                continue;
            }
            start = Some(pos);
        }
        if matches!(c, '.' | '!' | '?') {
            // swallow runs of terminal punctuation and closing quotes/brackets
            let mut j = i + 1;
            while j < chars.len() && (matches!(chars[j].1, '.' | '!' | '?') || is_closing(chars[j].1)) {
                j += 1;
            }
            let end = if j < chars.len() { chars[j].0 } else { text.len() };
            let mut k = j;
            while k < chars.len() && chars[k].1.is_whitespace() {
                k += 1;
            }
            let followed_by_ws = k > j;
            let next_ok = k >= chars.len() || {
                let mut n = chars[k].1;
                if is_opening(n) && k + 1 < chars.len() {
                    n = chars[k + 1].1;
                }
                n.is_uppercase() || n.is_ascii_digit()
            };
            let abbreviation = c == '.' && is_abbreviation(&text[start.unwrap()..chars[i].0]);
            if (followed_by_ws || j >= chars.len()) && next_ok && !abbreviation {
                spans.push(start.take().unwrap()..end);
                i = k;
                continue;
            }
            i = j;
            continue;
        }
        i += 1;
    }
    if let Some(s) = start {
        let trimmed = text[s..].trim_end();
        if !trimmed.is_empty() {
            spans.push(s..s + trimmed.len());
        }
    }
    spans
}

fn is_abbreviation(before_dot: &str) -> bool {
    let word = before_dot
        .rsplit(|c: char| c.is_whitespace() || is_opening(c))
        .next()
        .unwrap_or("");
    let lower = word.to_lowercase();
    !lower.is_empty() && ABBREVIATIONS.contains(&lower.as_str())
}

/// Rule-based sentence splitter. Interleaving the returned sentences with
/// the whitespace between them reconstructs the trimmed input.
pub fn split_sentences(text: &str) -> Vec<&str> {
    sentence_spans(text).into_iter().map(|r| &text[r]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkingConfig {
    pub max_body_tokens: usize,
    pub overlap_tokens: usize,
}

impl Default for ChunkingConfig {
    fn default() -> Self {
        Self { max_body_tokens: 250, overlap_tokens: 50 }
    }
}

impl ChunkingConfig {
    pub fn validate(&self) -> Result<(), ChunkError> {
        if self.overlap_tokens >= self.max_body_tokens {
            return Err(ChunkError::InvalidConfig {
                body: self.max_body_tokens,
                overlap: self.overlap_tokens,
            });
        }
        Ok(())
    }

    pub fn max_chunk_tokens(&self) -> usize {
        self.max_body_tokens + self.overlap_tokens
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub id: String,
    pub doc_id: String,
    pub position: usize,
    pub text: String,
    pub token_count: usize,
    /// Byte offset in `text` where the body starts; everything before it is
    /// overlap carried over from the previous chunk.
    pub body_start: usize,
}

impl Chunk {
    pub fn body(&self) -> &str {
        &self.text[self.body_start..]
    }

    pub fn overlap(&self) -> &str {
        &self.text[..self.body_start]
    }

    /// Builds a chunk from a standalone text with no overlap.
    pub fn standalone(doc_id: &str, position: usize, text: &str, counter: &dyn TokenCounter) -> Self {
        Chunk {
            id: chunk_id(doc_id, position, text),
            doc_id: doc_id.to_string(),
            position,
            text: text.to_string(),
            token_count: counter.count(text),
            body_start: 0,
        }
    }
}

/// Stable content hash of (doc_id, position, text).
pub fn chunk_id(doc_id: &str, position: usize, text: &str) -> String {
    let mut h = Sha256::new();
    h.update((doc_id.len() as u64).to_le_bytes());
    h.update(doc_id.as_bytes());
    h.update((position as u64).to_le_bytes());
    h.update(text.as_bytes());
    hex::encode(&h.finalize()[..16])
}

const CUT_PUNCT: &[char] = &[',', ';', ':', '.', '!', '?', '\u{2014}', '\u{2013}', ')', '"'];

/// Splits an over-long sentence at punctuation marks into spans of at most
/// `max` tokens. A punctuation-free stretch longer than `max` is cut at token
/// boundaries.
fn split_long(text: &str, span: Range<usize>, max: usize, counter: &dyn TokenCounter) -> Vec<Range<usize>> {
    let s = &text[span.clone()];
    // candidate cut points: just after punctuation followed by whitespace
    let mut pieces: Vec<Range<usize>> = Vec::new();
    let mut piece_start = 0;
    let chars: Vec<(usize, char)> = s.char_indices().collect();
    for (idx, &(pos, c)) in chars.iter().enumerate() {
        if CUT_PUNCT.contains(&c) {
            let next_ws = chars.get(idx + 1).map(|&(_, n)| n.is_whitespace()).unwrap_or(true);
            if next_ws {
                let end = pos + c.len_utf8();
                pieces.push(piece_start..end);
                piece_start = chars.get(idx + 1).map(|&(p, _)| p).unwrap_or(s.len());
            }
        }
    }
    if piece_start < s.len() {
        pieces.push(piece_start..s.len());
    }
    // trim whitespace around pieces, then break pieces that are still too long
    let mut atoms: Vec<Range<usize>> = Vec::new();
    for p in pieces {
        let raw = &s[p.clone()];
        let lead = raw.len() - raw.trim_start().len();
        let trimmed = raw.trim();
        if trimmed.is_empty() {
            continue;
        }
        let mut r = p.start + lead..p.start + lead + trimmed.len();
        while counter.count(&s[r.clone()]) > max {
            let head = counter.truncate(&s[r.clone()], max);
            let head = if head.is_empty() {
                // single token longer than budget cannot happen for sane counters; take one char
                let c = s[r.clone()].chars().next().unwrap();
                &s[r.start..r.start + c.len_utf8()]
            } else {
                head
            };
            atoms.push(r.start..r.start + head.len());
            let rest = &s[r.start + head.len()..r.end];
            let lead = rest.len() - rest.trim_start().len();
            r = r.start + head.len() + lead..r.end;
            if r.is_empty() {
                break;
            }
        }
        if !r.is_empty() {
            atoms.push(r);
        }
    }
    // greedy regrouping of atoms into spans within budget
    let mut out: Vec<Range<usize>> = Vec::new();
    for a in atoms {
        if let Some(last) = out.last_mut() {
            if counter.count(&s[last.start..a.end]) <= max {
                last.end = a.end;
                continue;
            }
        }
        out.push(a);
    }
    out.into_iter().map(|r| span.start + r.start..span.start + r.end).collect()
}

/// Groups sentences into chunks whose body holds at most `max_body_tokens`
/// tokens, each prefixed with up to `overlap_tokens` tokens from the end of
/// the previous chunk's body.
pub fn chunk_text(
    doc_id: &str,
    text: &str,
    cfg: &ChunkingConfig,
    counter: &dyn TokenCounter,
) -> Result<Vec<Chunk>, ChunkError> {
    cfg.validate()?;
    let mut units: Vec<Range<usize>> = Vec::new();
    for s in sentence_spans(text) {
        if counter.count(&text[s.clone()]) > cfg.max_body_tokens {
            units.extend(split_long(text, s, cfg.max_body_tokens, counter));
        } else {
            units.push(s);
        }
    }

    // bodies as lists of unit indices
    let mut bodies: Vec<Vec<usize>> = Vec::new();
    for (i, u) in units.iter().enumerate() {
        if let Some(body) = bodies.last_mut() {
            let start = units[body[0]].start;
            if counter.count(&text[start..u.end]) <= cfg.max_body_tokens {
                body.push(i);
                continue;
            }
        }
        bodies.push(vec![i]);
    }

    let mut chunks = Vec::with_capacity(bodies.len());
    let mut prev: Option<&Vec<usize>> = None;
    for (position, body) in bodies.iter().enumerate() {
        let body_range = units[body[0]].start..units[*body.last().unwrap()].end;
        let overlap_start = match prev {
            Some(p) if cfg.overlap_tokens > 0 => overlap_start(text, p, &units, cfg.overlap_tokens, counter),
            _ => None,
        };
        let (chunk_text, body_start) = match overlap_start {
            Some(os) => (&text[os..body_range.end], body_range.start - os),
            None => (&text[body_range.clone()], 0),
        };
        chunks.push(Chunk {
            id: chunk_id(doc_id, position, chunk_text),
            doc_id: doc_id.to_string(),
            position,
            text: chunk_text.to_string(),
            token_count: counter.count(chunk_text),
            body_start,
        });
        prev = Some(body);
    }
    Ok(chunks)
}

/// Byte offset where the overlap taken from the previous body starts.
fn overlap_start(
    text: &str,
    prev_body: &[usize],
    units: &[Range<usize>],
    budget: usize,
    counter: &dyn TokenCounter,
) -> Option<usize> {
    let end = units[*prev_body.last().unwrap()].end;
    let mut start: Option<usize> = None;
    for &u in prev_body.iter().rev() {
        if counter.count(&text[units[u].start..end]) <= budget {
            start = Some(units[u].start);
        } else {
            break;
        }
    }
    if start.is_some() {
        return start;
    }
    let last = &units[*prev_body.last().unwrap()];
    let tail = counter.tail(&text[last.clone()], budget);
    if tail.is_empty() {
        None
    } else {
        Some(last.end - tail.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sentence(tag: &str, tokens: usize) -> String {
        // tokens-1 words + final period
        let mut words: Vec<String> = (0..tokens - 1).map(|i| format!("{tag}w{i}")).collect();
        words[0] = format!("S{tag}");
        format!("{}.", words.join(" "))
    }

    #[test]
    fn count_examples() {
        assert_eq!(count_tokens(""), 0);
        assert_eq!(count_tokens("Hello, world!"), 4);
        assert_eq!(count_tokens("a b c"), 3);
        assert_eq!(count_tokens("don't"), 3);
    }

    #[test]
    fn split_examples() {
        assert_eq!(split_sentences("A. B? C!"), vec!["A.", "B?", "C!"]);
        assert!(split_sentences("").is_empty());
        assert_eq!(split_sentences("no terminal punctuation"), vec!["no terminal punctuation"]);
    }

    #[test]
    fn abbreviations_do_not_split() {
        let s = split_sentences("Dr. Smith arrived. He sat down.");
        assert_eq!(s, vec!["Dr. Smith arrived.", "He sat down."]);
        let s = split_sentences("Costs rose e.g. Fuel and food.");
        assert_eq!(s.len(), 1);
    }

    #[test]
    fn lowercase_continuation_does_not_split() {
        assert_eq!(split_sentences("It was 3.5 m. long enough.").len(), 1);
    }

    #[test]
    fn quotes_stay_with_sentence() {
        assert_eq!(split_sentences("He said \"Stop.\" Then left."), vec!["He said \"Stop.\"", "Then left."]);
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = ChunkingConfig { max_body_tokens: 50, overlap_tokens: 50 };
        assert!(chunk_text("d", "x", &cfg, &WordPunctCounter).is_err());
    }

    #[test]
    fn single_sentence_single_chunk() {
        let s = sentence("a", 100);
        assert_eq!(count_tokens(&s), 100);
        let chunks = chunk_text("d", &s, &ChunkingConfig::default(), &WordPunctCounter).unwrap();
        assert_eq!(chunks.len(), 1);
        assert_eq!(chunks[0].body_start, 0);
        assert_eq!(chunks[0].token_count, 100);
    }

    #[test]
    fn six_sentences_pair_up_with_overlap() {
        let sents: Vec<String> = ["a", "b", "c", "d", "e", "f"].iter().map(|t| sentence(t, 100)).collect();
        let doc = sents.join(" ");
        let chunks = chunk_text("d", &doc, &ChunkingConfig::default(), &WordPunctCounter).unwrap();
        assert_eq!(chunks.len(), 3);
        assert_eq!(chunks[0].body(), format!("{} {}", sents[0], sents[1]));
        assert_eq!(chunks[1].body(), format!("{} {}", sents[2], sents[3]));
        assert_eq!(chunks[2].body(), format!("{} {}", sents[4], sents[5]));
        assert!(chunks[0].overlap().is_empty());
        // previous last sentence is 100 tokens > 50, so the overlap is its last 50 tokens
        for (i, c) in chunks.iter().enumerate().skip(1) {
            let ov = c.overlap().trim_end();
            assert_eq!(count_tokens(ov), 50);
            assert!(sents[2 * i - 1].ends_with(ov));
            assert_eq!(c.token_count, 250);
        }
    }

    #[test]
    fn overlap_prefers_whole_sentences() {
        let sents: Vec<String> = (0..12).map(|i| sentence(&format!("t{i}"), 30)).collect();
        let doc = sents.join(" ");
        let chunks = chunk_text("d", &doc, &ChunkingConfig::default(), &WordPunctCounter).unwrap();
        // 8 sentences fit in 250; the 30-token last sentence is carried over whole
        assert_eq!(chunks.len(), 2);
        assert_eq!(chunks[1].overlap().trim_end(), sents[7]);
    }

    #[test]
    fn long_sentence_cut_at_punctuation() {
        let clauses: Vec<String> = (0..20)
            .map(|i| {
                let w: Vec<String> = (0..29).map(|j| format!("c{i}x{j}")).collect();
                w.join(" ")
            })
            .collect();
        let sent = format!("{}.", clauses.join(", "));
        assert_eq!(count_tokens(&sent), 600);
        let chunks = chunk_text("d", &sent, &ChunkingConfig::default(), &WordPunctCounter).unwrap();
        assert!(chunks.len() >= 3);
        for c in &chunks {
            assert!(c.token_count <= 300);
            assert!(count_tokens(c.body()) <= 250);
            let b = c.body().trim_end();
            assert!(b.ends_with(',') || b.ends_with('.'), "cut not at punctuation: {b:?}");
        }
    }

    #[test]
    fn long_sentence_without_punctuation_hard_cut() {
        let w: Vec<String> = (0..700).map(|j| format!("w{j}")).collect();
        let chunks = chunk_text("d", &w.join(" "), &ChunkingConfig::default(), &WordPunctCounter).unwrap();
        assert!(chunks.len() >= 3);
        assert!(chunks.iter().all(|c| c.token_count <= 300));
    }

    #[test]
    fn ids_are_stable_and_distinct() {
        let doc = "One. Two. Three.";
        let a = chunk_text("d", doc, &ChunkingConfig { max_body_tokens: 2, overlap_tokens: 1 }, &WordPunctCounter).unwrap();
        let b = chunk_text("d", doc, &ChunkingConfig { max_body_tokens: 2, overlap_tokens: 1 }, &WordPunctCounter).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        assert_ne!(a[0].id, a[1].id);
        assert_ne!(chunk_id("d", 0, "x"), chunk_id("e", 0, "x"));
    }

    #[test]
    fn generic_truncate_and_tail_match_default() {
        struct Generic;
        impl TokenCounter for Generic {
            fn name(&self) -> &str {
                "g"
            }
            fn count(&self, t: &str) -> usize {
                count_tokens(t)
            }
        }
        let t = "alpha beta gamma delta epsilon";
        assert_eq!(Generic.truncate(t, 2), "alpha beta");
        assert_eq!(Generic.tail(t, 2), "delta epsilon");
        assert_eq!(WordPunctCounter.truncate(t, 2), "alpha beta");
        assert_eq!(WordPunctCounter.tail(t, 2), "delta epsilon");
        assert_eq!(Generic.truncate(t, 0), "");
    }
}
