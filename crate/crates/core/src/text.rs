//! Tokenization, sentence segmentation and text normalization shared by the
//! chunkers, the metrics and the dataset builder.

use std::ops::Range;

/// Token measure used for every budget in the crate.
pub trait Tokenizer: Send + Sync {
    /// Byte ranges of the tokens of `text`, in order.
    fn spans(&self, text: &str) -> Vec<Range<usize>>;

    fn count(&self, text: &str) -> usize {
        self.spans(text).len()
    }
}

/// Whitespace-delimited tokens.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn spans(&self, text: &str) -> Vec<Range<usize>> {
        let mut spans = Vec::new();
        let mut start = None;
        for (i, c) in text.char_indices() {
            if c.is_whitespace() {
                if let Some(s) = start.take() {
                    spans.push(s..i);
                }
            } else if start.is_none() {
                start = Some(i);
            }
        }
        if let Some(s) = start {
            spans.push(s..text.len());
        }
        spans
    }

    fn count(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }
}

fn is_ascii_terminal(c: char) -> bool {
    matches!(c, '.' | '!' | '?')
}

fn is_wide_terminal(c: char) -> bool {
    matches!(c, '。' | '！' | '？')
}

/// Sentence boundaries as trimmed, non-empty byte ranges.
///
/// Line breaks always end a sentence. Within a line, `.`, `!` and `?` end a
/// sentence when followed by whitespace or the end of the line; the
/// full-width `。`, `！` and `？` end one unconditionally. Runs of terminals
/// stay together.
pub fn sentence_spans(text: &str) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut line_start = 0;
    for line in text.split('\n') {
        segment_line(text, line_start, line_start + line.len(), &mut out);
        line_start += line.len() + 1;
    }
    out
}

fn segment_line(text: &str, start: usize, end: usize, out: &mut Vec<Range<usize>>) {
    let line = &text[start..end];
    let chars: Vec<(usize, char)> = line.char_indices().collect();
    let mut seg_start = 0;
    let mut i = 0;
    while i < chars.len() {
        let (_, c) = chars[i];
        if is_ascii_terminal(c) || is_wide_terminal(c) {
            let mut j = i;
            let mut wide = false;
            while j < chars.len() && (is_ascii_terminal(chars[j].1) || is_wide_terminal(chars[j].1)) {
                wide |= is_wide_terminal(chars[j].1);
                j += 1;
            }
            let at_break = j == chars.len() || chars[j].1.is_whitespace();
            if wide || at_break {
                let seg_end = if j == chars.len() { line.len() } else { chars[j].0 };
                push_trimmed(text, start + seg_start, start + seg_end, out);
                seg_start = seg_end;
            }
            i = j;
        } else {
            i += 1;
        }
    }
    push_trimmed(text, start + seg_start, end, out);
}

fn push_trimmed(text: &str, start: usize, end: usize, out: &mut Vec<Range<usize>>) {
    let slice = &text[start..end];
    let lead = slice.len() - slice.trim_start().len();
    let trimmed = slice.trim();
    if !trimmed.is_empty() {
        out.push(start + lead..start + lead + trimmed.len());
    }
}

pub fn sentences(text: &str) -> Vec<&str> {
    sentence_spans(text).into_iter().map(|r| &text[r]).collect()
}

/// Lowercases, collapses whitespace runs to one space and strips trailing
/// sentence punctuation. Used for literal containment checks.
pub fn normalize_for_match(text: &str) -> String {
    let collapsed = text
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase();
    collapsed
        .trim_end_matches(|c: char| is_ascii_terminal(c) || is_wide_terminal(c) || matches!(c, ',' | ';' | ':' | '，' | '；' | '：'))
        .trim_end()
        .to_string()
}

/// Content tokens: lowercase alphanumeric runs, with each CJK ideograph as
/// its own token.
pub fn content_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars() {
        if is_cjk(c) {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(c.to_string());
        } else if c.is_alphanumeric() {
            cur.extend(c.to_lowercase());
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

pub fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x4E00..=0x9FFF | 0x3400..=0x4DBF | 0x20000..=0x2A6DF | 0xF900..=0xFAFF | 0x3040..=0x30FF | 0xAC00..=0xD7AF)
}

/// 64-bit FNV-1a. Stable across platforms and releases, unlike `DefaultHasher`.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
