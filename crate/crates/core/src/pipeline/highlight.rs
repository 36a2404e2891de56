//! Anchors model-returned quotes to exact character spans in patient turns.
//!
//! Each quote is matched at its earliest exact occurrence (earliest turn,
//! then earliest offset). Failing that, both sides are normalized —
//! lowercased, punctuation removed, whitespace runs collapsed — and the
//! earliest normalized occurrence is mapped back to original offsets.
//! Quotes that match neither way are dropped and counted. Offsets are in
//! characters, half-open.

use crate::domain::{HighlightReport, HighlightSpan, SessionId, Speaker, Turn};

/// Splits model output into candidate quotes: a JSON array of strings, or
/// one quote per line with optional bullet and surrounding quote marks.
pub fn parse_quotes(raw: &str) -> Vec<String> {
    let trimmed = raw.trim();
    if trimmed.starts_with('[') {
        if let Ok(list) = serde_json::from_str::<Vec<String>>(trimmed) {
            return list;
        }
    }
    trimmed
        .lines()
        .filter_map(|line| {
            let mut t = line.trim();
            for bullet in ["- ", "* ", "• "] {
                if let Some(rest) = t.strip_prefix(bullet) {
                    t = rest.trim_start();
                    break;
                }
            }
            if let Some(pos) = t.find(". ") {
                if pos > 0 && t[..pos].bytes().all(|b| b.is_ascii_digit()) {
                    t = t[pos + 2..].trim_start();
                }
            }
            let t = strip_quote_marks(t);
            (!t.is_empty()).then(|| t.to_owned())
        })
        .collect()
}

fn strip_quote_marks(t: &str) -> &str {
    for (open, close) in [('"', '"'), ('\u{201c}', '\u{201d}')] {
        if let Some(inner) = t.strip_prefix(open).and_then(|r| r.strip_suffix(close)) {
            return inner.trim();
        }
    }
    t
}

/// Normalized text plus, for each normalized char, the index of the
/// original char it came from.
pub fn normalize_with_map(text: &str) -> (Vec<char>, Vec<usize>) {
    let mut out = Vec::new();
    let mut map = Vec::new();
    let mut pending_space = false;
    for (i, c) in text.chars().enumerate() {
        if c.is_whitespace() {
            pending_space = !out.is_empty();
        } else if c.is_alphanumeric() {
            if pending_space {
                out.push(' ');
                map.push(i);
                pending_space = false;
            }
            for lc in c.to_lowercase() {
                out.push(lc);
                map.push(i);
            }
        }
    }
    (out, map)
}

pub fn normalize(text: &str) -> String {
    normalize_with_map(text).0.into_iter().collect()
}

fn find_chars(hay: &[char], needle: &[char]) -> Option<usize> {
    if needle.is_empty() || needle.len() > hay.len() {
        return None;
    }
    hay.windows(needle.len()).position(|w| w == needle)
}

fn char_slice(text: &str, start: usize, end: usize) -> String {
    text.chars().skip(start).take(end - start).collect()
}

fn exact_match(turns: &[&Turn], quote: &str) -> Option<(usize, usize, usize)> {
    if quote.is_empty() {
        return None;
    }
    turns.iter().find_map(|t| {
        t.text.find(quote).map(|byte| {
            let start = t.text[..byte].chars().count();
            (t.turn_index, start, start + quote.chars().count())
        })
    })
}

fn normalized_match(turns: &[&Turn], quote: &str) -> Option<(usize, usize, usize)> {
    let needle = normalize_with_map(quote).0;
    if needle.is_empty() {
        return None;
    }
    turns.iter().find_map(|t| {
        let (hay, map) = normalize_with_map(&t.text);
        find_chars(&hay, &needle).map(|pos| (t.turn_index, map[pos], map[pos + needle.len() - 1] + 1))
    })
}

/// Anchors `quotes` in the patient turns of `turns`. Duplicate spans are
/// reported once.
pub fn anchor_quotes(session_id: &SessionId, turns: &[Turn], quotes: &[String]) -> (Vec<HighlightSpan>, usize) {
    let patient: Vec<&Turn> = turns.iter().filter(|t| t.speaker == Speaker::Patient).collect();
    let mut spans: Vec<HighlightSpan> = Vec::new();
    let mut dropped = 0;
    for quote in quotes {
        let q = quote.trim();
        let Some((turn_index, start, end)) = exact_match(&patient, q).or_else(|| normalized_match(&patient, q)) else {
            dropped += 1;
            continue;
        };
        if spans.iter().any(|s| s.turn_index == turn_index && s.char_start == start && s.char_end == end) {
            continue;
        }
        let text = &turns.iter().find(|t| t.turn_index == turn_index).expect("patient turn").text;
        spans.push(HighlightSpan {
            session_id: session_id.clone(),
            turn_index,
            char_start: start,
            char_end: end,
            quote: char_slice(text, start, end),
        });
    }
    spans.sort_by_key(|s| (s.turn_index, s.char_start, s.char_end));
    (spans, dropped)
}

pub fn build_report(session_id: &SessionId, turns: &[Turn], raw: &str) -> HighlightReport {
    let (spans, dropped_quotes) = anchor_quotes(session_id, turns, &parse_quotes(raw));
    HighlightReport { session_id: session_id.clone(), spans, dropped_quotes, raw_model_output: raw.to_owned() }
}
