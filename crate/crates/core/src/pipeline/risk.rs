//! Risk-level parsing. Total: every input yields a level or a request for
//! human review.
//!
//! Resolution order: the token after a "risk level" label; otherwise the
//! output's first word; otherwise the only level word mentioned anywhere.
//! Anything else — no level word, or several different ones — goes to
//! human review.

use std::collections::BTreeSet;
use std::sync::LazyLock;

use regex::Regex;

use crate::domain::{RiskAssessment, RiskLevel, SessionId};

static LABELLED: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\brisk\s*level\s*[:=\-–—]?\s*\**\s*([a-z]+)").expect("valid regex"));
static REASONING: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?is)\breasoning\s*[:\-–—]\s*(.*)$").expect("valid regex"));
static WORD: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"[A-Za-z]+").expect("valid regex"));

fn level_word(word: &str) -> Option<RiskLevel> {
    word.parse().ok()
}

/// The level stated by `raw`, if it can be determined unambiguously, and
/// the byte offset just past the level token.
pub fn parse_level(raw: &str) -> Option<(RiskLevel, usize)> {
    if let Some(c) = LABELLED.captures(raw) {
        let m = c.get(1).expect("group");
        if let Some(level) = level_word(m.as_str()) {
            return Some((level, m.end()));
        }
    }
    if let Some(first) = WORD.find(raw.trim_start()) {
        let offset = raw.len() - raw.trim_start().len();
        if first.start() == 0 {
            if let Some(level) = level_word(first.as_str()) {
                return Some((level, offset + first.end()));
            }
        }
    }
    let found: Vec<(RiskLevel, usize)> =
        WORD.find_iter(raw).filter_map(|m| level_word(m.as_str()).map(|l| (l, m.end()))).collect();
    let distinct: BTreeSet<RiskLevel> = found.iter().map(|(l, _)| *l).collect();
    if distinct.len() == 1 {
        return found.first().copied();
    }
    None
}

pub fn parse_risk(session_id: &SessionId, raw: &str) -> RiskAssessment {
    let parsed = parse_level(raw);
    let reasoning = match REASONING.captures(raw) {
        Some(c) => c[1].trim().to_owned(),
        None => match parsed {
            Some((_, end)) => raw[end..]
                .trim_start_matches(|c: char| c.is_whitespace() || ".:;,-–—*".contains(c))
                .trim()
                .to_owned(),
            None => raw.trim().to_owned(),
        },
    };
    RiskAssessment {
        session_id: session_id.clone(),
        level: parsed.map(|(l, _)| l),
        reasoning,
        needs_human_review: parsed.is_none(),
        raw_model_output: raw.to_owned(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(raw: &str) -> RiskAssessment {
        parse_risk(&SessionId::new("s"), raw)
    }

    #[test]
    fn labelled_output() {
        let r = parse("Risk level: Moderate. Reasoning: fever with hypertension history.");
        assert_eq!(r.level, Some(RiskLevel::Moderate));
        assert_eq!(r.reasoning, "fever with hypertension history.");
        assert!(!r.needs_human_review);
    }

    #[test]
    fn leading_token() {
        let r = parse("LOW — routine post-surgery pain");
        assert_eq!(r.level, Some(RiskLevel::Low));
        assert_eq!(r.reasoning, "routine post-surgery pain");
    }

    #[test]
    fn unparseable_needs_review() {
        let r = parse("uncertain; please review");
        assert_eq!(r.level, None);
        assert!(r.needs_human_review);
        assert_eq!(r.raw_model_output, "uncertain; please review");
    }

    #[test]
    fn conflicting_levels_need_review() {
        assert!(parse("somewhere between low and high").needs_human_review);
        assert_eq!(parse("I would call this high.").level, Some(RiskLevel::High));
    }

    #[test]
    fn labels_any_case() {
        for level in RiskLevel::ALL {
            for form in [level.as_str().to_owned(), level.as_str().to_uppercase(), {
                let mut s = level.as_str().to_owned();
                s[..1].make_ascii_uppercase();
                s
            }] {
                assert_eq!(parse(&form).level, Some(level));
                assert_eq!(parse(&format!("Risk Level: {form}")).level, Some(level));
            }
        }
    }

    #[test]
    fn label_wins_over_other_mentions() {
        let r = parse("Not high, since pain is mild.\nRisk level: low\nReasoning: stable.");
        assert_eq!(r.level, Some(RiskLevel::Low));
        assert_eq!(r.reasoning, "stable.");
    }
}
