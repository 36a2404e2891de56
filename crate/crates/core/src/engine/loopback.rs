//! Value extraction and confirmation classification for content loopback.

use std::collections::BTreeSet;
use std::sync::LazyLock;

use regex::Regex;

use crate::domain::{ConversationProtocol, KeySlot, SlotValue, ValueKind};

pub const NUMBER_WORDS: [&str; 10] = ["one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten"];

static NEGATIVE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\b(no|not|nope|nah|wrong|incorrect)\b|n['’]t\b").unwrap());
static AFFIRMATIVE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"\b(yes|yeah|yep|yup|correct|right|exactly|sure|ok|okay|affirmative)\b").unwrap()
});
static RATING_CUE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"\b(scale|rate|rating|score)\b|\b(1|one) to (10|ten)\b|out of (10|ten)\b").unwrap()
});
/// Scale restatements that would otherwise look like answers.
static SCALE_PHRASES: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"\b(from\s+)?(1|one)\s*(to|-)\s*(10|ten)\b|(out of|/)\s*(10|ten)\b").unwrap()
});

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Confirmation {
    Affirmed,
    Rejected,
    Unclear,
}

/// Fixed-lexicon classification; a negative word anywhere wins.
pub fn classify_confirmation(answer: &str) -> Confirmation {
    let lower = answer.to_lowercase();
    if NEGATIVE.is_match(&lower) {
        Confirmation::Rejected
    } else if AFFIRMATIVE.is_match(&lower) {
        Confirmation::Affirmed
    } else {
        Confirmation::Unclear
    }
}

fn tokens(text: &str) -> impl Iterator<Item = &str> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty())
}

fn token_value(token: &str) -> Option<u8> {
    if token.bytes().all(|b| b.is_ascii_digit()) {
        return token.parse::<u8>().ok().filter(|v| (1..=10).contains(v));
    }
    NUMBER_WORDS.iter().position(|w| *w == token).map(|i| i as u8 + 1)
}

/// The single 1-10 value stated in `answer`, as digits or a number word.
/// Returns `None` when no value or several different values appear.
pub fn extract_scalar(answer: &str) -> Option<u8> {
    let lower = answer.to_lowercase();
    let cleaned = SCALE_PHRASES.replace_all(&lower, " ");
    let values: BTreeSet<u8> = tokens(&cleaned).filter_map(token_value).collect();
    if values.len() == 1 {
        values.into_iter().next()
    } else {
        None
    }
}

/// Whether `text` states `value` as a digit token or number word.
pub fn value_mentioned(text: &str, value: u8) -> bool {
    let lower = text.to_lowercase();
    let found = tokens(&lower).any(|t| token_value(t) == Some(value));
    found
}

pub fn mentions_slot_value(text: &str, value: &SlotValue) -> bool {
    match value {
        SlotValue::Scalar(v) => value_mentioned(text, *v),
        SlotValue::YesNo(_) => true,
        SlotValue::Text(t) => text.to_lowercase().contains(&t.to_lowercase()),
    }
}

pub fn is_rating_question(question: &str) -> bool {
    RATING_CUE.is_match(&question.to_lowercase())
}

const GENERIC_SLOT_WORDS: [&str; 7] = ["level", "score", "rating", "value", "scale", "the", "of"];

fn slot_keywords(slot: &KeySlot) -> Vec<String> {
    slot.slot_name
        .to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| w.len() >= 3 && !GENERIC_SLOT_WORDS.contains(w))
        .map(str::to_owned)
        .collect()
}

fn question_mentions(question: &str, slot: &KeySlot) -> bool {
    let lower = question.to_lowercase();
    let words: Vec<&str> = tokens(&lower).collect();
    slot_keywords(slot)
        .iter()
        .any(|k| words.iter().any(|w| w.starts_with(k.as_str())))
}

/// The slot the assistant's question is asking about, among slots whose
/// kind is in `kinds` and which are not in `exclude`.
pub fn active_slot<'p>(
    protocol: &'p ConversationProtocol,
    kinds: &BTreeSet<ValueKind>,
    exclude: &dyn Fn(&str) -> bool,
    question: &str,
) -> Option<&'p KeySlot> {
    let candidates: Vec<&KeySlot> = protocol
        .key_information
        .iter()
        .filter(|s| kinds.contains(&s.value_kind) && !exclude(&s.slot_name))
        .collect();
    let rating = is_rating_question(question);
    let eligible = |s: &&KeySlot| match s.value_kind {
        ValueKind::Scalar1To10 => rating,
        ValueKind::YesNo => true,
        ValueKind::FreeText => false,
    };
    if let Some(slot) = candidates.iter().copied().filter(eligible).find(|s| question_mentions(question, s)) {
        return Some(slot);
    }
    let scalars: Vec<&&KeySlot> = candidates
        .iter()
        .filter(|s| s.value_kind == ValueKind::Scalar1To10)
        .collect();
    if rating && scalars.len() == 1 && protocol
        .key_information
        .iter()
        .filter(|s| s.value_kind == ValueKind::Scalar1To10)
        .count()
        == 1
    {
        return Some(scalars[0]);
    }
    None
}

pub fn extract_for(kind: ValueKind, answer: &str) -> Option<SlotValue> {
    match kind {
        ValueKind::Scalar1To10 => extract_scalar(answer).map(SlotValue::Scalar),
        ValueKind::YesNo => match classify_confirmation(answer) {
            Confirmation::Affirmed => Some(SlotValue::YesNo(true)),
            Confirmation::Rejected => Some(SlotValue::YesNo(false)),
            Confirmation::Unclear => None,
        },
        ValueKind::FreeText => None,
    }
}

/// Finds a value in `answer` that must be looped back before it is stored.
pub fn detect_loopback(
    protocol: &ConversationProtocol,
    kinds: &BTreeSet<ValueKind>,
    question: &str,
    answer: &str,
) -> Option<(String, SlotValue)> {
    detect_loopback_excluding(protocol, kinds, &|_| false, question, answer)
}

pub fn detect_loopback_excluding(
    protocol: &ConversationProtocol,
    kinds: &BTreeSet<ValueKind>,
    exclude: &dyn Fn(&str) -> bool,
    question: &str,
    answer: &str,
) -> Option<(String, SlotValue)> {
    let slot = active_slot(protocol, kinds, exclude, question)?;
    extract_for(slot.value_kind, answer).map(|v| (slot.slot_name.clone(), v))
}
