//! Risk parsing is total: any model output yields exactly one level or a
//! request for human review, and the three labels parse in any case.

use carelink_core::domain::{RiskLevel, SessionId};
use carelink_core::pipeline::parse_risk;
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

use crate::Verdict;

pub const CASES: usize = 5000;

const LEVELS: [(&str, RiskLevel); 3] = [("low", RiskLevel::Low), ("moderate", RiskLevel::Moderate), ("high", RiskLevel::High)];

const FRAGMENTS: [&str; 22] = [
    "Risk level:", "risk", "level", "Reasoning:", "the patient", "reports", "fever", "LOW", "Moderate", "hIgH",
    "lowish", "highly", "moderately", "**", "\n", ":", "—", "🙂", "é", "", "=", "none",
];

fn random_case(rng: &mut StdRng, word: &str) -> String {
    word.chars().map(|c| if rng.gen_bool(0.5) { c.to_ascii_uppercase() } else { c }).collect()
}

fn garbage(rng: &mut StdRng) -> String {
    let mut out = String::new();
    for _ in 0..rng.gen_range(0..12) {
        if rng.gen_bool(0.1) {
            // Arbitrary chars, including control and multibyte ones.
            out.extend((0..rng.gen_range(1..6)).map(|_| char::from_u32(rng.gen_range(0..0x2000)).unwrap_or('?')));
        } else {
            out.push_str(FRAGMENTS.choose(rng).unwrap());
        }
        out.push(' ');
    }
    out
}

/// Level words as whole alphabetic tokens, case-insensitive.
fn level_words(text: &str) -> Vec<RiskLevel> {
    text.split(|c: char| !c.is_ascii_alphabetic())
        .filter_map(|w| LEVELS.iter().find(|(name, _)| name.eq_ignore_ascii_case(w)).map(|(_, l)| *l))
        .collect()
}

pub fn check() -> Verdict {
    let id = SessionId::new("risk");
    let mut rng = StdRng::seed_from_u64(0x5eed_0006);
    let (mut levels, mut reviews) = (0, 0);

    for case in 0..CASES {
        let raw = garbage(&mut rng);
        let r = parse_risk(&id, &raw);
        ensure!(r.level.is_some() != r.needs_human_review, "case {case}: {raw:?} gave {:?}/{}", r.level, r.needs_human_review);
        ensure!(r.raw_model_output == raw, "case {case}: raw output not kept verbatim");
        let words = level_words(&raw);
        if words.is_empty() {
            ensure!(r.needs_human_review, "case {case}: {raw:?} has no level word but parsed {:?}", r.level);
        }
        if let Some(level) = r.level {
            ensure!(words.contains(&level), "case {case}: {level:?} not mentioned in {raw:?}");
            levels += 1;
        } else {
            reviews += 1;
        }
    }

    for case in 0..CASES {
        let (name, level) = *LEVELS.choose(&mut rng).unwrap();
        let label = random_case(&mut rng, name);
        let noise = garbage(&mut rng).replace(|c: char| c.is_ascii_alphabetic(), "x");
        let raw = match rng.gen_range(0..4) {
            0 => format!("Risk level: {label}\nReasoning: {noise}"),
            1 => format!("{}RISK LEVEL = **{label}**. {noise}", random_case(&mut rng, "overall ")),
            2 => label.clone(),
            _ => format!("{label}. {noise}"),
        };
        let r = parse_risk(&id, &raw);
        ensure!(r.level == Some(level), "labelled case {case}: {raw:?} gave {:?}", r.level);
        ensure!(!r.needs_human_review, "labelled case {case}: flagged for review");
    }

    let conflicting = parse_risk(&id, "It could be low or it could be high.");
    ensure!(conflicting.needs_human_review && conflicting.level.is_none(), "conflicting levels were not flagged");
    Ok(format!("{CASES} fuzzed ({levels} levels, {reviews} reviews) + {CASES} labelled, 0 failures"))
}
