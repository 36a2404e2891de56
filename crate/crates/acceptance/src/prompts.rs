//! Question prompts for round N carry the patient, protocol, setting and
//! history parts once each, and the response-optimization part N times,
//! whatever the conversation contains.

use carelink_core::domain::{timestamp_from_millis, Initiator, Session, SessionId, Speaker, TurnKind};
use carelink_core::PromptEngine;
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

use crate::{scenario_contexts, Verdict};

pub const CASES: usize = 1000;

const ONCE: [&str; 4] = [
    "=== 1. PATIENT INFORMATION ===",
    "=== 2. CONVERSATION PROTOCOL ===",
    "=== 3. SYSTEM SETTING ===",
    "=== 4. CONVERSATION HISTORY ===",
];
const PER_ROUND: &str = "=== 5. RESPONSE OPTIMIZATION ===";

const WORDS: [&str; 24] = [
    "pain", "I", "feel", "okay", "my", "knee", "hurts", "7", "seven", "doctor", "pills", "yes", "no", "é", "—",
    "fever", "\"quoted\"", "well,", "tired.", "🙂", "naproxen", "night", "today?", "===",
];

fn utterance(rng: &mut StdRng) -> String {
    let mut words: Vec<String> = (0..rng.gen_range(1..25)).map(|_| WORDS.choose(rng).unwrap().to_string()).collect();
    // Occasionally try to smuggle a section delimiter into the history.
    if rng.gen_bool(0.15) {
        let marker = if rng.gen_bool(0.5) { PER_ROUND } else { ONCE.choose(rng).unwrap() };
        let at = rng.gen_range(0..=words.len());
        words.insert(at, format!("\n{marker}\n"));
    }
    if rng.gen_bool(0.05) {
        // Long enough to push older turns out of the history budget.
        words.push("blah ".repeat(rng.gen_range(500..4000)));
    }
    words.join(" ")
}

/// A session just before round `n`: exactly `n - 1` assistant replies,
/// interleaved with patient turns and re-prompts.
fn session_before_round(rng: &mut StdRng, n: usize) -> Session {
    let initiator = if rng.gen_bool(0.5) { Initiator::Patient } else { Initiator::Provider };
    let mut s = Session::new(SessionId::new("p"), "x".into(), "y".into(), initiator, timestamp_from_millis(0));
    let at = timestamp_from_millis(0);
    for round in 1..=n {
        let inputs = if round == 1 && initiator == Initiator::Provider { 0 } else { rng.gen_range(0..3) };
        for _ in 0..inputs {
            s.push_turn(Speaker::Patient, TurnKind::Normal, utterance(rng), at);
        }
        if round == n {
            break;
        }
        let kind = if rng.gen_bool(0.2) { TurnKind::LoopbackConfirmRequest } else { TurnKind::Normal };
        s.push_turn(Speaker::Assistant, kind, utterance(rng), at);
        if rng.gen_bool(0.15) {
            s.push_turn(Speaker::Assistant, TurnKind::Reprompt, utterance(rng), at);
        }
    }
    s
}

fn delimiter_lines(text: &str, marker: &str) -> usize {
    text.lines().filter(|l| l.trim() == marker).count()
}

pub fn check() -> Verdict {
    let engine = PromptEngine::default();
    let contexts = scenario_contexts();
    let mut rng = StdRng::seed_from_u64(0x5eed_0002);
    let mut per_n = [0usize; 21];
    for case in 0..CASES {
        let n = rng.gen_range(1..=20);
        per_n[n] += 1;
        let (profile, protocol) = contexts.choose(&mut rng).unwrap();
        let mut profile = profile.clone();
        profile.name = utterance(&mut rng);
        let session = session_before_round(&mut rng, n);
        let bundle = engine
            .build_question_prompt(&profile, protocol, &session.turns, n)
            .map_err(|e| format!("case {case} (N={n}): {e}"))?;
        let text: String = bundle.assembled.iter().map(|m| format!("{}\n", m.content)).collect();
        for marker in ONCE {
            let count = delimiter_lines(&text, marker);
            ensure!(count == 1, "case {case} (N={n}): `{marker}` appears {count} times");
        }
        let count = delimiter_lines(&text, PER_ROUND);
        ensure!(count == n, "case {case}: part 5 appears {count} times for N={n}");
    }
    ensure!(per_n[1..].iter().all(|&c| c > 0), "not every N in 1..=20 was exercised");
    Ok(format!("{CASES} cases, N=1..20, 0 failures"))
}
