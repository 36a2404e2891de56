//! Generated rating conversations: a scalar slot may only be committed
//! right after the assistant restated the value and the patient affirmed
//! it. Negative answers never commit.

use std::sync::Arc;

use carelink_core::domain::{
    timestamp_from_millis, Initiator, Session, SessionId, SessionStatus, SlotValue, Speaker, TurnKind,
};
use carelink_core::{fixtures, ConversationEngine, EngineConfig, ManualClock, PromptEngine, SessionContext};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

use crate::{backend, Verdict};

pub const SESSIONS: usize = 1000;
const SLOT: &str = "pain_level";
const RATE: &str = "On a scale of 1 to 10, how would you rate your pain?";
const WORDS: [&str; 10] = ["one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten"];

const AFFIRM: [&str; 6] = ["Yes", "yes, that's correct.", "Correct.", "Yeah", "That's right", "OK"];
const NEGATE: [&str; 5] = ["No", "Nope, wrong.", "That isn't right", "no, incorrect", "Not really"];
const UNCLEAR: [&str; 4] = ["hmm", "banana", "what do you mean?", "I'm sorry?"];
const ANSWER: [&str; 5] = ["I'd say {}", "{}", "Probably {} today", "It's about {}.", "Maybe {}, I think"];

#[derive(Debug, Clone, Copy, PartialEq)]
enum Reply {
    Value(u8),
    Vague,
    Affirm,
    Negate,
    Correct(u8),
    Unclear,
}

fn spoken(rng: &mut StdRng, v: u8) -> String {
    if rng.gen_bool(0.5) {
        v.to_string()
    } else {
        let w = WORDS[v as usize - 1];
        match rng.gen_range(0..3) {
            0 => w.to_owned(),
            1 => w.to_uppercase(),
            _ => format!("{}{}", w[..1].to_uppercase(), &w[1..]),
        }
    }
}

fn say(rng: &mut StdRng, reply: Reply) -> String {
    match reply {
        Reply::Value(v) => ANSWER.choose(rng).unwrap().replace("{}", &spoken(rng, v)),
        Reply::Vague => "I'm not sure how to rate it".into(),
        Reply::Affirm => AFFIRM.choose(rng).unwrap().to_string(),
        Reply::Negate => NEGATE.choose(rng).unwrap().to_string(),
        Reply::Correct(v) => format!("No, I meant {}", spoken(rng, v)),
        Reply::Unclear => UNCLEAR.choose(rng).unwrap().to_string(),
    }
}

/// Expected state, tracked independently of the engine.
#[derive(Default)]
struct Model {
    pending: Option<u8>,
    reasked: bool,
    committed: Option<u8>,
}

impl Model {
    fn apply(&mut self, reply: Reply) {
        match (self.pending, reply) {
            (None, Reply::Value(v)) if self.committed.is_none() => {
                self.pending = Some(v);
                self.reasked = false;
            }
            (None, _) => {}
            (Some(v), Reply::Affirm) => {
                self.committed = Some(v);
                self.pending = None;
            }
            (Some(_), Reply::Unclear) if !self.reasked => self.reasked = true,
            (Some(v), Reply::Correct(w)) if w != v => {
                self.pending = Some(w);
                self.reasked = false;
            }
            (Some(_), _) => self.pending = None,
        }
    }
}

fn committed(s: &Session) -> Option<u8> {
    match s.collected_slots.get(SLOT) {
        Some(SlotValue::Scalar(v)) => Some(*v),
        _ => None,
    }
}

fn run_session(seed: u64, engine: &ConversationEngine) -> Result<(usize, usize), String> {
    let mut rng = StdRng::seed_from_u64(seed);
    let profile = fixtures::john();
    let protocol = fixtures::post_surgery_protocol();
    let ctx = SessionContext { profile: &profile, protocol: &protocol };
    let mut s = engine.start(ctx, SessionId::new(format!("lb-{seed}")), Initiator::Provider).map_err(|e| e.to_string())?;
    let mut model = Model::default();
    let mut negatives = 0;

    for step in 0..rng.gen_range(2..14) {
        let reply = match model.pending {
            None if rng.gen_bool(0.85) => Reply::Value(rng.gen_range(1..=10)),
            None => Reply::Vague,
            Some(v) => match rng.gen_range(0..10) {
                0..=3 => Reply::Affirm,
                4..=5 => Reply::Negate,
                6..=7 => Reply::Correct(if rng.gen_bool(0.2) { v } else { rng.gen_range(1..=10) }),
                _ => Reply::Unclear,
            },
        };
        let text = say(&mut rng, reply);
        let before = committed(&s);
        engine.patient_turn(ctx, &mut s, &text).map_err(|e| format!("seed {seed} step {step}: {e}"))?;
        model.apply(reply);
        let after = committed(&s);
        let last = s.turns.len() - 1;

        if matches!(reply, Reply::Negate | Reply::Correct(_)) {
            negatives += 1;
            ensure!(after == before, "seed {seed}: negative answer `{text}` committed {after:?}");
        }
        if after != before {
            // The committing turn must be an affirmation of a restatement.
            let response = &s.turns[last - 1];
            let request = &s.turns[last - 2];
            ensure!(
                response.speaker == Speaker::Patient && response.kind == TurnKind::LoopbackConfirmResponse,
                "seed {seed}: commit not triggered by a confirmation answer"
            );
            ensure!(matches!(reply, Reply::Affirm), "seed {seed}: `{text}` committed {after:?}");
            ensure!(
                request.kind == TurnKind::LoopbackConfirmRequest
                    && request.text.contains(&after.unwrap().to_string()),
                "seed {seed}: committed {after:?} without restating it"
            );
        }
        ensure!(after == model.committed, "seed {seed} step {step}: committed {after:?}, expected {:?}", model.committed);
        let awaiting = s.status == SessionStatus::AwaitingConfirmation;
        ensure!(
            awaiting == model.pending.is_some(),
            "seed {seed} step {step}: status {:?}, expected pending {:?}",
            s.status,
            model.pending
        );
        if let Some(v) = model.pending {
            let t = &s.turns[last];
            ensure!(
                t.kind == TurnKind::LoopbackConfirmRequest && t.text.contains(&v.to_string()),
                "seed {seed}: pending {v} but last turn is {:?} `{}`",
                t.kind,
                t.text
            );
        }
    }

    // Whole-transcript audit: every commit point is request, then affirmation.
    if let Some(v) = committed(&s) {
        let ok = s.turns.windows(2).any(|w| {
            w[0].kind == TurnKind::LoopbackConfirmRequest
                && w[0].text.contains(&v.to_string())
                && w[1].kind == TurnKind::LoopbackConfirmResponse
                && AFFIRM.contains(&w[1].text.as_str())
        });
        ensure!(ok, "seed {seed}: {v} committed without a request/affirmation pair");
    }
    Ok((usize::from(committed(&s).is_some()), negatives))
}

pub fn check() -> Verdict {
    let engine = ConversationEngine::new(
        Arc::new(PromptEngine::default()),
        backend(|req| {
            // Loopback requests get a reply that sometimes omits the value,
            // so the engine's fallback wording is exercised too.
            let confirm = req.messages.last().is_some_and(|m| m.content.contains("confirm"));
            Ok(match (confirm, req.context.round.unwrap_or(1) % 3) {
                (true, 0) => "Sorry, could you confirm that?".into(),
                (true, _) => "Just to be sure, is that right?".into(),
                (false, _) => RATE.into(),
            })
        }),
        Default::default(),
        EngineConfig { max_rounds: 100, ..Default::default() },
        Arc::new(ManualClock::new(timestamp_from_millis(0))),
    )
    .map_err(|e| e.to_string())?;
    let (mut commits, mut negatives) = (0, 0);
    for seed in 0..SESSIONS as u64 {
        let (c, n) = run_session(seed, &engine)?;
        commits += c;
        negatives += n;
    }
    ensure!(commits > 0 && negatives > 0, "generator never committed or never rejected");
    Ok(format!("{SESSIONS} sessions, {commits} commits, {negatives} negative answers, 0 violations"))
}
