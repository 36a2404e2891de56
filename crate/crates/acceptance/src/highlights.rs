//! Fuzzed transcripts and quote lists go through the full pipeline; the
//! resulting spans must equal a brute-force search over patient turns.
//!
//! Brute-force rule: a quote (trimmed) first matches exactly at the earliest
//! patient turn and char offset. Otherwise every char range that starts and
//! ends on an alphanumeric char is compared after normalization (lowercase,
//! only alphanumerics and single spaces) and the earliest turn, then
//! earliest start, wins. Unplaced quotes are dropped; repeated spans are
//! reported once.

use std::collections::BTreeSet;
use std::sync::Arc;

use carelink_core::domain::{timestamp_from_millis, Initiator, Session, SessionId, SessionStatus, Speaker, TurnKind};
use carelink_core::gateway::Purpose;
use carelink_core::pipeline::NullSink;
use carelink_core::{fixtures, Analyzer, InfoStore, ManualClock, Pipeline, PromptEngine};
use answer::Shared;
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

use crate::{backend, Verdict};

pub const CASES: usize = 500;

// Lowercasing each of these yields exactly one char.
const PIECES: [&str; 22] = [
    "I", "have", "a", "little", "pain", "PAIN", "Pain,", "my", "knee", "é", "Éa", "—", "...", "'", "  ", "\t", "7",
    "héllo", "ß", "!", "é!", "x",
];

fn text(rng: &mut StdRng, max: usize) -> String {
    let n = rng.gen_range(0..=max);
    let mut out = String::new();
    for _ in 0..n {
        out.push_str(PIECES.choose(rng).unwrap());
        if rng.gen_bool(0.6) {
            out.push(' ');
        }
    }
    out
}

fn chars(s: &str) -> Vec<char> {
    s.chars().collect()
}

fn oracle_normalize(cs: &[char]) -> String {
    let mut words: Vec<String> = Vec::new();
    let mut current = String::new();
    for c in cs {
        if c.is_whitespace() {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
        } else if c.is_alphanumeric() {
            current.extend(c.to_lowercase());
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    words.join(" ")
}

type Span = (usize, usize, usize, String);

fn brute_force(turns: &[(usize, String)], quote: &str) -> Option<Span> {
    let q = quote.trim();
    let qc = chars(q);
    if !qc.is_empty() {
        for (idx, t) in turns {
            let tc = chars(t);
            for start in 0..tc.len() {
                if tc[start..].starts_with(&qc) {
                    return Some((*idx, start, start + qc.len(), q.to_owned()));
                }
            }
        }
    }
    let nq = oracle_normalize(&qc);
    if nq.is_empty() {
        return None;
    }
    for (idx, t) in turns {
        let tc = chars(t);
        for start in 0..tc.len() {
            if !tc[start].is_alphanumeric() {
                continue;
            }
            for end in start + 1..=tc.len() {
                if tc[end - 1].is_alphanumeric() && oracle_normalize(&tc[start..end]) == nq {
                    return Some((*idx, start, end, tc[start..end].iter().collect()));
                }
            }
        }
    }
    None
}

fn quote_for(rng: &mut StdRng, session: &Session) -> String {
    let patient: Vec<&str> = session.turns.iter().filter(|t| t.speaker == Speaker::Patient).map(|t| t.text.as_str()).collect();
    let any: Vec<&str> = session.turns.iter().map(|t| t.text.as_str()).collect();
    let slice = |rng: &mut StdRng, s: &str| {
        let c = chars(s);
        if c.is_empty() {
            return String::new();
        }
        let a = rng.gen_range(0..c.len());
        let b = rng.gen_range(a..=c.len());
        c[a..b].iter().collect::<String>()
    };
    let from_patient = patient.choose(rng).unwrap().to_string();
    let from_any = any.choose(rng).unwrap().to_string();
    match rng.gen_range(0..7) {
        0 | 1 => slice(rng, &from_patient),
        2 => {
            // Drifted: case and punctuation changed.
            let s = slice(rng, &from_patient);
            let mut out = String::new();
            for c in s.chars() {
                let c = if rng.gen_bool(0.3) { c.to_uppercase().next().unwrap() } else { c };
                if c.is_alphanumeric() || c.is_whitespace() || rng.gen_bool(0.5) {
                    out.push(c);
                }
            }
            if rng.gen_bool(0.3) {
                out.push('.');
            }
            out
        }
        3 => slice(rng, &from_any),
        4 => text(rng, 4),
        5 => ["", "   ", "!!", "zzz", "\"quoted\""].choose(rng).unwrap().to_string(),
        _ => format!(" {} ", slice(rng, &from_patient)),
    }
}

fn session(rng: &mut StdRng, case: usize) -> Session {
    let at = timestamp_from_millis(0);
    let mut s = Session::new(
        SessionId::new(format!("hl-{case}")),
        "patient-john".into(),
        "post-surgery".into(),
        Initiator::Provider,
        at,
    );
    for i in 0..rng.gen_range(1..8) {
        let speaker = if i % 2 == 0 { Speaker::Assistant } else { Speaker::Patient };
        let mut t = text(rng, 14);
        if t.trim().is_empty() {
            t.push('x');
        }
        s.push_turn(speaker, TurnKind::Normal, t, at);
    }
    if !s.turns.iter().any(|t| t.speaker == Speaker::Patient) {
        s.push_turn(Speaker::Patient, TurnKind::Normal, text(rng, 6) + "pain", at);
    }
    s.status = SessionStatus::Completed;
    s.closed_at = Some(at);
    s
}

pub fn check() -> Verdict {
    let store = Arc::new(InfoStore::in_memory());
    store.put_patient(&fixtures::john()).map_err(|e| e.to_string())?;
    store.put_protocol(&fixtures::post_surgery_protocol()).map_err(|e| e.to_string())?;
    let answer = Shared::default();
    let reply = answer.clone();
    let pipeline = Pipeline::new(
        Analyzer::new(
            Arc::new(PromptEngine::default()),
            backend(move |req| {
                Ok(match req.context.purpose {
                    Purpose::Highlight => reply.get(),
                    Purpose::Risk => "Risk level: low".into(),
                    _ => "Chief concern: none".into(),
                })
            }),
            Default::default(),
        ),
        store.clone(),
        Arc::new(ManualClock::new(timestamp_from_millis(0))),
        Arc::new(NullSink),
    );

    let mut rng = StdRng::seed_from_u64(0x5eed_0005);
    let (mut anchored, mut dropped_total) = (0, 0);
    for case in 0..CASES {
        let s = session(&mut rng, case);
        let quotes: Vec<String> = (0..rng.gen_range(0..8)).map(|_| quote_for(&mut rng, &s)).collect();
        answer.set(serde_json::to_string(&quotes).unwrap());
        store.insert_session(&s).map_err(|e| e.to_string())?;
        let report = pipeline.process_session(&s.session_id, false).map_err(|e| format!("case {case}: {e}"))?;
        let got = report.highlights.ok_or_else(|| format!("case {case}: no highlights"))?.artifact;

        let patient: Vec<(usize, String)> =
            s.turns.iter().filter(|t| t.speaker == Speaker::Patient).map(|t| (t.turn_index, t.text.clone())).collect();
        let mut want: BTreeSet<Span> = BTreeSet::new();
        let mut dropped = 0;
        for q in &quotes {
            match brute_force(&patient, q) {
                Some(span) => {
                    want.insert(span);
                }
                None => dropped += 1,
            }
        }
        let got_set: BTreeSet<Span> =
            got.spans.iter().map(|sp| (sp.turn_index, sp.char_start, sp.char_end, sp.quote.clone())).collect();
        ensure!(got_set.len() == got.spans.len(), "case {case}: duplicate spans reported");
        ensure!(got_set == want, "case {case}: quotes {quotes:?}\n got {got_set:?}\nwant {want:?}");
        ensure!(got.dropped_quotes == dropped, "case {case}: dropped {} but oracle says {dropped}", got.dropped_quotes);
        anchored += want.len();
        dropped_total += dropped;
    }
    Ok(format!("{CASES} cases, {anchored} spans, {dropped_total} dropped, 0 mismatches"))
}

/// The highlight answer for the current case, swapped between runs.
mod answer {
    use std::sync::{Arc, Mutex};

    #[derive(Clone, Default)]
    pub struct Shared(Arc<Mutex<String>>);

    impl Shared {
        pub fn get(&self) -> String {
            self.0.lock().unwrap().clone()
        }

        pub fn set(&self, value: String) {
            *self.0.lock().unwrap() = value;
        }
    }
}
