//! Every (status, event) pair is compared against the documented session
//! lifecycle table, written out here independently.

use carelink_core::domain::SessionStatus;
use carelink_core::engine::transitions::{transition, Event, Refusal, Transition};

use crate::Verdict;

const STATUSES: [&str; 5] = ["active", "awaiting_confirmation", "paused", "completed", "aborted"];

/// Rows are events, columns follow `STATUSES`. `!pending` refuses because a
/// confirmation is outstanding, `!none` because none is, `!closed` because
/// the session is over.
const TABLE: &str = "
patient_utterance    active                 !pending               active                 !closed  !closed
loopback_candidate   awaiting_confirmation  awaiting_confirmation  awaiting_confirmation  !closed  !closed
affirmed             !none                  active                 !none                  !closed  !closed
rejected             !none                  active                 !none                  !closed  !closed
unclear              !none                  awaiting_confirmation  !none                  !closed  !closed
closing_reply        completed              completed              completed              !closed  !closed
timeout              active                 awaiting_confirmation  paused                 !closed  !closed
timeout_cap_reached  paused                 paused                 paused                 !closed  !closed
close_requested      completed              completed              completed              !closed  !closed
abort_requested      aborted                aborted                aborted                !closed  !closed
round_limit_exceeded aborted                aborted                aborted                !closed  !closed
";

fn status(name: &str) -> Result<SessionStatus, String> {
    serde_json::from_value(serde_json::Value::String(name.into())).map_err(|_| format!("unknown status `{name}`"))
}

fn expected(cell: &str) -> Result<Transition, String> {
    Ok(match cell {
        "!pending" => Transition::Refuse(Refusal::ConfirmationPending),
        "!none" => Transition::Refuse(Refusal::NothingPending),
        "!closed" => Transition::Refuse(Refusal::Closed),
        other => Transition::To(status(other)?),
    })
}

pub fn check() -> Verdict {
    let rows: Vec<Vec<&str>> = TABLE.lines().filter(|l| !l.trim().is_empty()).map(|l| l.split_whitespace().collect()).collect();
    ensure!(rows.len() == Event::ALL.len(), "table has {} rows for {} events", rows.len(), Event::ALL.len());
    ensure!(SessionStatus::ALL.len() == STATUSES.len(), "status set changed");

    let mut covered = 0;
    for row in &rows {
        ensure!(row.len() == 1 + STATUSES.len(), "malformed row {row:?}");
        let event: Event = serde_json::from_value(serde_json::Value::String(row[0].into()))
            .map_err(|_| format!("unknown event `{}`", row[0]))?;
        for (col, name) in STATUSES.iter().enumerate() {
            let want = expected(row[col + 1])?;
            let got = transition(status(name)?, event);
            ensure!(got == want, "({name}, {}) -> {got:?}, table says {want:?}", row[0]);
            covered += 1;
        }
    }
    // Every enumerated pair is defined by the table.
    for s in SessionStatus::ALL {
        for e in Event::ALL {
            let name = serde_json::to_value(s).unwrap();
            let event = serde_json::to_value(e).unwrap();
            ensure!(
                STATUSES.contains(&name.as_str().unwrap())
                    && rows.iter().any(|r| r[0] == event.as_str().unwrap()),
                "({name}, {event}) is not in the table"
            );
        }
    }
    Ok(format!("{covered} transitions match the table"))
}
