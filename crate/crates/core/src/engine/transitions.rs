//! Session lifecycle table. Every (status, event) pair has an entry.
//!
//! | event \ status          | active       | awaiting_confirmation | paused       | completed | aborted |
//! |-------------------------|--------------|-----------------------|--------------|-----------|---------|
//! | patient_utterance       | active       | refuse: pending       | active       | closed    | closed  |
//! | loopback_candidate      | awaiting     | awaiting              | awaiting     | closed    | closed  |
//! | affirmed                | refuse: none | active                | refuse: none | closed    | closed  |
//! | rejected                | refuse: none | active                | refuse: none | closed    | closed  |
//! | unclear                 | refuse: none | awaiting              | refuse: none | closed    | closed  |
//! | closing_reply           | completed    | completed             | completed    | closed    | closed  |
//! | timeout                 | active       | awaiting              | paused       | closed    | closed  |
//! | timeout_cap_reached     | paused       | paused                | paused       | closed    | closed  |
//! | close_requested         | completed    | completed             | completed    | closed    | closed  |
//! | abort_requested         | aborted      | aborted               | aborted      | closed    | closed  |
//! | round_limit_exceeded    | aborted      | aborted               | aborted      | closed    | closed  |

use serde::{Deserialize, Serialize};

use crate::domain::SessionStatus;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Event {
    /// A patient turn answered with an ordinary reply.
    PatientUtterance,
    /// A patient turn whose value is looped back for confirmation.
    LoopbackCandidate,
    Affirmed,
    Rejected,
    Unclear,
    ClosingReply,
    Timeout,
    TimeoutCapReached,
    CloseRequested,
    AbortRequested,
    RoundLimitExceeded,
}

impl Event {
    pub const ALL: [Event; 11] = [
        Event::PatientUtterance,
        Event::LoopbackCandidate,
        Event::Affirmed,
        Event::Rejected,
        Event::Unclear,
        Event::ClosingReply,
        Event::Timeout,
        Event::TimeoutCapReached,
        Event::CloseRequested,
        Event::AbortRequested,
        Event::RoundLimitExceeded,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Refusal {
    /// The session is completed or aborted.
    Closed,
    /// A confirmation is pending; input must go through loopback resolution.
    ConfirmationPending,
    /// A confirmation answer arrived but nothing is pending.
    NothingPending,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transition {
    To(SessionStatus),
    Refuse(Refusal),
}

pub fn transition(status: SessionStatus, event: Event) -> Transition {
    use Event as E;
    use SessionStatus as S;
    use Transition::{Refuse, To};

    match status {
        S::Completed | S::Aborted => Refuse(Refusal::Closed),
        S::Active => match event {
            E::PatientUtterance | E::Timeout => To(S::Active),
            E::LoopbackCandidate => To(S::AwaitingConfirmation),
            E::Affirmed | E::Rejected | E::Unclear => Refuse(Refusal::NothingPending),
            E::ClosingReply | E::CloseRequested => To(S::Completed),
            E::TimeoutCapReached => To(S::Paused),
            E::AbortRequested | E::RoundLimitExceeded => To(S::Aborted),
        },
        S::AwaitingConfirmation => match event {
            E::PatientUtterance => Refuse(Refusal::ConfirmationPending),
            E::LoopbackCandidate | E::Unclear | E::Timeout => To(S::AwaitingConfirmation),
            E::Affirmed | E::Rejected => To(S::Active),
            E::ClosingReply | E::CloseRequested => To(S::Completed),
            E::TimeoutCapReached => To(S::Paused),
            E::AbortRequested | E::RoundLimitExceeded => To(S::Aborted),
        },
        S::Paused => match event {
            E::PatientUtterance => To(S::Active),
            E::LoopbackCandidate => To(S::AwaitingConfirmation),
            E::Affirmed | E::Rejected | E::Unclear => Refuse(Refusal::NothingPending),
            E::ClosingReply | E::CloseRequested => To(S::Completed),
            E::Timeout | E::TimeoutCapReached => To(S::Paused),
            E::AbortRequested | E::RoundLimitExceeded => To(S::Aborted),
        },
    }
}
