//! Provider-side processing of completed sessions: clinical summary,
//! highlighted patient quotes and a risk level.

pub mod highlight;
pub mod risk;
pub mod summary;

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Clock;
use crate::domain::{
    ms_time, ClinicalSummary, ConversationProtocol, HighlightReport, PatientProfile, RiskAssessment, RiskLevel,
    Session, SessionId, SessionStatus, Timestamp,
};
use crate::gateway::{CompletionBackend, CompletionRequest, GatewayError, GenerationSettings, Purpose, RequestContext};
use crate::prompt::{PromptBundle, PromptEngine, PromptError};
use crate::store::{InfoStore, ProcessingRecord, Stage, StageState, StoreError, Versioned};

pub use highlight::{anchor_quotes, normalize, parse_quotes};
pub use risk::parse_risk;
pub use summary::parse_summary;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0} not found")]
    NotFound(String),
    #[error("session is {0}; only completed sessions are processed")]
    NotCompleted(&'static str),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Store(StoreError),
}

impl From<StoreError> for PipelineError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound { collection, key } => PipelineError::NotFound(format!("{collection} `{key}`")),
            other => PipelineError::Store(other),
        }
    }
}

/// Emitted once per session when all three artifacts exist.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Notification {
    pub session_id: SessionId,
    pub patient_id: crate::domain::PatientId,
    pub risk_level: Option<RiskLevel>,
    pub needs_human_review: bool,
    #[serde(with = "ms_time")]
    pub at: Timestamp,
}

pub trait NotificationSink: Send + Sync {
    fn notify(&self, notification: &Notification);
}

#[derive(Debug, Default)]
pub struct NullSink;

impl NotificationSink for NullSink {
    fn notify(&self, _: &Notification) {}
}

/// Keeps every notification; useful in tests and the CLI.
#[derive(Debug, Default)]
pub struct CollectingSink {
    seen: Mutex<Vec<Notification>>,
}

impl CollectingSink {
    pub fn notifications(&self) -> Vec<Notification> {
        self.seen.lock().clone()
    }
}

impl NotificationSink for CollectingSink {
    fn notify(&self, notification: &Notification) {
        self.seen.lock().push(notification.clone());
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessingReport {
    pub session_id: SessionId,
    pub summary: Option<Versioned<ClinicalSummary>>,
    pub highlights: Option<Versioned<HighlightReport>>,
    pub risk: Option<Versioned<RiskAssessment>>,
    /// Stages that failed in this run, with the error text.
    pub failures: BTreeMap<Stage, String>,
    /// Whether this run emitted the provider notification.
    pub notified: bool,
}

fn request(bundle: &PromptBundle, settings: &GenerationSettings, purpose: Purpose) -> CompletionRequest {
    CompletionRequest::from_bundle(
        bundle,
        settings,
        RequestContext { purpose, round: None, last_patient_utterance: None },
    )
}

fn require_completed(session: &Session) -> Result<(), PipelineError> {
    if session.status != SessionStatus::Completed {
        return Err(PipelineError::NotCompleted(session.status.as_str()));
    }
    Ok(())
}

/// Stateless stage runners over a prompt engine and a backend.
pub struct Analyzer {
    prompts: Arc<PromptEngine>,
    backend: Arc<dyn CompletionBackend>,
    settings: GenerationSettings,
}

impl Analyzer {
    pub fn new(prompts: Arc<PromptEngine>, backend: Arc<dyn CompletionBackend>, settings: GenerationSettings) -> Self {
        Self { prompts, backend, settings }
    }

    pub fn summarize_session(
        &self,
        profile: &PatientProfile,
        protocol: &ConversationProtocol,
        session: &Session,
    ) -> Result<ClinicalSummary, PipelineError> {
        require_completed(session)?;
        let bundle = self.prompts.build_summary_prompt(profile, protocol, session)?;
        let raw = self.backend.complete(&request(&bundle, &self.settings, Purpose::Summary))?;
        Ok(parse_summary(&session.session_id, &raw))
    }

    pub fn extract_highlights(
        &self,
        profile: &PatientProfile,
        protocol: &ConversationProtocol,
        session: &Session,
    ) -> Result<HighlightReport, PipelineError> {
        require_completed(session)?;
        let bundle = self.prompts.build_highlight_prompt(profile, protocol, session)?;
        let raw = self.backend.complete(&request(&bundle, &self.settings, Purpose::Highlight))?;
        Ok(highlight::build_report(&session.session_id, &session.turns, &raw))
    }

    pub fn assess_risk(
        &self,
        profile: &PatientProfile,
        protocol: &ConversationProtocol,
        session: &Session,
    ) -> Result<RiskAssessment, PipelineError> {
        require_completed(session)?;
        let bundle = self.prompts.build_risk_prompt(profile, protocol, session)?;
        let raw = self.backend.complete(&request(&bundle, &self.settings, Purpose::Risk))?;
        Ok(parse_risk(&session.session_id, &raw))
    }
}

enum StageOutput {
    Summary(ClinicalSummary),
    Highlights(HighlightReport),
    Risk(RiskAssessment),
}

/// Runs the analyzer against stored sessions and persists the results.
pub struct Pipeline {
    analyzer: Analyzer,
    store: Arc<InfoStore>,
    clock: Arc<dyn Clock>,
    sink: Arc<dyn NotificationSink>,
    locks: Mutex<HashMap<SessionId, Arc<Mutex<()>>>>,
}

impl Pipeline {
    pub fn new(
        analyzer: Analyzer,
        store: Arc<InfoStore>,
        clock: Arc<dyn Clock>,
        sink: Arc<dyn NotificationSink>,
    ) -> Self {
        Self { analyzer, store, clock, sink, locks: Mutex::new(HashMap::new()) }
    }

    pub fn analyzer(&self) -> &Analyzer {
        &self.analyzer
    }

    /// Produces any missing (or, with `force`, all) artifacts for a
    /// completed session. The three stages run in parallel; a failed stage
    /// is recorded and the others are still persisted. The provider
    /// notification fires once, the first time all three exist.
    pub fn process_session(&self, session_id: &SessionId, force: bool) -> Result<ProcessingReport, PipelineError> {
        let lock = self.locks.lock().entry(session_id.clone()).or_default().clone();
        let _guard = lock.lock();

        let session = self.store.get_session(session_id)?;
        require_completed(&session)?;
        let profile = self.store.get_patient(&session.patient_id)?;
        let protocol = self.store.get_protocol(&session.protocol_id)?;
        let mut record = self.store.get_processing(session_id)?.unwrap_or_else(|| ProcessingRecord::new(session_id.clone()));

        let todo: Vec<Stage> = Stage::ALL.into_iter().filter(|s| force || !record.is_done(*s)).collect();
        let analyzer = &self.analyzer;
        let (p, q, s) = (&profile, &protocol, &session);
        let results: Vec<(Stage, Result<StageOutput, PipelineError>)> = std::thread::scope(|scope| {
            let handles: Vec<_> = todo
                .iter()
                .map(|stage| {
                    let stage = *stage;
                    scope.spawn(move || {
                        let out = match stage {
                            Stage::Summary => analyzer.summarize_session(p, q, s).map(StageOutput::Summary),
                            Stage::Highlights => analyzer.extract_highlights(p, q, s).map(StageOutput::Highlights),
                            Stage::Risk => analyzer.assess_risk(p, q, s).map(StageOutput::Risk),
                        };
                        (stage, out)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("stage thread panicked")).collect()
        });

        let now = self.clock.now();
        let mut failures = BTreeMap::new();
        for (stage, result) in results {
            let state = match result {
                Ok(StageOutput::Summary(a)) => StageState::Done { version: self.store.put_summary(a, now)?.version },
                Ok(StageOutput::Highlights(a)) => {
                    StageState::Done { version: self.store.put_highlights(a, now)?.version }
                }
                Ok(StageOutput::Risk(a)) => StageState::Done { version: self.store.put_risk(a, now)?.version },
                Err(e) => {
                    let retryable = match &e {
                        PipelineError::Gateway(g) => g.is_retryable(),
                        _ => false,
                    };
                    tracing::warn!(session = %session_id, stage = ?stage, error = %e, "pipeline stage failed");
                    failures.insert(stage, e.to_string());
                    StageState::Failed { error: e.to_string(), retryable }
                }
            };
            record.stages.insert(stage, state);
        }
        record.runs += 1;
        self.store.put_processing(&record)?;

        let risk = self.store.get_risk(session_id)?;
        let mut notified = false;
        if record.all_done() && self.store.claim_notification(session_id)? {
            let assessment = risk.as_ref().map(|r| &r.artifact);
            self.sink.notify(&Notification {
                session_id: session_id.clone(),
                patient_id: session.patient_id.clone(),
                risk_level: assessment.and_then(|r| r.level),
                needs_human_review: assessment.is_some_and(|r| r.needs_human_review),
                at: now,
            });
            notified = true;
        }

        Ok(ProcessingReport {
            session_id: session_id.clone(),
            summary: self.store.get_summary(session_id)?,
            highlights: self.store.get_highlights(session_id)?,
            risk,
            failures,
            notified,
        })
    }
}
