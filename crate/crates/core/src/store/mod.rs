//! Persistent information store.
//!
//! [`RecordStore`] is the raw keyed-record layer (an encrypted journal on
//! disk, or memory for tests). [`InfoStore`] is the typed facade used by the
//! engine, pipeline and HTTP API.

mod journal;
mod memory;

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Arc;

use parking_lot::Mutex;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::domain::{
    ms_time, ActionId, ActionKind, ClinicalSummary, ConversationProtocol, HighlightReport, Initiator, PatientId,
    PatientProfile, ProtocolId, ProviderAction, RiskAssessment, RiskLevel, Session, SessionId, SessionStatus,
    Timestamp,
};

pub use journal::{JournalOptions, JournalStore, JOURNAL_FILE};
pub use memory::MemoryStore;

pub const PATIENTS: &str = "patients";
pub const PROTOCOLS: &str = "protocols";
pub const SESSIONS: &str = "sessions";
pub const SUMMARIES: &str = "summaries";
pub const HIGHLIGHTS: &str = "highlights";
pub const RISKS: &str = "risks";
pub const PROCESSING: &str = "processing";
pub const ACTIONS: &str = "actions";

pub const COLLECTIONS: [&str; 8] = [PATIENTS, PROTOCOLS, SESSIONS, SUMMARIES, HIGHLIGHTS, RISKS, PROCESSING, ACTIONS];

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{collection} `{key}` not found")]
    NotFound { collection: String, key: String },
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("invalid record: {0}")]
    Validation(String),
    #[error("storage I/O failed: {0}")]
    Io(String),
    #[error("store is corrupt: {0}")]
    Corrupt(String),
    #[error("store key does not match the data on disk")]
    WrongKey,
    #[error("store configuration: {0}")]
    Config(String),
    #[error("record encoding: {0}")]
    Encoding(String),
}

impl StoreError {
    fn not_found(collection: &str, key: impl Into<String>) -> Self {
        StoreError::NotFound { collection: collection.to_owned(), key: key.into() }
    }
}

/// Keyed records grouped into collections. Values are JSON text.
pub trait RecordStore: Send + Sync {
    fn put(&self, collection: &str, key: &str, value: &str) -> Result<(), StoreError>;
    fn delete(&self, collection: &str, key: &str) -> Result<(), StoreError>;
    fn get(&self, collection: &str, key: &str) -> Result<Option<String>, StoreError>;
    /// All records of a collection, ordered by key.
    fn scan(&self, collection: &str) -> Result<Vec<(String, String)>, StoreError>;
    fn collections(&self) -> Vec<String>;
    fn compact(&self) -> Result<(), StoreError> {
        Ok(())
    }
}

/// A generated artifact with its version number. Re-running a pipeline
/// stage writes a new version; earlier ones are not kept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versioned<T> {
    pub version: u32,
    #[serde(with = "ms_time")]
    pub generated_at: Timestamp,
    pub artifact: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Summary,
    Highlights,
    Risk,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Summary, Stage::Highlights, Stage::Risk];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum StageState {
    Done { version: u32 },
    Failed { error: String, retryable: bool },
}

/// Pipeline bookkeeping for one session.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcessingRecord {
    pub session_id: SessionId,
    #[serde(default)]
    pub stages: BTreeMap<Stage, StageState>,
    /// Set once the provider notification has been emitted.
    #[serde(default)]
    pub notified: bool,
    #[serde(default)]
    pub runs: u32,
}

impl ProcessingRecord {
    pub fn new(session_id: SessionId) -> Self {
        Self { session_id, stages: BTreeMap::new(), notified: false, runs: 0 }
    }

    pub fn is_done(&self, stage: Stage) -> bool {
        matches!(self.stages.get(&stage), Some(StageState::Done { .. }))
    }

    pub fn all_done(&self) -> bool {
        Stage::ALL.iter().all(|s| self.is_done(*s))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionFilter {
    #[serde(default)]
    pub patient_id: Option<PatientId>,
    #[serde(default)]
    pub status: Option<SessionStatus>,
    #[serde(default)]
    pub risk: Option<RiskLevel>,
    #[serde(default)]
    pub done: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageRequest {
    pub offset: usize,
    pub limit: usize,
}

impl PageRequest {
    pub const DEFAULT_LIMIT: usize = 50;
    pub const MAX_LIMIT: usize = 500;

    pub fn new(offset: usize, limit: usize) -> Self {
        Self { offset, limit: limit.clamp(1, Self::MAX_LIMIT) }
    }
}

impl Default for PageRequest {
    fn default() -> Self {
        Self::new(0, Self::DEFAULT_LIMIT)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Page<T> {
    pub items: Vec<T>,
    pub total: usize,
    pub offset: usize,
    pub limit: usize,
}

/// One row of the provider dashboard.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionListing {
    pub session_id: SessionId,
    pub patient_id: PatientId,
    pub patient_name: Option<String>,
    pub protocol_id: ProtocolId,
    pub status: SessionStatus,
    pub initiator: Initiator,
    #[serde(with = "ms_time")]
    pub created_at: Timestamp,
    #[serde(with = "ms_time::option")]
    pub closed_at: Option<Timestamp>,
    pub turn_count: usize,
    pub risk_level: Option<RiskLevel>,
    /// green / yellow / red, or grey when the risk could not be parsed.
    pub risk_color: Option<String>,
    pub needs_human_review: bool,
    pub done: bool,
}

impl SessionListing {
    /// Higher ranks sort first: high, unparsed, moderate, low, unassessed.
    fn risk_rank(&self) -> u8 {
        match (self.risk_level, self.needs_human_review) {
            (Some(RiskLevel::High), _) => 4,
            (None, true) => 3,
            (Some(RiskLevel::Moderate), _) => 2,
            (Some(RiskLevel::Low), _) => 1,
            (None, false) => 0,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SnapshotLine {
    collection: String,
    key: String,
    value: serde_json::Value,
}

fn encode<T: Serialize>(value: &T) -> Result<String, StoreError> {
    serde_json::to_string(value).map_err(|e| StoreError::Encoding(e.to_string()))
}

fn decode<T: DeserializeOwned>(collection: &str, key: &str, raw: &str) -> Result<T, StoreError> {
    serde_json::from_str(raw).map_err(|e| StoreError::Corrupt(format!("{collection} `{key}`: {e}")))
}

fn action_key(session_id: &SessionId, action_id: &ActionId) -> String {
    format!("{session_id}/{action_id}")
}

pub struct InfoStore {
    records: Arc<dyn RecordStore>,
    /// Serializes read-modify-write sequences.
    write_lock: Mutex<()>,
}

impl InfoStore {
    pub fn new(records: Arc<dyn RecordStore>) -> Self {
        Self { records, write_lock: Mutex::new(()) }
    }

    pub fn in_memory() -> Self {
        Self::new(Arc::new(MemoryStore::default()))
    }

    pub fn open(dir: &Path, secret: &str) -> Result<Self, StoreError> {
        Ok(Self::new(Arc::new(JournalStore::open(dir, secret, JournalOptions::default())?)))
    }

    /// Opens the store named by `STORE_PATH`, keyed by `STORE_KEY`.
    pub fn from_env() -> Result<Self, StoreError> {
        let path = std::env::var("STORE_PATH").map_err(|_| StoreError::Config("STORE_PATH is not set".into()))?;
        let key = std::env::var("STORE_KEY").map_err(|_| StoreError::Config("STORE_KEY is not set".into()))?;
        Self::open(Path::new(&path), &key)
    }

    pub fn records(&self) -> &Arc<dyn RecordStore> {
        &self.records
    }

    pub fn new_id(prefix: &str) -> String {
        format!("{prefix}-{}", uuid::Uuid::new_v4())
    }

    pub(crate) fn get_typed<T: DeserializeOwned>(&self, collection: &str, key: &str) -> Result<Option<T>, StoreError> {
        self.records.get(collection, key)?.map(|raw| decode(collection, key, &raw)).transpose()
    }

    fn require<T: DeserializeOwned>(&self, collection: &str, key: &str) -> Result<T, StoreError> {
        self.get_typed(collection, key)?.ok_or_else(|| StoreError::not_found(collection, key))
    }

    fn put_typed<T: Serialize>(&self, collection: &str, key: &str, value: &T) -> Result<(), StoreError> {
        self.records.put(collection, key, &encode(value)?)
    }

    fn scan_typed<T: DeserializeOwned>(&self, collection: &str) -> Result<Vec<T>, StoreError> {
        self.records.scan(collection)?.iter().map(|(k, v)| decode(collection, k, v)).collect()
    }

    pub fn put_patient(&self, patient: &PatientProfile) -> Result<(), StoreError> {
        patient.validate().map_err(StoreError::Validation)?;
        self.put_typed(PATIENTS, patient.patient_id.as_str(), patient)
    }

    pub fn get_patient(&self, id: &PatientId) -> Result<PatientProfile, StoreError> {
        self.require(PATIENTS, id.as_str())
    }

    pub fn list_patients(&self) -> Result<Vec<PatientProfile>, StoreError> {
        self.scan_typed(PATIENTS)
    }

    pub fn put_protocol(&self, protocol: &ConversationProtocol) -> Result<(), StoreError> {
        protocol.validate().map_err(StoreError::Validation)?;
        self.put_typed(PROTOCOLS, protocol.protocol_id.as_str(), protocol)
    }

    pub fn get_protocol(&self, id: &ProtocolId) -> Result<ConversationProtocol, StoreError> {
        self.require(PROTOCOLS, id.as_str())
    }

    pub fn list_protocols(&self) -> Result<Vec<ConversationProtocol>, StoreError> {
        self.scan_typed(PROTOCOLS)
    }

    /// Stores a new session; fails if the id is taken.
    pub fn insert_session(&self, session: &Session) -> Result<(), StoreError> {
        let _guard = self.write_lock.lock();
        if self.records.get(SESSIONS, session.session_id.as_str())?.is_some() {
            return Err(StoreError::Conflict(format!("session `{}` already exists", session.session_id)));
        }
        self.put_typed(SESSIONS, session.session_id.as_str(), session)
    }

    /// Replaces a session. A closed session can no longer change.
    pub fn put_session(&self, session: &Session) -> Result<(), StoreError> {
        let _guard = self.write_lock.lock();
        if let Some(existing) = self.get_typed::<Session>(SESSIONS, session.session_id.as_str())? {
            if existing.status.is_closed() {
                if existing == *session {
                    return Ok(());
                }
                return Err(StoreError::Conflict(format!(
                    "session `{}` is {} and can no longer change",
                    session.session_id,
                    existing.status.as_str()
                )));
            }
            if session.turns.len() < existing.turns.len() || session.turns[..existing.turns.len()] != existing.turns[..] {
                return Err(StoreError::Conflict(format!("session `{}` turns are append-only", session.session_id)));
            }
        }
        self.put_typed(SESSIONS, session.session_id.as_str(), session)
    }

    pub fn get_session(&self, id: &SessionId) -> Result<Session, StoreError> {
        self.require(SESSIONS, id.as_str())
    }

    pub fn list_all_sessions(&self) -> Result<Vec<Session>, StoreError> {
        self.scan_typed(SESSIONS)
    }

    pub fn list_sessions(&self, filter: &SessionFilter, page: PageRequest) -> Result<Page<SessionListing>, StoreError> {
        let names: HashMap<PatientId, String> =
            self.list_patients()?.into_iter().map(|p| (p.patient_id, p.name)).collect();
        let done: std::collections::HashSet<SessionId> = self
            .scan_typed::<ProviderAction>(ACTIONS)?
            .into_iter()
            .filter(|a| a.kind == ActionKind::MarkDone)
            .map(|a| a.session_id)
            .collect();

        let mut rows = Vec::new();
        for session in self.list_all_sessions()? {
            if filter.patient_id.as_ref().is_some_and(|p| *p != session.patient_id) {
                continue;
            }
            if filter.status.is_some_and(|s| s != session.status) {
                continue;
            }
            let risk = self.get_risk(&session.session_id)?.map(|v| v.artifact);
            let risk_level = risk.as_ref().and_then(|r| r.level);
            let needs_human_review = risk.as_ref().is_some_and(|r| r.needs_human_review);
            if filter.risk.is_some() && filter.risk != risk_level {
                continue;
            }
            let is_done = done.contains(&session.session_id);
            if filter.done.is_some_and(|d| d != is_done) {
                continue;
            }
            rows.push(SessionListing {
                patient_name: names.get(&session.patient_id).cloned(),
                risk_color: match (risk_level, needs_human_review) {
                    (Some(l), _) => Some(l.color().to_owned()),
                    (None, true) => Some("grey".to_owned()),
                    (None, false) => None,
                },
                turn_count: session.turns.len(),
                session_id: session.session_id,
                patient_id: session.patient_id,
                protocol_id: session.protocol_id,
                status: session.status,
                initiator: session.initiator,
                created_at: session.created_at,
                closed_at: session.closed_at,
                risk_level,
                needs_human_review,
                done: is_done,
            });
        }
        rows.sort_by(|a, b| {
            b.risk_rank()
                .cmp(&a.risk_rank())
                .then(b.created_at.cmp(&a.created_at))
                .then(a.session_id.cmp(&b.session_id))
        });
        let total = rows.len();
        let items = rows.into_iter().skip(page.offset).take(page.limit).collect();
        Ok(Page { items, total, offset: page.offset, limit: page.limit })
    }

    fn put_versioned<T: Serialize + DeserializeOwned>(
        &self,
        collection: &str,
        session_id: &SessionId,
        artifact: T,
        at: Timestamp,
    ) -> Result<Versioned<T>, StoreError> {
        let _guard = self.write_lock.lock();
        let prior: Option<Versioned<serde_json::Value>> = self.get_typed(collection, session_id.as_str())?;
        let record = Versioned { version: prior.map_or(1, |p| p.version + 1), generated_at: at, artifact };
        self.put_typed(collection, session_id.as_str(), &record)?;
        Ok(record)
    }

    pub fn put_summary(&self, summary: ClinicalSummary, at: Timestamp) -> Result<Versioned<ClinicalSummary>, StoreError> {
        let id = summary.session_id.clone();
        self.put_versioned(SUMMARIES, &id, summary, at)
    }

    pub fn get_summary(&self, id: &SessionId) -> Result<Option<Versioned<ClinicalSummary>>, StoreError> {
        self.get_typed(SUMMARIES, id.as_str())
    }

    pub fn put_highlights(
        &self,
        report: HighlightReport,
        at: Timestamp,
    ) -> Result<Versioned<HighlightReport>, StoreError> {
        let id = report.session_id.clone();
        self.put_versioned(HIGHLIGHTS, &id, report, at)
    }

    pub fn get_highlights(&self, id: &SessionId) -> Result<Option<Versioned<HighlightReport>>, StoreError> {
        self.get_typed(HIGHLIGHTS, id.as_str())
    }

    pub fn put_risk(&self, risk: RiskAssessment, at: Timestamp) -> Result<Versioned<RiskAssessment>, StoreError> {
        let id = risk.session_id.clone();
        self.put_versioned(RISKS, &id, risk, at)
    }

    pub fn get_risk(&self, id: &SessionId) -> Result<Option<Versioned<RiskAssessment>>, StoreError> {
        self.get_typed(RISKS, id.as_str())
    }

    pub fn get_processing(&self, id: &SessionId) -> Result<Option<ProcessingRecord>, StoreError> {
        self.get_typed(PROCESSING, id.as_str())
    }

    pub fn put_processing(&self, record: &ProcessingRecord) -> Result<(), StoreError> {
        self.put_typed(PROCESSING, record.session_id.as_str(), record)
    }

    /// Atomically flips the notified flag. Returns true only for the caller
    /// that flipped it.
    pub fn claim_notification(&self, id: &SessionId) -> Result<bool, StoreError> {
        let _guard = self.write_lock.lock();
        let mut record = self.get_processing(id)?.unwrap_or_else(|| ProcessingRecord::new(id.clone()));
        if record.notified {
            return Ok(false);
        }
        record.notified = true;
        self.put_processing(&record)?;
        Ok(true)
    }

    /// Appends a provider action. Actions are never edited or removed, and a
    /// session can be marked done only once.
    pub fn append_action(&self, action: &ProviderAction) -> Result<(), StoreError> {
        let _guard = self.write_lock.lock();
        if self.records.get(SESSIONS, action.session_id.as_str())?.is_none() {
            return Err(StoreError::not_found(SESSIONS, action.session_id.as_str()));
        }
        let key = action_key(&action.session_id, &action.action_id);
        if self.records.get(ACTIONS, &key)?.is_some() {
            return Err(StoreError::Conflict(format!("action `{}` already exists", action.action_id)));
        }
        if action.kind == ActionKind::MarkDone && self.is_done_unlocked(&action.session_id)? {
            return Err(StoreError::Conflict(format!("session `{}` is already marked done", action.session_id)));
        }
        self.put_typed(ACTIONS, &key, action)
    }

    pub fn mark_done(
        &self,
        session_id: &SessionId,
        author: &str,
        body: &str,
        at: Timestamp,
    ) -> Result<ProviderAction, StoreError> {
        let action = ProviderAction {
            action_id: ActionId::new(Self::new_id("action")),
            session_id: session_id.clone(),
            author: author.to_owned(),
            kind: ActionKind::MarkDone,
            body: body.to_owned(),
            timestamp: at,
        };
        self.append_action(&action)?;
        Ok(action)
    }

    pub fn list_actions(&self, session_id: &SessionId) -> Result<Vec<ProviderAction>, StoreError> {
        let prefix = format!("{session_id}/");
        let mut actions: Vec<ProviderAction> = self
            .records
            .scan(ACTIONS)?
            .iter()
            .filter(|(k, _)| k.starts_with(&prefix))
            .map(|(k, v)| decode(ACTIONS, k, v))
            .collect::<Result<_, _>>()?;
        actions.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then(a.action_id.cmp(&b.action_id)));
        Ok(actions)
    }

    fn is_done_unlocked(&self, session_id: &SessionId) -> Result<bool, StoreError> {
        Ok(self.list_actions(session_id)?.iter().any(|a| a.kind == ActionKind::MarkDone))
    }

    pub fn is_done(&self, session_id: &SessionId) -> Result<bool, StoreError> {
        self.is_done_unlocked(session_id)
    }

    /// Removes a session and everything derived from it.
    pub fn purge_session(&self, session_id: &SessionId) -> Result<bool, StoreError> {
        let _guard = self.write_lock.lock();
        let existed = self.records.get(SESSIONS, session_id.as_str())?.is_some();
        for collection in [SESSIONS, SUMMARIES, HIGHLIGHTS, RISKS, PROCESSING] {
            self.records.delete(collection, session_id.as_str())?;
        }
        let prefix = format!("{session_id}/");
        for (key, _) in self.records.scan(ACTIONS)? {
            if key.starts_with(&prefix) {
                self.records.delete(ACTIONS, &key)?;
            }
        }
        Ok(existed)
    }

    /// Rewrites the backing file so purged data no longer exists on disk.
    pub fn compact(&self) -> Result<(), StoreError> {
        let _guard = self.write_lock.lock();
        self.records.compact()
    }

    /// Writes every record as one JSON object per line.
    pub fn export_snapshot(&self, mut out: impl Write) -> Result<usize, StoreError> {
        let mut n = 0;
        for collection in COLLECTIONS {
            for (key, raw) in self.records.scan(collection)? {
                let line = SnapshotLine {
                    collection: collection.to_owned(),
                    key: key.clone(),
                    value: decode(collection, &key, &raw)?,
                };
                serde_json::to_writer(&mut out, &line).map_err(|e| StoreError::Io(e.to_string()))?;
                out.write_all(b"\n").map_err(|e| StoreError::Io(e.to_string()))?;
                n += 1;
            }
        }
        Ok(n)
    }

    /// Loads lines written by [`InfoStore::export_snapshot`]. Each record is
    /// checked against its collection's type before anything is written.
    pub fn import_snapshot(&self, input: impl BufRead) -> Result<usize, StoreError> {
        let mut lines = Vec::new();
        for (no, line) in input.lines().enumerate() {
            let line = line.map_err(|e| StoreError::Io(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: SnapshotLine = serde_json::from_str(&line)
                .map_err(|e| StoreError::Validation(format!("line {}: {e}", no + 1)))?;
            check_snapshot_value(&parsed).map_err(|e| StoreError::Validation(format!("line {}: {e}", no + 1)))?;
            lines.push(parsed);
        }
        let _guard = self.write_lock.lock();
        for line in &lines {
            self.records.put(&line.collection, &line.key, &encode(&line.value)?)?;
        }
        Ok(lines.len())
    }
}

fn check_snapshot_value(line: &SnapshotLine) -> Result<(), String> {
    fn check<T: DeserializeOwned>(v: &serde_json::Value) -> Result<T, String> {
        T::deserialize(v).map_err(|e| e.to_string())
    }
    let v = &line.value;
    match line.collection.as_str() {
        PATIENTS => check::<PatientProfile>(v)?.validate(),
        PROTOCOLS => check::<ConversationProtocol>(v)?.validate(),
        SESSIONS => check::<Session>(v).map(drop),
        SUMMARIES => check::<Versioned<ClinicalSummary>>(v).map(drop),
        HIGHLIGHTS => check::<Versioned<HighlightReport>>(v).map(drop),
        RISKS => check::<Versioned<RiskAssessment>>(v).map(drop),
        PROCESSING => check::<ProcessingRecord>(v).map(drop),
        ACTIONS => check::<ProviderAction>(v).map(drop),
        other => Err(format!("unknown collection `{other}`")),
    }
}
