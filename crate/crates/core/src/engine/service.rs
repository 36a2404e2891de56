use std::collections::HashMap;
use std::sync::Arc;

use parking_lot::Mutex;

use crate::domain::{Initiator, PatientId, ProtocolId, Session, SessionId, Turn};
use crate::store::InfoStore;

use super::{ConversationEngine, EngineError, PauseOutcome, SessionContext};

/// Store-backed session operations. Calls on the same session are
/// serialized; different sessions proceed in parallel.
pub struct SessionService {
    store: Arc<InfoStore>,
    engine: Arc<ConversationEngine>,
    locks: Mutex<HashMap<SessionId, Arc<Mutex<()>>>>,
}

impl SessionService {
    pub fn new(store: Arc<InfoStore>, engine: Arc<ConversationEngine>) -> Self {
        Self { store, engine, locks: Mutex::new(HashMap::new()) }
    }

    pub fn store(&self) -> &Arc<InfoStore> {
        &self.store
    }

    pub fn engine(&self) -> &Arc<ConversationEngine> {
        &self.engine
    }

    fn lock_for(&self, id: &SessionId) -> Arc<Mutex<()>> {
        self.locks.lock().entry(id.clone()).or_default().clone()
    }

    pub fn start_session(
        &self,
        patient_id: &PatientId,
        protocol_id: &ProtocolId,
        initiator: Initiator,
    ) -> Result<Session, EngineError> {
        let profile = self.store.get_patient(patient_id)?;
        let protocol = self.store.get_protocol(protocol_id)?;
        let id = SessionId::new(InfoStore::new_id("session"));
        let session = self.engine.start(SessionContext { profile: &profile, protocol: &protocol }, id, initiator)?;
        self.store.insert_session(&session)?;
        Ok(session)
    }

    pub fn get_session(&self, id: &SessionId) -> Result<Session, EngineError> {
        Ok(self.store.get_session(id)?)
    }

    /// Runs one patient turn and persists the result. A round-limit abort is
    /// persisted before the error is returned; a model failure leaves the
    /// stored session untouched.
    pub fn patient_turn(&self, id: &SessionId, utterance: &str) -> Result<(Turn, Session), EngineError> {
        let lock = self.lock_for(id);
        let _guard = lock.lock();
        let mut session = self.store.get_session(id)?;
        let profile = self.store.get_patient(&session.patient_id)?;
        let protocol = self.store.get_protocol(&session.protocol_id)?;
        let ctx = SessionContext { profile: &profile, protocol: &protocol };
        match self.engine.patient_turn(ctx, &mut session, utterance) {
            Ok(turn) => {
                self.store.put_session(&session)?;
                Ok((turn, session))
            }
            Err(e @ EngineError::RoundLimit(_)) => {
                self.store.put_session(&session)?;
                Err(e)
            }
            Err(e) => Err(e),
        }
    }

    pub fn pause(&self, id: &SessionId) -> Result<(PauseOutcome, Session), EngineError> {
        let lock = self.lock_for(id);
        let _guard = lock.lock();
        let mut session = self.store.get_session(id)?;
        let outcome = self.engine.handle_pause(&mut session)?;
        if outcome != PauseOutcome::NotDue {
            self.store.put_session(&session)?;
        }
        Ok((outcome, session))
    }

    pub fn close(&self, id: &SessionId, abort: bool) -> Result<Session, EngineError> {
        let lock = self.lock_for(id);
        let _guard = lock.lock();
        let mut session = self.store.get_session(id)?;
        self.engine.close(&mut session, abort)?;
        self.store.put_session(&session)?;
        Ok(session)
    }
}
