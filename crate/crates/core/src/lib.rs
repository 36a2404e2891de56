//! Patient conversation engine, provider-side triage pipeline and the
//! encrypted information store they share.

pub mod clock;
pub mod domain;
pub mod engine;
pub mod fixtures;
pub mod gateway;
pub mod pipeline;
pub mod prompt;
pub mod store;

pub use clock::{Clock, ManualClock, SystemClock};
pub use engine::{ConversationEngine, EngineConfig, EngineError, PauseOutcome, SessionContext, SessionService};
pub use gateway::{CompletionBackend, CompletionRequest, GatewayError, LiveBackend, ScriptedBackend};
pub use prompt::{PromptBundle, PromptEngine, TemplateSet};
pub use store::{InfoStore, StoreError};
pub use pipeline::{Analyzer, Notification, NotificationSink, Pipeline, PipelineError};
