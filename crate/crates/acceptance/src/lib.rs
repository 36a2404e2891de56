//! Release acceptance checks. Each module holds one criterion and its own
//! oracle: expected results are derived here, from the documented rules,
//! not by calling the code under test a second time.

/// Fails the check with a message unless `cond` holds.
macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

pub mod api;
pub mod durability;
pub mod highlights;
pub mod lifecycle;
pub mod loopback;
pub mod prompts;
pub mod replay;
pub mod risk;

use std::sync::Arc;

use carelink_core::domain::{ConversationProtocol, PatientProfile};
use carelink_core::{CompletionBackend, CompletionRequest, GatewayError};

/// Result of one criterion: `Ok(detail)` on pass, `Err(reason)` on fail.
pub type Verdict = Result<String, String>;

pub struct Criterion {
    pub number: u8,
    pub name: &'static str,
    pub run: fn() -> Verdict,
}

/// Criterion 7 needs a child process; callers supply how to spawn one.
pub const CRITERIA: [Criterion; 7] = [
    Criterion { number: 1, name: "transcript replay", run: replay::check },
    Criterion { number: 2, name: "prompt assembly", run: prompts::check },
    Criterion { number: 3, name: "loopback soundness", run: loopback::check },
    Criterion { number: 4, name: "state-machine totality", run: lifecycle::check },
    Criterion { number: 5, name: "highlight anchoring", run: highlights::check },
    Criterion { number: 6, name: "risk parse totality", run: risk::check },
    Criterion { number: 8, name: "API contract", run: api::check },
];

/// A backend driven by a closure, for generated conversations.
pub struct FnBackend<F>(pub F);

impl<F> CompletionBackend for FnBackend<F>
where
    F: Fn(&CompletionRequest) -> Result<String, GatewayError> + Send + Sync,
{
    fn backend_id(&self) -> &str {
        "acceptance"
    }

    fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        (self.0)(request)
    }
}

pub fn backend<F>(f: F) -> Arc<dyn CompletionBackend>
where
    F: Fn(&CompletionRequest) -> Result<String, GatewayError> + Send + Sync + 'static,
{
    Arc::new(FnBackend(f))
}

pub fn scenario_contexts() -> [(PatientProfile, ConversationProtocol); 2] {
    use carelink_core::fixtures;
    [
        (fixtures::john(), fixtures::post_surgery_protocol()),
        (fixtures::mary(), fixtures::daily_care_protocol()),
    ]
}
