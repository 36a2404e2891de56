mod persona;

use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use carelink_core::domain::{render_transcript, truncate_ms, validate_session, Initiator, PatientId, ProtocolId, SessionId};
use carelink_core::engine::EngineError;
use carelink_core::gateway::live_backend_from_env;
use carelink_core::pipeline::{Analyzer, NullSink, Pipeline, PipelineError, ProcessingReport};
use carelink_core::prompt::PromptConfig;
use carelink_core::store::StoreError;
use carelink_core::{
    fixtures, Clock, CompletionBackend, ConversationEngine, EngineConfig, InfoStore, ManualClock, PauseOutcome,
    PromptEngine, ScriptedBackend, SessionService, SystemClock, TemplateSet,
};
use carelink_server::{AppState, AuthConfig, StateOptions};
use chrono::{Duration, Utc};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "carelink", version, about = "Patient check-in conversations and provider review")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP API. Reads STORE_PATH, STORE_KEY, PORT, TEMPLATE_DIR,
    /// LLM_BASE_URL/LLM_MODEL/LLM_API_KEY, PROVIDER_TOKEN and PATIENT_TOKENS.
    Serve {
        /// Answer model calls from a scripted-response file instead of LLM_*.
        #[arg(long)]
        script: Option<PathBuf>,
        /// Insert the bundled patients and protocols if they are missing.
        #[arg(long)]
        seed: bool,
        /// Do not process sessions automatically when they complete.
        #[arg(long)]
        no_auto_process: bool,
    },
    /// Drive a whole session from a persona file and print the transcript.
    Simulate {
        #[arg(long)]
        persona: PathBuf,
        /// Overrides the protocol named in the persona file.
        #[arg(long)]
        protocol: Option<String>,
        /// Overrides the patient named in the persona file.
        #[arg(long)]
        patient: Option<String>,
        /// `patient` or `provider`; overrides the persona file.
        #[arg(long)]
        initiator: Option<String>,
        #[arg(long)]
        script: Option<PathBuf>,
    },
    /// Run summary, highlight and risk stages for a completed session.
    Process {
        session_id: String,
        #[arg(long)]
        script: Option<PathBuf>,
        /// Re-run every stage even if it already succeeded.
        #[arg(long)]
        force: bool,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Import or export JSON-lines snapshots.
    Fixtures {
        #[command(subcommand)]
        action: FixturesAction,
    },
    /// Delete a session and everything derived from it, then compact.
    Purge { session_id: String },
}

#[derive(Subcommand)]
enum FixturesAction {
    /// Import a snapshot into STORE_PATH; without a file, the bundled reference data.
    Load { file: Option<PathBuf> },
    /// Write a snapshot of STORE_PATH (or of the bundled data when unset).
    Dump {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Maps onto the process exit code.
enum Failure {
    Invariant(String),
    Usage(String),
    Backend(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Invariant(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Backend(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Invariant(m) | Failure::Usage(m) | Failure::Backend(m) => m,
        }
    }
}

impl From<StoreError> for Failure {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound { .. } | StoreError::Config(_) | StoreError::Validation(_) => Failure::Usage(e.to_string()),
            other => Failure::Backend(other.to_string()),
        }
    }
}

impl From<EngineError> for Failure {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::NotFound(_) | EngineError::Configuration(_) => Failure::Usage(e.to_string()),
            EngineError::Lifecycle { .. } | EngineError::RoundLimit(_) => Failure::Invariant(e.to_string()),
            EngineError::Store(s) => s.into(),
            other => Failure::Backend(other.to_string()),
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::NotFound(_) | PipelineError::NotCompleted(_) => Failure::Usage(e.to_string()),
            PipelineError::Store(s) => s.into(),
            other => Failure::Backend(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let default_level = if matches!(cli.command, Command::Serve { .. }) { "info" } else { "warn" };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default_level)),
        )
        .init();

    let result = match cli.command {
        Command::Serve { script, seed, no_auto_process } => serve(script.as_deref(), seed, !no_auto_process),
        Command::Simulate { persona, protocol, patient, initiator, script } => {
            simulate(&persona, protocol, patient, initiator, script.as_deref())
        }
        Command::Process { session_id, script, force, json } => process(&session_id, script.as_deref(), force, json),
        Command::Fixtures { action: FixturesAction::Load { file } } => fixtures_load(file.as_deref()),
        Command::Fixtures { action: FixturesAction::Dump { out } } => fixtures_dump(out.as_deref()),
        Command::Purge { session_id } => purge(&session_id),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn store_configured() -> bool {
    std::env::var_os("STORE_PATH").is_some()
}

/// STORE_PATH when set; otherwise an in-memory store holding the bundled
/// reference data, so offline runs work without setup.
fn working_store() -> Result<Arc<InfoStore>, Failure> {
    if store_configured() {
        return Ok(Arc::new(InfoStore::from_env()?));
    }
    let store = InfoStore::in_memory();
    seed(&store, true)?;
    Ok(Arc::new(store))
}

fn seed(store: &InfoStore, with_sessions: bool) -> Result<usize, Failure> {
    let mut n = 0;
    for p in fixtures::patients() {
        if store.get_patient(&p.patient_id).is_err() {
            store.put_patient(&p)?;
            n += 1;
        }
    }
    for p in fixtures::protocols() {
        if store.get_protocol(&p.protocol_id).is_err() {
            store.put_protocol(&p)?;
            n += 1;
        }
    }
    if with_sessions {
        for s in [fixtures::post_surgery_session(), fixtures::daily_care_session()] {
            if store.get_session(&s.session_id).is_err() {
                store.insert_session(&s)?;
                n += 1;
            }
        }
    }
    Ok(n)
}

fn prompts() -> Result<Arc<PromptEngine>, Failure> {
    let templates = match std::env::var_os("TEMPLATE_DIR") {
        Some(dir) => TemplateSet::load_dir(Path::new(&dir)).map_err(|e| Failure::Usage(e.to_string()))?,
        None => TemplateSet::builtin(),
    };
    Ok(Arc::new(PromptEngine::new(templates, PromptConfig::default())))
}

fn backend(script: Option<&Path>) -> Result<Arc<dyn CompletionBackend>, Failure> {
    match script {
        Some(path) => Ok(Arc::new(ScriptedBackend::from_file(path).map_err(|e| Failure::Usage(e.to_string()))?)),
        None => Ok(Arc::new(live_backend_from_env().map_err(|e| Failure::Usage(e.to_string()))?)),
    }
}

fn parse_initiator(raw: &str) -> Result<Initiator, Failure> {
    serde_json::from_value(serde_json::Value::String(raw.to_owned()))
        .map_err(|_| Failure::Usage(format!("initiator must be `patient` or `provider`, not `{raw}`")))
}

fn serve(script: Option<&Path>, seed_data: bool, auto_process: bool) -> Result<(), Failure> {
    if !store_configured() {
        return Err(Failure::Usage("serve needs STORE_PATH and STORE_KEY".into()));
    }
    let store = Arc::new(InfoStore::from_env()?);
    if seed_data {
        seed(&store, false)?;
    }
    let auth = AuthConfig::from_env().map_err(Failure::Usage)?;
    let port = carelink_server::port_from_env().map_err(Failure::Usage)?;
    // Held here so the backend (which may own a blocking HTTP client) is
    // dropped outside the async runtime.
    let backend = backend(script)?;
    let state = AppState::new(
        store,
        prompts()?,
        backend.clone(),
        Arc::new(SystemClock),
        auth,
        StateOptions { auto_process, ..Default::default() },
    )?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Failure::Backend(e.to_string()))?;
    let served = runtime.block_on(carelink_server::serve(state, port));
    drop(runtime);
    drop(backend);
    served.map_err(|e| Failure::Backend(format!("server: {e}")))
}

fn simulate(
    persona_path: &Path,
    protocol: Option<String>,
    patient: Option<String>,
    initiator: Option<String>,
    script: Option<&Path>,
) -> Result<(), Failure> {
    let persona = persona::load(persona_path).map_err(Failure::Usage)?;
    let protocol = protocol
        .or(persona.protocol_id.clone())
        .ok_or_else(|| Failure::Usage("no protocol: pass --protocol or set protocol_id in the persona".into()))?;
    let patient = patient
        .or(persona.patient_id.clone())
        .ok_or_else(|| Failure::Usage("no patient: pass --patient or set patient_id in the persona".into()))?;
    let initiator = parse_initiator(initiator.or(persona.initiator.clone()).as_deref().unwrap_or("patient"))?;

    let store = working_store()?;
    let clock = Arc::new(ManualClock::new(truncate_ms(Utc::now())));
    let config = EngineConfig::default();
    let timeout = Duration::seconds(config.pause_timeout_secs as i64);
    let engine = ConversationEngine::new(prompts()?, backend(script)?, Default::default(), config, clock.clone())?;
    let service = SessionService::new(store, Arc::new(engine));

    let session = service.start_session(&PatientId::new(patient), &ProtocolId::new(protocol), initiator)?;
    let id = session.session_id.clone();
    let mut outcome = Ok(());
    for (i, u) in persona.utterances.iter().enumerate() {
        if service.get_session(&id)?.status.is_closed() {
            eprintln!("warning: conversation ended; {} utterance(s) unused", persona.utterances.len() - i);
            break;
        }
        // Let the silence elapse one timeout at a time so each re-prompt lands.
        let mut remaining = Duration::seconds(u.delay_secs() as i64);
        while remaining >= timeout {
            clock.advance(timeout);
            remaining -= timeout;
            if service.pause(&id)?.0 == PauseOutcome::Paused {
                clock.advance(remaining);
                remaining = Duration::zero();
            }
        }
        clock.advance(remaining);
        if let Err(e) = service.patient_turn(&id, u.text()) {
            outcome = Err(Failure::from(e));
            break;
        }
    }
    let mut session = service.get_session(&id)?;
    if outcome.is_ok() && !session.status.is_closed() {
        session = service.close(&id, false)?;
    }

    print!("{}", render_transcript(&session.turns));
    std::io::stdout().flush().ok();
    eprintln!("session {} {}", session.session_id, session.status.as_str());
    outcome?;
    let violations = validate_session(&session);
    if !violations.is_empty() {
        return Err(Failure::Invariant(format!("invariant violations: {}", violations.join("; "))));
    }
    Ok(())
}

fn process(session_id: &str, script: Option<&Path>, force: bool, json: bool) -> Result<(), Failure> {
    let store = working_store()?;
    let prompts = prompts()?;
    let clock: Arc<dyn Clock> = Arc::new(SystemClock);
    let analyzer = Analyzer::new(prompts, backend(script)?, EngineConfig::default().generation);
    let pipeline = Pipeline::new(analyzer, store, clock, Arc::new(NullSink));
    let report = pipeline.process_session(&SessionId::new(session_id), force)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&report).map_err(|e| Failure::Backend(e.to_string()))?);
    } else {
        print!("{}", render_report(&report));
    }
    if !report.failures.is_empty() {
        let failed: Vec<_> = report.failures.iter().map(|(s, e)| format!("{s:?}: {e}")).collect();
        return Err(Failure::Backend(format!("stages failed: {}", failed.join("; "))));
    }
    Ok(())
}

fn render_report(report: &ProcessingReport) -> String {
    let mut out = format!("session {}\n", report.session_id);
    if let Some(v) = &report.summary {
        let s = &v.artifact;
        out += &format!("\n== clinical note (v{}) ==\n", v.version);
        out += &format!("Chief concern: {}\n", s.chief_concern);
        out += "Symptom details:\n";
        for d in &s.symptom_details {
            out += &format!("- {}: {}\n", d.label, d.value);
        }
        out += "Patient questions:\n";
        for q in &s.patient_questions {
            out += &format!("- {q}\n");
        }
        out += "Additional notes:\n";
        for n in &s.additional_notes {
            out += &format!("- {n}\n");
        }
        if s.parse_warning {
            out += "(warning: some sections were missing from the model output)\n";
        }
    }
    if let Some(v) = &report.highlights {
        out += &format!("\n== highlights (v{}) ==\n", v.version);
        for sp in &v.artifact.spans {
            out += &format!("turn {} [{}..{}] \"{}\"\n", sp.turn_index, sp.char_start, sp.char_end, sp.quote);
        }
        if v.artifact.dropped_quotes > 0 {
            out += &format!("({} quote(s) could not be placed)\n", v.artifact.dropped_quotes);
        }
    }
    if let Some(v) = &report.risk {
        let r = &v.artifact;
        out += &format!("\n== risk (v{}) ==\n", v.version);
        match r.level {
            Some(level) => out += &format!("Level: {} ({})\n", level.as_str(), level.color()),
            None => out += "Level: unparsed (grey)\n",
        }
        if r.needs_human_review {
            out += "Needs human review\n";
        }
        out += &format!("Reasoning: {}\n", r.reasoning);
    }
    out
}

fn persistent_store() -> Result<InfoStore, Failure> {
    if !store_configured() {
        return Err(Failure::Usage("STORE_PATH and STORE_KEY must be set".into()));
    }
    Ok(InfoStore::from_env()?)
}

fn fixtures_load(file: Option<&Path>) -> Result<(), Failure> {
    let store = persistent_store()?;
    let n = match file {
        Some(path) => {
            let f = std::fs::File::open(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
            store.import_snapshot(BufReader::new(f))?
        }
        None => seed(&store, true)?,
    };
    eprintln!("loaded {n} record(s)");
    Ok(())
}

fn fixtures_dump(out: Option<&Path>) -> Result<(), Failure> {
    let store = working_store()?;
    let n = match out {
        Some(path) => {
            let f = std::fs::File::create(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
            let mut w = std::io::BufWriter::new(f);
            let n = store.export_snapshot(&mut w)?;
            w.flush().map_err(|e| Failure::Backend(e.to_string()))?;
            n
        }
        None => store.export_snapshot(std::io::stdout().lock())?,
    };
    eprintln!("dumped {n} record(s)");
    Ok(())
}

fn purge(session_id: &str) -> Result<(), Failure> {
    let store = persistent_store()?;
    if !store.purge_session(&SessionId::new(session_id))? {
        return Err(Failure::Usage(format!("session `{session_id}` not found")));
    }
    store.compact()?;
    eprintln!("purged {session_id}");
    Ok(())
}
