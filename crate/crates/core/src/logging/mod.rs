//! Append-only per-session event log.
//!
//! Layout of one session directory:
//!
//! ```text
//! <log_dir>/<session_id>/events.jsonl      one EventRecord per line
//! <log_dir>/<session_id>/snapshots/NNNNNN.svg  one per message record (NNNNNN = seq)
//! <log_dir>/<session_id>/manifest.json     written when the session is sealed
//! ```
//!
//! Field names are documented in `docs/log-format.md`.

mod export;
mod replay;

pub use export::{export_session, ExportManifest, ExportSummary, ExportTurn};
pub use replay::{read_events, replay, verify_session_dir, ReplayOutcome, SessionVerification, SnapshotLoader};

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{render_snapshot, Digest, Role, SceneCommand, SceneObject, SceneState};
use crate::session::{Mode, Phase};
use crate::sync::Topology;

pub const EVENTS_FILE: &str = "events.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SNAPSHOT_DIR: &str = "snapshots";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Message,
    Command,
    System,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CommandOutcome {
    Accepted { version: u64, digest: Digest },
    Rejected { code: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParticipantInfo {
    pub participant_id: String,
    pub role: Role,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum SystemEvent {
    SessionCreated {
        session_id: String,
        scenario_id: String,
        mode: Mode,
        topology: Topology,
        participants: Vec<ParticipantInfo>,
        initial_digest: Digest,
    },
    PhaseChanged {
        from: Phase,
        to: Phase,
        reason: Option<String>,
    },
    Note {
        text: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum Event {
    Message {
        text: String,
    },
    Command {
        command: SceneCommand,
        outcome: CommandOutcome,
    },
    System(SystemEvent),
}

impl Event {
    pub fn kind(&self) -> EventKind {
        match self {
            Event::Message { .. } => EventKind::Message,
            Event::Command { .. } => EventKind::Command,
            Event::System(_) => EventKind::System,
        }
    }
}

/// One line of `events.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventRecord {
    pub seq: u64,
    pub timestamp_ms: u64,
    pub actor: String,
    #[serde(flatten)]
    pub event: Event,
    pub scene_version: u64,
    pub layout: Vec<SceneObject>,
    pub snapshot_ref: Option<String>,
}

impl EventRecord {
    pub fn kind(&self) -> EventKind {
        self.event.kind()
    }
}

/// Written to `manifest.json` when a session is sealed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionManifest {
    pub session_id: String,
    pub scenario_id: String,
    pub mode: Mode,
    pub topology: Topology,
    pub participants: Vec<ParticipantInfo>,
    pub phase: Phase,
    pub created_ms: u64,
    pub ended_ms: u64,
    pub event_count: u64,
    pub final_version: u64,
    pub final_digest: Digest,
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("session log is sealed")]
    SessionSealed,
    #[error("log storage failure: {0}")]
    StorageFailure(String),
    #[error("unknown session '{0}'")]
    UnknownSession(String),
    #[error("session '{0}' is not sealed")]
    NotSealed(String),
    #[error("malformed log at {location}: {message}")]
    MalformedLog { location: String, message: String },
    #[error("digest mismatch at {location}: expected {expected}, replay produced {actual}")]
    DigestMismatch {
        location: String,
        expected: Digest,
        actual: Digest,
    },
    #[error("seq {seq}: replayed command outcome differs from the log ({message})")]
    OutcomeMismatch { seq: u64, message: String },
    #[error("seq {seq}: {message}")]
    SnapshotMismatch { seq: u64, message: String },
    #[error("unknown scenario '{0}'")]
    UnknownScenario(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

impl LogError {
    pub(crate) fn malformed(location: impl Into<String>, message: impl Into<String>) -> Self {
        LogError::MalformedLog {
            location: location.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        LogError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// Storage behind one session log.
pub trait LogBackend: Send {
    /// Writes a snapshot file under the session's `snapshots/` directory.
    fn write_snapshot(&mut self, file_name: &str, svg: &str) -> io::Result<()>;
    /// Appends one line (without newline) and flushes it.
    fn append_record(&mut self, line: &str) -> io::Result<()>;
    fn write_manifest(&mut self, json: &str) -> io::Result<()>;
}

/// Creates a backend per session.
pub trait LogStore: Send {
    fn open(&self, session_id: &str) -> io::Result<Box<dyn LogBackend>>;
}

/// Filesystem store rooted at the server's log directory.
#[derive(Debug, Clone)]
pub struct DirStore {
    root: PathBuf,
}

impl DirStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DirStore { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
}

impl LogStore for DirStore {
    fn open(&self, session_id: &str) -> io::Result<Box<dyn LogBackend>> {
        let dir = self.root.join(session_id);
        fs::create_dir_all(&self.root)?;
        // Fails if the directory exists: a session id is never reused.
        fs::create_dir(&dir)?;
        fs::create_dir(dir.join(SNAPSHOT_DIR))?;
        let events = OpenOptions::new()
            .create_new(true)
            .append(true)
            .open(dir.join(EVENTS_FILE))?;
        Ok(Box::new(DirBackend { dir, events }))
    }
}

struct DirBackend {
    dir: PathBuf,
    events: File,
}

impl LogBackend for DirBackend {
    fn write_snapshot(&mut self, file_name: &str, svg: &str) -> io::Result<()> {
        fs::write(self.dir.join(SNAPSHOT_DIR).join(file_name), svg)
    }

    fn append_record(&mut self, line: &str) -> io::Result<()> {
        let mut buf = Vec::with_capacity(line.len() + 1);
        buf.extend_from_slice(line.as_bytes());
        buf.push(b'\n');
        self.events.write_all(&buf)?;
        self.events.flush()
    }

    fn write_manifest(&mut self, json: &str) -> io::Result<()> {
        let tmp = self.dir.join("manifest.json.tmp");
        fs::write(&tmp, json)?;
        fs::rename(tmp, self.dir.join(MANIFEST_FILE))
    }
}

/// In-memory contents of one session log.
#[derive(Debug, Default, Clone)]
pub struct MemoryLog {
    pub records: Vec<String>,
    pub snapshots: BTreeMap<String, String>,
    pub manifest: Option<String>,
}

/// In-memory store; every write fails once `fail_after` writes succeeded.
#[derive(Debug, Clone, Default)]
pub struct MemoryStore {
    logs: Arc<Mutex<BTreeMap<String, Arc<Mutex<MemoryLog>>>>>,
    fail_after: Option<usize>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn failing_after(writes: usize) -> Self {
        MemoryStore {
            fail_after: Some(writes),
            ..Self::default()
        }
    }

    pub fn log(&self, session_id: &str) -> Option<MemoryLog> {
        let logs = self.logs.lock().unwrap();
        logs.get(session_id).map(|l| l.lock().unwrap().clone())
    }
}

impl LogStore for MemoryStore {
    fn open(&self, session_id: &str) -> io::Result<Box<dyn LogBackend>> {
        let log = Arc::new(Mutex::new(MemoryLog::default()));
        self.logs
            .lock()
            .unwrap()
            .insert(session_id.to_string(), Arc::clone(&log));
        Ok(Box::new(MemoryBackend {
            log,
            budget: self.fail_after,
        }))
    }
}

struct MemoryBackend {
    log: Arc<Mutex<MemoryLog>>,
    budget: Option<usize>,
}

impl MemoryBackend {
    fn spend(&mut self) -> io::Result<()> {
        match &mut self.budget {
            Some(0) => Err(io::Error::other("injected storage failure")),
            Some(n) => {
                *n -= 1;
                Ok(())
            }
            None => Ok(()),
        }
    }
}

impl LogBackend for MemoryBackend {
    fn write_snapshot(&mut self, file_name: &str, svg: &str) -> io::Result<()> {
        self.spend()?;
        self.log
            .lock()
            .unwrap()
            .snapshots
            .insert(file_name.to_string(), svg.to_string());
        Ok(())
    }

    fn append_record(&mut self, line: &str) -> io::Result<()> {
        self.spend()?;
        self.log.lock().unwrap().records.push(line.to_string());
        Ok(())
    }

    fn write_manifest(&mut self, json: &str) -> io::Result<()> {
        self.spend()?;
        self.log.lock().unwrap().manifest = Some(json.to_string());
        Ok(())
    }
}

/// The single appender for one session.
pub struct SessionLog {
    backend: Box<dyn LogBackend>,
    next_seq: u64,
    sealed: bool,
    failed: bool,
}

impl std::fmt::Debug for SessionLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SessionLog")
            .field("next_seq", &self.next_seq)
            .field("sealed", &self.sealed)
            .field("failed", &self.failed)
            .finish()
    }
}

pub fn snapshot_file_name(seq: u64) -> String {
    format!("{seq:06}.svg")
}

impl SessionLog {
    pub fn new(backend: Box<dyn LogBackend>) -> Self {
        SessionLog {
            backend,
            next_seq: 1,
            sealed: false,
            failed: false,
        }
    }

    pub fn is_sealed(&self) -> bool {
        self.sealed
    }

    pub fn has_failed(&self) -> bool {
        self.failed
    }

    /// Number of records written so far.
    pub fn len(&self) -> u64 {
        self.next_seq - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Appends a record describing `event` against `state` (the state at the
    /// record's scene version). Message records get a snapshot written
    /// before the record itself.
    pub fn append_event(
        &mut self,
        timestamp_ms: u64,
        actor: &str,
        event: Event,
        state: &SceneState,
    ) -> Result<EventRecord, LogError> {
        if self.sealed {
            return Err(LogError::SessionSealed);
        }
        if self.failed {
            return Err(LogError::StorageFailure("log storage previously failed".into()));
        }
        let seq = self.next_seq;
        let snapshot_ref = if event.kind() == EventKind::Message {
            let name = snapshot_file_name(seq);
            let svg = render_snapshot(state);
            self.backend
                .write_snapshot(&name, &svg)
                .map_err(|e| self.storage_failure(e))?;
            Some(format!("{SNAPSHOT_DIR}/{name}"))
        } else {
            None
        };
        let record = EventRecord {
            seq,
            timestamp_ms,
            actor: actor.to_string(),
            event,
            scene_version: state.version,
            layout: state.objects.clone(),
            snapshot_ref,
        };
        let line = serde_json::to_string(&record).expect("event records serialize");
        self.backend.append_record(&line).map_err(|e| self.storage_failure(e))?;
        self.next_seq += 1;
        Ok(record)
    }

    fn storage_failure(&mut self, e: io::Error) -> LogError {
        self.failed = true;
        LogError::StorageFailure(e.to_string())
    }

    /// Writes the manifest and refuses every later append. A log whose
    /// storage already failed is sealed without writing.
    pub fn seal(&mut self, manifest: &SessionManifest) -> Result<(), LogError> {
        if self.sealed {
            return Err(LogError::SessionSealed);
        }
        self.sealed = true;
        if self.failed {
            return Err(LogError::StorageFailure("manifest not written".into()));
        }
        let json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
        self.backend.write_manifest(&json).map_err(|e| self.storage_failure(e))
    }
}

pub fn read_manifest(session_dir: &Path) -> Result<SessionManifest, LogError> {
    let path = session_dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| LogError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| LogError::malformed(MANIFEST_FILE, e.to_string()))
}

/// Sealed session directories (those with a manifest) under `root`, sorted.
pub fn sealed_session_dirs(root: &Path) -> Result<Vec<PathBuf>, LogError> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| LogError::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST_FILE).is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}
