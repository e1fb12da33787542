//! Matchmaking and session lifecycle.
//!
//! The [`Lobby`] owns the match queues, the agent registry and every live
//! session. It is driven by a single coordinator, so none of it locks.
//!
//! ```text
//!   Forming ──(both acked)──→ Active ──→ Completed
//!      │                        │
//!      └──────────────→ Abandoned ←┘
//! ```

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{AgentError, AgentRegistration, AgentRegistry};
use crate::logging::{
    Event, EventRecord, LogError, LogStore, ParticipantInfo, SessionLog, SessionManifest, SystemEvent,
};
use crate::scene::{Role, ScenarioLibrary, SceneContext, SceneError, SceneState};
use crate::sync::{DeltaHistory, ReplicaStatus, SyncConfig, Topology};

/// Opaque handle to the channel a participant is reachable on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ConnId(pub u64);

impl fmt::Display for ConnId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Human user paired with a human wizard.
    Collection,
    /// Human user paired with a registered agent.
    Evaluation,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "collection" => Ok(Mode::Collection),
            "evaluation" => Ok(Mode::Evaluation),
            other => Err(format!("unknown mode '{other}' (expected collection or evaluation)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Forming,
    Active,
    Completed,
    Abandoned,
}

impl Phase {
    pub fn is_terminal(self) -> bool {
        matches!(self, Phase::Completed | Phase::Abandoned)
    }

    pub fn can_become(self, next: Phase) -> bool {
        matches!(
            (self, next),
            (Phase::Forming, Phase::Active)
                | (Phase::Forming, Phase::Abandoned)
                | (Phase::Active, Phase::Completed)
                | (Phase::Active, Phase::Abandoned)
        )
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Forming => "forming",
            Phase::Active => "active",
            Phase::Completed => "completed",
            Phase::Abandoned => "abandoned",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Participant {
    pub participant_id: String,
    pub role: Role,
    pub conn: ConnId,
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("participant '{0}' is already enqueued")]
    AlreadyEnqueued(String),
    #[error("participant '{0}' is already in a live session")]
    AlreadyInSession(String),
    #[error("unknown scenario '{0}'")]
    UnknownScenario(String),
    #[error("role '{0}' cannot enqueue")]
    RoleNotQueueable(Role),
    #[error("unknown session '{0}'")]
    UnknownSession(String),
    #[error("illegal transition {from} -> {to}{}", .detail.as_deref().map(|d| format!(" ({d})")).unwrap_or_default())]
    IllegalTransition {
        from: Phase,
        to: Phase,
        detail: Option<String>,
    },
    #[error("session '{0}' is not active")]
    SessionNotActive(String),
    #[error("'{0}' is not a participant of this session")]
    NotAParticipant(String),
    #[error("message is empty")]
    EmptyMessage,
    #[error("message exceeds {0} bytes")]
    MessageTooLong(usize),
    #[error("'{participant}' is a {actual} but issued a command as {claimed}")]
    RoleMismatch {
        participant: String,
        claimed: Role,
        actual: Role,
    },
    #[error("replica claims version {claimed} but the server is at {authoritative}")]
    VersionAhead { claimed: u64, authoritative: u64 },
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Log(#[from] LogError),
}

impl SessionError {
    pub fn code(&self) -> &'static str {
        match self {
            SessionError::AlreadyEnqueued(_) => "already_enqueued",
            SessionError::AlreadyInSession(_) => "already_in_session",
            SessionError::UnknownScenario(_) => "unknown_scenario",
            SessionError::RoleNotQueueable(_) => "role_not_queueable",
            SessionError::UnknownSession(_) => "unknown_session",
            SessionError::IllegalTransition { .. } => "illegal_transition",
            SessionError::SessionNotActive(_) => "session_not_active",
            SessionError::NotAParticipant(_) => "not_a_participant",
            SessionError::EmptyMessage => "empty_message",
            SessionError::MessageTooLong(_) => "message_too_long",
            SessionError::RoleMismatch { .. } => "role_mismatch",
            SessionError::VersionAhead { .. } => "version_ahead",
            SessionError::Scene(e) => e.code(),
            SessionError::Agent(e) => e.code(),
            SessionError::Log(LogError::SessionSealed) => "session_sealed",
            SessionError::Log(_) => "storage_failure",
        }
    }

    pub fn is_storage_failure(&self) -> bool {
        matches!(self, SessionError::Log(LogError::StorageFailure(_)))
    }
}

pub const MAX_MESSAGE_BYTES: usize = 4096;

/// One dialogue session: a user, an assistant (wizard or agent), a scene.
#[derive(Debug)]
pub struct Session {
    pub session_id: String,
    pub mode: Mode,
    pub scenario_id: String,
    pub topology: Topology,
    pub phase: Phase,
    pub user: Participant,
    pub assistant: Participant,
    pub scene: SceneState,
    pub context: Arc<SceneContext>,
    pub created_ms: u64,
    pub ended_ms: Option<u64>,
    pub(crate) log: SessionLog,
    pub(crate) history: DeltaHistory,
    acks: BTreeSet<String>,
    last_seen: BTreeMap<String, u64>,
    replicas: BTreeMap<String, ReplicaStatus>,
    /// Evaluation mode: the agent must answer the last user message by then.
    pub agent_deadline_ms: Option<u64>,
}

impl Session {
    pub fn participants(&self) -> [&Participant; 2] {
        [&self.user, &self.assistant]
    }

    pub fn participant(&self, participant_id: &str) -> Option<&Participant> {
        self.participants()
            .into_iter()
            .find(|p| p.participant_id == participant_id)
    }

    pub fn role_of(&self, participant_id: &str) -> Option<Role> {
        self.participant(participant_id).map(|p| p.role)
    }

    /// The other participant.
    pub fn peer_of(&self, participant_id: &str) -> Option<&Participant> {
        if self.user.participant_id == participant_id {
            Some(&self.assistant)
        } else if self.assistant.participant_id == participant_id {
            Some(&self.user)
        } else {
            None
        }
    }

    pub fn participant_mut(&mut self, participant_id: &str) -> Option<&mut Participant> {
        if self.user.participant_id == participant_id {
            Some(&mut self.user)
        } else if self.assistant.participant_id == participant_id {
            Some(&mut self.assistant)
        } else {
            None
        }
    }

    pub fn has_acked(&self, participant_id: &str) -> bool {
        self.acks.contains(participant_id)
    }

    pub fn all_acked(&self) -> bool {
        self.participants()
            .iter()
            .all(|p| self.acks.contains(&p.participant_id))
    }

    pub fn last_seen(&self, participant_id: &str) -> Option<u64> {
        self.last_seen.get(participant_id).copied()
    }

    pub fn replica_status(&self, participant_id: &str) -> Option<&ReplicaStatus> {
        self.replicas.get(participant_id)
    }

    pub fn log_len(&self) -> u64 {
        self.log.len()
    }

    pub fn is_sealed(&self) -> bool {
        self.log.is_sealed()
    }

    pub(crate) fn note_ack(&mut self, participant_id: &str, version: u64) {
        let version = version.min(self.scene.version);
        if let Some(status) = self.replicas.get_mut(participant_id) {
            status.acked_version = version;
        }
    }

    pub fn touch(&mut self, participant_id: &str, now_ms: u64) {
        if let Some(seen) = self.last_seen.get_mut(participant_id) {
            *seen = (*seen).max(now_ms);
        }
    }

    /// Records the replica version a participant reports.
    pub fn report_replica_version(&mut self, participant_id: &str, version: u64) {
        self.note_ack(participant_id, version);
    }

    fn participant_infos(&self) -> Vec<ParticipantInfo> {
        self.participants()
            .iter()
            .map(|p| ParticipantInfo {
                participant_id: p.participant_id.clone(),
                role: p.role,
            })
            .collect()
    }

    fn append_system(&mut self, now_ms: u64, event: SystemEvent) -> Result<EventRecord, LogError> {
        self.log
            .append_event(now_ms, "server", Event::System(event), &self.scene)
    }

    /// Appends a free-form system note to the log.
    pub fn note(&mut self, now_ms: u64, text: impl Into<String>) -> Result<EventRecord, SessionError> {
        Ok(self.append_system(now_ms, SystemEvent::Note { text: text.into() })?)
    }
}

#[derive(Debug, Clone)]
struct QueueEntry {
    participant: Participant,
    mode: Mode,
}

/// Per `(role, scenario)` FIFO queues of waiting participants.
#[derive(Debug, Default)]
pub struct MatchQueue {
    queues: BTreeMap<(Role, String), VecDeque<QueueEntry>>,
    index: BTreeMap<String, (Role, String)>,
}

impl MatchQueue {
    pub fn contains(&self, participant_id: &str) -> bool {
        self.index.contains_key(participant_id)
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    /// Waiting participant ids for one queue, in arrival order.
    pub fn waiting(&self, role: Role, scenario_id: &str) -> Vec<String> {
        self.queues
            .get(&(role, scenario_id.to_string()))
            .map(|q| q.iter().map(|e| e.participant.participant_id.clone()).collect())
            .unwrap_or_default()
    }

    fn push(&mut self, entry: QueueEntry, scenario_id: &str) -> usize {
        let key = (entry.participant.role, scenario_id.to_string());
        self.index.insert(entry.participant.participant_id.clone(), key.clone());
        let queue = self.queues.entry(key).or_default();
        queue.push_back(entry);
        queue.len()
    }

    fn position_of(&self, role: Role, scenario_id: &str, pred: impl Fn(&QueueEntry) -> bool) -> Option<usize> {
        self.queues
            .get(&(role, scenario_id.to_string()))
            .and_then(|q| q.iter().position(pred))
    }

    fn take(&mut self, role: Role, scenario_id: &str, pos: usize) -> QueueEntry {
        let key = (role, scenario_id.to_string());
        let queue = self.queues.get_mut(&key).expect("queue exists");
        let entry = queue.remove(pos).expect("position valid");
        if queue.is_empty() {
            self.queues.remove(&key);
        }
        self.index.remove(&entry.participant.participant_id);
        entry
    }

    fn remove(&mut self, participant_id: &str) -> Option<QueueEntry> {
        let (role, scenario) = self.index.get(participant_id)?.clone();
        let pos = self.position_of(role, &scenario, |e| e.participant.participant_id == participant_id)?;
        Some(self.take(role, &scenario, pos))
    }
}

#[derive(Debug, Clone)]
pub struct LobbyConfig {
    pub default_topology: Topology,
    pub sync: SyncConfig,
    /// Evaluation-mode response deadline after each user message.
    pub turn_timeout_ms: u64,
    /// Prefix for generated session ids; must make them unique in the log dir.
    pub session_prefix: String,
}

impl Default for LobbyConfig {
    fn default() -> Self {
        LobbyConfig {
            default_topology: Topology::LocalRender,
            sync: SyncConfig::default(),
            turn_timeout_ms: 30_000,
            session_prefix: String::new(),
        }
    }
}

/// Queues, agents and sessions of one server.
pub struct Lobby {
    library: Arc<ScenarioLibrary>,
    store: Box<dyn LogStore>,
    config: LobbyConfig,
    queue: MatchQueue,
    agents: AgentRegistry,
    sessions: BTreeMap<String, Session>,
    /// Human participant id to live session id.
    live: BTreeMap<String, String>,
    next_session: u64,
}

impl Lobby {
    pub fn new(library: Arc<ScenarioLibrary>, store: Box<dyn LogStore>, config: LobbyConfig) -> Self {
        Lobby {
            library,
            store,
            config,
            queue: MatchQueue::default(),
            agents: AgentRegistry::default(),
            sessions: BTreeMap::new(),
            live: BTreeMap::new(),
            next_session: 1,
        }
    }

    pub fn config(&self) -> &LobbyConfig {
        &self.config
    }

    pub fn library(&self) -> &ScenarioLibrary {
        &self.library
    }

    pub fn queue(&self) -> &MatchQueue {
        &self.queue
    }

    pub fn agents(&self) -> &AgentRegistry {
        &self.agents
    }

    pub fn agents_mut(&mut self) -> &mut AgentRegistry {
        &mut self.agents
    }

    pub fn session(&self, session_id: &str) -> Option<&Session> {
        self.sessions.get(session_id)
    }

    pub fn session_mut(&mut self, session_id: &str) -> Option<&mut Session> {
        self.sessions.get_mut(session_id)
    }

    pub fn sessions(&self) -> impl Iterator<Item = &Session> {
        self.sessions.values()
    }

    pub fn sessions_mut(&mut self) -> impl Iterator<Item = &mut Session> {
        self.sessions.values_mut()
    }

    /// Live session of a human participant.
    pub fn live_session_of(&self, participant_id: &str) -> Option<&str> {
        self.live.get(participant_id).map(String::as_str)
    }

    /// Sessions (live or sealed-but-unretired) that `participant_id` is in.
    pub fn sessions_of<'a>(&'a self, participant_id: &'a str) -> impl Iterator<Item = &'a Session> + 'a {
        self.sessions
            .values()
            .filter(move |s| s.participant(participant_id).is_some())
    }

    /// Appends a participant to its `(role, scenario)` queue; returns the
    /// 1-based position.
    pub fn enqueue(&mut self, participant: Participant, scenario_id: &str, mode: Mode) -> Result<usize, SessionError> {
        if !matches!(participant.role, Role::User | Role::Wizard) {
            return Err(SessionError::RoleNotQueueable(participant.role));
        }
        if self.library.get(scenario_id).is_none() {
            return Err(SessionError::UnknownScenario(scenario_id.to_string()));
        }
        if self.queue.contains(&participant.participant_id) {
            return Err(SessionError::AlreadyEnqueued(participant.participant_id));
        }
        if self.live.contains_key(&participant.participant_id) {
            return Err(SessionError::AlreadyInSession(participant.participant_id));
        }
        let mode = if participant.role == Role::Wizard {
            Mode::Collection
        } else {
            mode
        };
        Ok(self.queue.push(QueueEntry { participant, mode }, scenario_id))
    }

    /// Removes a participant from whatever queue holds it.
    pub fn withdraw(&mut self, participant_id: &str) -> bool {
        self.queue.remove(participant_id).is_some()
    }

    /// Updates the connection handle of a queued participant.
    pub fn rebind_queued(&mut self, participant_id: &str, conn: ConnId) {
        for queue in self.queue.queues.values_mut() {
            for entry in queue.iter_mut() {
                if entry.participant.participant_id == participant_id {
                    entry.participant.conn = conn;
                }
            }
        }
    }

    pub fn register_agent(&mut self, registration: AgentRegistration, conn: ConnId) -> Result<(), SessionError> {
        for scenario in &registration.scenario_ids {
            if self.library.get(scenario).is_none() {
                return Err(SessionError::UnknownScenario(scenario.clone()));
            }
        }
        Ok(self.agents.register(registration, conn)?)
    }

    /// Forms a session from the earliest compatible queued pair, if any.
    /// Queues are untouched when no session is formed.
    pub fn try_match(&mut self, scenario_id: &str, mode: Mode, now_ms: u64) -> Result<Option<String>, SessionError> {
        let Some(scenario) = self.library.get(scenario_id).cloned() else {
            return Ok(None);
        };
        let Some(user_pos) = self.queue.position_of(Role::User, scenario_id, |e| e.mode == mode) else {
            return Ok(None);
        };
        let (assistant_pos, agent_id) = match mode {
            Mode::Collection => match self.queue.position_of(Role::Wizard, scenario_id, |_| true) {
                Some(pos) => (Some(pos), None),
                None => return Ok(None),
            },
            Mode::Evaluation => match self.agents.available_for(scenario_id) {
                Some(agent) => (None, Some(agent.to_string())),
                None => return Ok(None),
            },
        };

        let session_id = format!("{}s{:06}", self.config.session_prefix, self.next_session);
        let backend = self
            .store
            .open(&session_id)
            .map_err(|e| LogError::StorageFailure(e.to_string()))?;
        self.next_session += 1;

        let user = self.queue.take(Role::User, scenario_id, user_pos).participant;
        let assistant = match (assistant_pos, agent_id) {
            (Some(pos), _) => self.queue.take(Role::Wizard, scenario_id, pos).participant,
            (None, Some(agent_id)) => {
                let conn = self.agents.claim(&agent_id).expect("agent was available");
                Participant {
                    participant_id: agent_id,
                    role: Role::Agent,
                    conn,
                }
            }
            (None, None) => unreachable!("a match has an assistant"),
        };

        let topology = self.config.default_topology;
        let mut session = Session {
            session_id: session_id.clone(),
            mode,
            scenario_id: scenario_id.to_string(),
            topology,
            phase: Phase::Forming,
            scene: scenario.state.clone(),
            context: Arc::new(scenario.context()),
            created_ms: now_ms,
            ended_ms: None,
            log: SessionLog::new(backend),
            history: DeltaHistory::new(self.config.sync.retention),
            acks: BTreeSet::new(),
            last_seen: [&user, &assistant]
                .iter()
                .map(|p| (p.participant_id.clone(), now_ms))
                .collect(),
            replicas: [&user, &assistant]
                .iter()
                .map(|p| {
                    let status = ReplicaStatus {
                        participant_id: p.participant_id.clone(),
                        acked_version: 0,
                        mode: topology,
                    };
                    (p.participant_id.clone(), status)
                })
                .collect(),
            agent_deadline_ms: None,
            user,
            assistant,
        };
        let created = SystemEvent::SessionCreated {
            session_id: session_id.clone(),
            scenario_id: scenario_id.to_string(),
            mode,
            topology,
            participants: session.participant_infos(),
            initial_digest: session.scene.digest(),
        };
        let logged = session.append_system(now_ms, created);

        for p in session.participants() {
            if p.role != Role::Agent {
                self.live.insert(p.participant_id.clone(), session_id.clone());
            }
        }
        self.sessions.insert(session_id.clone(), session);
        if let Err(e) = logged {
            self.transition(&session_id, Phase::Abandoned, Some("storage_failure"), now_ms)?;
            return Err(e.into());
        }
        Ok(Some(session_id))
    }

    /// Records a participant's session-start acknowledgment.
    pub fn acknowledge(&mut self, session_id: &str, participant_id: &str) -> Result<bool, SessionError> {
        let session = self
            .sessions
            .get_mut(session_id)
            .ok_or_else(|| SessionError::UnknownSession(session_id.to_string()))?;
        if session.participant(participant_id).is_none() {
            return Err(SessionError::NotAParticipant(participant_id.to_string()));
        }
        if session.phase != Phase::Forming {
            return Err(SessionError::IllegalTransition {
                from: session.phase,
                to: Phase::Active,
                detail: Some("session already started".into()),
            });
        }
        session.acks.insert(participant_id.to_string());
        Ok(session.all_acked())
    }

    /// Moves a session along the phase graph. Entering a terminal phase
    /// releases both participants and seals the log; a log that cannot be
    /// written does not block abandonment.
    pub fn transition(
        &mut self,
        session_id: &str,
        to: Phase,
        reason: Option<&str>,
        now_ms: u64,
    ) -> Result<(), SessionError> {
        let session = self
            .sessions
            .get_mut(session_id)
            .ok_or_else(|| SessionError::UnknownSession(session_id.to_string()))?;
        let from = session.phase;
        if !from.can_become(to) {
            return Err(SessionError::IllegalTransition { from, to, detail: None });
        }
        if to == Phase::Active && !session.all_acked() {
            return Err(SessionError::IllegalTransition {
                from,
                to,
                detail: Some("both participants must acknowledge session start".into()),
            });
        }
        let logged = session.append_system(
            now_ms,
            SystemEvent::PhaseChanged {
                from,
                to,
                reason: reason.map(str::to_string),
            },
        );
        let logged = match logged {
            Err(e) if to == Phase::Active => return Err(e.into()),
            other => other,
        };
        session.phase = to;
        if !to.is_terminal() {
            return Ok(());
        }

        session.ended_ms = Some(now_ms);
        session.agent_deadline_ms = None;
        let manifest = SessionManifest {
            session_id: session.session_id.clone(),
            scenario_id: session.scenario_id.clone(),
            mode: session.mode,
            topology: session.topology,
            participants: session.participant_infos(),
            phase: to,
            created_ms: session.created_ms,
            ended_ms: now_ms,
            event_count: session.log.len(),
            final_version: session.scene.version,
            final_digest: session.scene.digest(),
        };
        let sealed = session.log.seal(&manifest);
        for p in session.participants() {
            if p.role == Role::Agent {
                self.agents.release(&p.participant_id);
            } else if self.live.get(&p.participant_id).map(String::as_str) == Some(session_id) {
                self.live.remove(&p.participant_id);
            }
        }
        match (logged, sealed) {
            (Ok(_), Ok(())) => Ok(()),
            (Err(e), _) | (_, Err(e)) => Err(e.into()),
        }
    }

    /// Logs a chat message from `sender`. The caller delivers it to the peer.
    pub fn route_chat(
        &mut self,
        session_id: &str,
        sender: &str,
        text: &str,
        now_ms: u64,
    ) -> Result<EventRecord, SessionError> {
        let turn_timeout = self.config.turn_timeout_ms;
        let session = self
            .sessions
            .get_mut(session_id)
            .ok_or_else(|| SessionError::UnknownSession(session_id.to_string()))?;
        if session.phase != Phase::Active {
            return Err(SessionError::SessionNotActive(session_id.to_string()));
        }
        let role = session
            .role_of(sender)
            .ok_or_else(|| SessionError::NotAParticipant(sender.to_string()))?;
        if text.trim().is_empty() {
            return Err(SessionError::EmptyMessage);
        }
        if text.len() > MAX_MESSAGE_BYTES {
            return Err(SessionError::MessageTooLong(MAX_MESSAGE_BYTES));
        }
        let record = session.log.append_event(
            now_ms,
            sender,
            Event::Message { text: text.to_string() },
            &session.scene,
        )?;
        if session.mode == Mode::Evaluation {
            match role {
                Role::User => session.agent_deadline_ms = Some(now_ms + turn_timeout),
                Role::Agent => session.agent_deadline_ms = None,
                _ => {}
            }
        }
        Ok(record)
    }

    /// Drops sealed sessions from memory; their logs stay on disk.
    pub fn retire_sealed(&mut self) -> Vec<String> {
        let done: Vec<String> = self
            .sessions
            .values()
            .filter(|s| s.phase.is_terminal())
            .map(|s| s.session_id.clone())
            .collect();
        for id in &done {
            self.sessions.remove(id);
        }
        done
    }

    /// Live sessions with a participant silent since before `cutoff_ms`.
    pub fn silent_participants(&self, cutoff_ms: u64) -> Vec<(String, String)> {
        self.sessions
            .values()
            .filter(|s| !s.phase.is_terminal())
            .flat_map(|s| {
                s.participants()
                    .into_iter()
                    .filter(|p| s.last_seen(&p.participant_id).is_some_and(|t| t < cutoff_ms))
                    .map(|p| (s.session_id.clone(), p.participant_id.clone()))
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    /// Evaluation sessions whose agent missed its response deadline.
    pub fn overdue_agents(&self, now_ms: u64) -> Vec<String> {
        self.sessions
            .values()
            .filter(|s| s.phase == Phase::Active && s.agent_deadline_ms.is_some_and(|d| now_ms > d))
            .map(|s| s.session_id.clone())
            .collect()
    }
}
