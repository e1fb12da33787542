//! The single writer behind a server: turns inbound frames and clock ticks
//! into session effects and outbound frames. It does no I/O itself; the
//! gateway and the in-process harness move bytes for it.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use crate::agent::AgentRegistration;
use crate::logging::LogStore;
use crate::protocol::{
    self, Chat, DeltaMsg, EnqueueRequest, ErrorMsg, FullState, Hello, Payload, Pong, Rejection, ResyncBatch,
    SessionEnd, SessionStart, WireMessage,
};
use crate::scene::{render_snapshot, Role, ScenarioLibrary, SceneCommand};
use crate::session::{ConnId, Lobby, LobbyConfig, Mode, Participant, Phase, SessionError};
use crate::sync::{resync, submit_command, ResyncPayload, Topology};

#[derive(Debug, Clone)]
pub struct CoordinatorConfig {
    pub lobby: LobbyConfig,
    /// Mode for enqueue requests that do not name one.
    pub default_mode: Mode,
    /// Silence after which a live session is abandoned.
    pub disconnect_timeout_ms: u64,
}

impl Default for CoordinatorConfig {
    fn default() -> Self {
        CoordinatorConfig {
            lobby: LobbyConfig::default(),
            default_mode: Mode::Collection,
            disconnect_timeout_ms: 60_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[allow(clippy::large_enum_variant)]
pub enum Outbound {
    Frame {
        conn: ConnId,
        msg: WireMessage,
    },
    /// Close the connection after flushing its earlier frames.
    Close {
        conn: ConnId,
    },
}

#[derive(Debug, Default)]
struct ConnState {
    human: Option<(String, Role)>,
    agents: BTreeSet<String>,
    last_in: Option<u64>,
    next_out: u64,
}

impl ConnState {
    fn ids(&self) -> impl Iterator<Item = &str> {
        self.human
            .iter()
            .map(|(id, _)| id.as_str())
            .chain(self.agents.iter().map(String::as_str))
    }
}

/// Routes participant traffic to the lobby, sessions and sync.
pub struct Coordinator {
    lobby: Lobby,
    config: CoordinatorConfig,
    conns: BTreeMap<ConnId, ConnState>,
    /// Participant or agent id to the connection it is reachable on.
    bindings: BTreeMap<String, ConnId>,
    next_conn: u64,
    out: Vec<Outbound>,
}

const MAX_PARTICIPANT_ID_BYTES: usize = 64;

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= MAX_PARTICIPANT_ID_BYTES && !id.chars().any(char::is_control)
}

impl Coordinator {
    pub fn new(library: Arc<ScenarioLibrary>, store: Box<dyn LogStore>, config: CoordinatorConfig) -> Self {
        Coordinator {
            lobby: Lobby::new(library, store, config.lobby.clone()),
            config,
            conns: BTreeMap::new(),
            bindings: BTreeMap::new(),
            next_conn: 1,
            out: Vec::new(),
        }
    }

    pub fn lobby(&self) -> &Lobby {
        &self.lobby
    }

    pub fn config(&self) -> &CoordinatorConfig {
        &self.config
    }

    pub fn connection_count(&self) -> usize {
        self.conns.len()
    }

    pub fn is_open(&self, conn: ConnId) -> bool {
        self.conns.contains_key(&conn)
    }

    pub fn open(&mut self) -> ConnId {
        let conn = ConnId(self.next_conn);
        self.next_conn += 1;
        self.conns.insert(
            conn,
            ConnState {
                next_out: 1,
                ..ConnState::default()
            },
        );
        conn
    }

    /// Handles one inbound frame (length prefix included).
    pub fn handle_frame(&mut self, conn: ConnId, bytes: &[u8], now_ms: u64) -> Vec<Outbound> {
        if self.conns.contains_key(&conn) {
            self.touch(conn, now_ms);
            match protocol::decode(bytes) {
                Ok(msg) => self.dispatch(conn, msg, now_ms),
                Err(e) => self.violation(conn, "decode_error", e.to_string(), Some(e.offset() as u64), now_ms),
            }
        }
        std::mem::take(&mut self.out)
    }

    /// The transport closed.
    pub fn close(&mut self, conn: ConnId, now_ms: u64) -> Vec<Outbound> {
        self.drop_conn(conn, now_ms);
        std::mem::take(&mut self.out)
    }

    /// Enforces timeouts and drops finished sessions.
    pub fn tick(&mut self, now_ms: u64) -> Vec<Outbound> {
        let cutoff = now_ms.saturating_sub(self.config.disconnect_timeout_ms);
        let mut silent: BTreeMap<String, String> = BTreeMap::new();
        for (sid, pid) in self.lobby.silent_participants(cutoff) {
            silent.entry(sid).or_insert(pid);
        }
        for (sid, pid) in silent {
            let reason = format!("participant {pid} silent");
            self.end_session(&sid, Phase::Abandoned, &reason, now_ms);
        }
        for sid in self.lobby.overdue_agents(now_ms) {
            let agent = self.lobby.session(&sid).map(|s| s.assistant.participant_id.clone());
            if let (Some(session), Some(agent)) = (self.lobby.session_mut(&sid), agent) {
                let _ = session.note(now_ms, format!("agent {agent} missed its response deadline"));
            }
            self.end_session(&sid, Phase::Abandoned, "agent_timeout", now_ms);
        }
        std::mem::take(&mut self.out)
    }

    /// Abandons every live session, as on server shutdown.
    pub fn shutdown(&mut self, now_ms: u64) -> Vec<Outbound> {
        let live: Vec<String> = self
            .lobby
            .sessions()
            .filter(|s| !s.phase.is_terminal())
            .map(|s| s.session_id.clone())
            .collect();
        for sid in live {
            self.end_session(&sid, Phase::Abandoned, "server_shutdown", now_ms);
        }
        let conns: Vec<ConnId> = self.conns.keys().copied().collect();
        for conn in conns {
            self.out.push(Outbound::Close { conn });
        }
        std::mem::take(&mut self.out)
    }

    fn touch(&mut self, conn: ConnId, now_ms: u64) {
        let Some(state) = self.conns.get(&conn) else { return };
        let ids: Vec<String> = state.ids().map(str::to_string).collect();
        let sessions: Vec<String> = self
            .lobby
            .sessions()
            .filter(|s| ids.iter().any(|id| s.participant(id).is_some()))
            .map(|s| s.session_id.clone())
            .collect();
        for sid in sessions {
            if let Some(session) = self.lobby.session_mut(&sid) {
                for id in &ids {
                    session.touch(id, now_ms);
                }
            }
        }
    }

    fn send(&mut self, conn: ConnId, session_id: Option<&str>, payload: Payload) {
        let Some(state) = self.conns.get_mut(&conn) else { return };
        let msg = WireMessage {
            session_id: session_id.map(str::to_string),
            msg_id: state.next_out,
            payload,
        };
        state.next_out += 1;
        self.out.push(Outbound::Frame { conn, msg });
    }

    fn send_to(&mut self, participant_id: &str, session_id: &str, payload: Payload) {
        if let Some(&conn) = self.bindings.get(participant_id) {
            self.send(conn, Some(session_id), payload);
        }
    }

    fn error(&mut self, conn: ConnId, session_id: Option<&str>, code: &str, message: impl Into<String>) {
        let payload = Payload::Error(ErrorMsg {
            code: code.to_string(),
            message: message.into(),
            offset: None,
            fatal: false,
        });
        self.send(conn, session_id, payload);
    }

    fn session_error(&mut self, conn: ConnId, session_id: Option<&str>, err: &SessionError, now_ms: u64) {
        self.error(conn, session_id, err.code(), err.to_string());
        if let (true, Some(sid)) = (err.is_storage_failure(), session_id) {
            self.end_session(sid, Phase::Abandoned, "storage_failure", now_ms);
        }
    }

    /// Protocol violation: report, close, release.
    fn violation(&mut self, conn: ConnId, code: &str, message: String, offset: Option<u64>, now_ms: u64) {
        let payload = Payload::Error(ErrorMsg {
            code: code.to_string(),
            message,
            offset,
            fatal: true,
        });
        self.send(conn, None, payload);
        self.out.push(Outbound::Close { conn });
        self.drop_conn(conn, now_ms);
    }

    fn drop_conn(&mut self, conn: ConnId, _now_ms: u64) {
        let Some(state) = self.conns.remove(&conn) else { return };
        if let Some((id, _)) = &state.human {
            if self.bindings.get(id) == Some(&conn) {
                self.bindings.remove(id);
                self.lobby.withdraw(id);
            }
        }
        for agent in &state.agents {
            if self.bindings.get(agent) == Some(&conn) {
                self.bindings.remove(agent);
            }
            self.lobby.agents_mut().unregister(agent);
        }
    }

    fn dispatch(&mut self, conn: ConnId, msg: WireMessage, now_ms: u64) {
        let state = self.conns.get_mut(&conn).expect("checked by caller");
        if state.last_in.is_some_and(|last| msg.msg_id <= last) {
            let message = format!(
                "msg_id {} does not follow {}",
                msg.msg_id,
                state.last_in.unwrap_or_default()
            );
            self.violation(conn, "msg_id_regression", message, None, now_ms);
            return;
        }
        state.last_in = Some(msg.msg_id);
        let ty = msg.message_type();
        if ty.is_server_only() {
            let message = format!("{} is sent by the server only", ty.as_str());
            self.violation(conn, "unexpected_message", message, None, now_ms);
            return;
        }

        let sid = msg.session_id.clone();
        let sid = sid.as_deref();
        match msg.payload {
            Payload::Hello(hello) => self.on_hello(conn, hello, now_ms),
            Payload::AgentRegister(reg) => self.on_agent_register(conn, reg, now_ms),
            Payload::EnqueueRequest(req) => self.on_enqueue(conn, req, now_ms),
            Payload::SessionStartAck => self.on_start_ack(conn, sid, now_ms),
            Payload::Chat(chat) => self.on_chat(conn, sid, chat, now_ms),
            Payload::CommandRequest(req) => self.on_command(conn, sid, msg.msg_id, req.command, now_ms),
            Payload::ResyncRequest(req) => self.on_resync(conn, sid, req.last_good_version, now_ms),
            Payload::SessionEnd(_) => self.on_session_end(conn, sid, now_ms),
            Payload::Ping(ping) => self.on_ping(conn, sid, ping.acked_version),
            Payload::Error(_) => {}
            Payload::SessionStart(_)
            | Payload::Delta(_)
            | Payload::Rejection(_)
            | Payload::ResyncBatch(_)
            | Payload::FullState(_)
            | Payload::Pong(_) => unreachable!("server-only tags rejected above"),
        }
    }

    /// The session and participant a session-scoped message refers to.
    fn resolve(&self, conn: ConnId, session_id: Option<&str>) -> Result<(String, String), SessionError> {
        let state = &self.conns[&conn];
        let ids: Vec<&str> = state.ids().collect();
        if ids.is_empty() {
            return Err(SessionError::NotAParticipant(format!("unidentified connection {conn}")));
        }
        let sid = match session_id {
            Some(sid) => sid.to_string(),
            None => match state.human.as_ref().and_then(|(id, _)| self.lobby.live_session_of(id)) {
                Some(sid) => sid.to_string(),
                None => return Err(SessionError::UnknownSession("(none given)".into())),
            },
        };
        let session = self
            .lobby
            .session(&sid)
            .ok_or_else(|| SessionError::UnknownSession(sid.clone()))?;
        let pid = ids
            .into_iter()
            .find(|id| session.participant(id).is_some() && self.bindings.get(*id) == Some(&conn))
            .ok_or_else(|| SessionError::NotAParticipant(ids_label(state)))?;
        Ok((sid, pid.to_string()))
    }

    fn on_hello(&mut self, conn: ConnId, hello: Hello, now_ms: u64) {
        let Hello { participant_id, role } = hello;
        if !valid_id(&participant_id) {
            self.error(
                conn,
                None,
                "invalid_participant_id",
                "participant ids are 1-64 bytes without control characters",
            );
            return;
        }
        if !matches!(role, Role::User | Role::Wizard) {
            self.error(
                conn,
                None,
                "role_not_allowed",
                format!("{role} cannot say Hello; agents use AgentRegister"),
            );
            return;
        }
        let state = &self.conns[&conn];
        if let Some((id, _)) = &state.human {
            if *id != participant_id {
                self.error(
                    conn,
                    None,
                    "already_identified",
                    format!("connection already speaks for {id}"),
                );
                return;
            }
        }
        if self.lobby.agents().is_registered(&participant_id) {
            self.error(
                conn,
                None,
                "id_in_use",
                format!("'{participant_id}' is a registered agent"),
            );
            return;
        }
        let live = self.lobby.live_session_of(&participant_id).map(str::to_string);
        if let Some(sid) = &live {
            let actual = self.lobby.session(sid).and_then(|s| s.role_of(&participant_id));
            if actual != Some(role) {
                self.error(
                    conn,
                    None,
                    "role_mismatch",
                    format!("'{participant_id}' is not a {role} in {sid}"),
                );
                return;
            }
        }

        // A second Hello for the same id takes over from the old connection.
        if let Some(&old) = self.bindings.get(&participant_id) {
            if old != conn {
                let payload = Payload::Error(ErrorMsg {
                    code: "superseded".into(),
                    message: format!("{participant_id} connected elsewhere"),
                    offset: None,
                    fatal: true,
                });
                self.send(old, None, payload);
                self.out.push(Outbound::Close { conn: old });
                if let Some(state) = self.conns.get_mut(&old) {
                    state.human = None;
                }
                self.drop_conn(old, now_ms);
            }
        }
        self.bindings.insert(participant_id.clone(), conn);
        self.conns.get_mut(&conn).expect("open").human = Some((participant_id.clone(), role));
        self.lobby.rebind_queued(&participant_id, conn);

        let ack = Payload::Hello(Hello {
            participant_id: participant_id.clone(),
            role,
        });
        self.send(conn, live.as_deref(), ack);
        if let Some(sid) = live {
            if let Some(session) = self.lobby.session_mut(&sid) {
                if let Some(p) = session.participant_mut(&participant_id) {
                    p.conn = conn;
                }
                session.touch(&participant_id, now_ms);
            }
            self.send_session_start(&sid, &participant_id);
        }
    }

    fn on_agent_register(&mut self, conn: ConnId, reg: protocol::AgentRegister, now_ms: u64) {
        let agent_id = reg.agent_id.clone();
        if !valid_id(&agent_id) {
            self.error(
                conn,
                None,
                "invalid_participant_id",
                "agent ids are 1-64 bytes without control characters",
            );
            return;
        }
        if self.bindings.contains_key(&agent_id) {
            self.error(
                conn,
                None,
                "duplicate_agent_id",
                format!("agent id '{agent_id}' is already registered"),
            );
            return;
        }
        let registration = AgentRegistration {
            agent_id: agent_id.clone(),
            capacity: reg.capacity,
            scenario_ids: reg.scenario_ids.clone(),
        };
        if let Err(e) = self.lobby.register_agent(registration, conn) {
            self.session_error(conn, None, &e, now_ms);
            return;
        }
        self.bindings.insert(agent_id.clone(), conn);
        self.conns.get_mut(&conn).expect("open").agents.insert(agent_id.clone());

        // Re-registration after a dropped connection resumes live sessions.
        let resumed: Vec<String> = self
            .lobby
            .sessions()
            .filter(|s| !s.phase.is_terminal() && s.assistant.participant_id == agent_id)
            .map(|s| s.session_id.clone())
            .collect();
        for sid in &resumed {
            if let Some(session) = self.lobby.session_mut(sid) {
                session.assistant.conn = conn;
                session.touch(&agent_id, now_ms);
            }
            self.lobby.agents_mut().claim(&agent_id);
        }
        self.send(conn, None, Payload::AgentRegister(reg.clone()));
        for sid in resumed {
            self.send_session_start(&sid, &agent_id);
        }
        for scenario in reg.scenario_ids {
            self.match_all(&scenario, Mode::Evaluation, now_ms);
        }
    }

    fn on_enqueue(&mut self, conn: ConnId, req: EnqueueRequest, now_ms: u64) {
        let Some((participant_id, role)) = self.conns[&conn].human.clone() else {
            self.error(conn, None, "not_identified", "send Hello before EnqueueRequest");
            return;
        };
        let mode = req.mode.unwrap_or(self.config.default_mode);
        let participant = Participant {
            participant_id,
            role,
            conn,
        };
        match self.lobby.enqueue(participant, &req.scenario_id, mode) {
            Ok(position) => {
                let ack = Payload::EnqueueRequest(EnqueueRequest {
                    scenario_id: req.scenario_id.clone(),
                    mode: Some(if role == Role::Wizard { Mode::Collection } else { mode }),
                    position: Some(position as u64),
                });
                self.send(conn, None, ack);
                let mode = if role == Role::Wizard { Mode::Collection } else { mode };
                self.match_all(&req.scenario_id, mode, now_ms);
            }
            Err(e) => self.session_error(conn, None, &e, now_ms),
        }
    }

    fn match_all(&mut self, scenario_id: &str, mode: Mode, now_ms: u64) {
        loop {
            match self.lobby.try_match(scenario_id, mode, now_ms) {
                Ok(Some(sid)) => {
                    let ids: Vec<String> = self
                        .lobby
                        .session(&sid)
                        .map(|s| s.participants().iter().map(|p| p.participant_id.clone()).collect())
                        .unwrap_or_default();
                    for id in ids {
                        self.send_session_start(&sid, &id);
                    }
                }
                Ok(None) => return,
                // The failed session was abandoned and its participants released.
                Err(_) => {
                    self.lobby.retire_sealed();
                    return;
                }
            }
        }
    }

    fn send_session_start(&mut self, sid: &str, participant_id: &str) {
        let Some(session) = self.lobby.session(sid) else { return };
        let Some(peer) = session.peer_of(participant_id) else {
            return;
        };
        let start = SessionStart {
            scenario_id: session.scenario_id.clone(),
            topology: session.topology,
            you: participant_id.to_string(),
            peer: peer.participant_id.clone(),
            catalog: session.context.catalog.clone(),
            permissions: session.context.permissions.clone(),
            digest: session.scene.digest(),
            snapshot: (session.topology == Topology::RemoteRender).then(|| render_snapshot(&session.scene)),
            state: session.scene.clone(),
        };
        self.send_to(participant_id, sid, Payload::SessionStart(Box::new(start)));
    }

    fn on_start_ack(&mut self, conn: ConnId, sid: Option<&str>, now_ms: u64) {
        let (sid, pid) = match self.resolve(conn, sid) {
            Ok(r) => r,
            Err(e) => return self.session_error(conn, sid, &e, now_ms),
        };
        let phase = self.lobby.session(&sid).map(|s| s.phase);
        if phase != Some(Phase::Forming) {
            // Acks after a reconnect's SessionStart need no answer.
            return;
        }
        match self.lobby.acknowledge(&sid, &pid) {
            Ok(true) => match self.lobby.transition(&sid, Phase::Active, None, now_ms) {
                Ok(()) => {
                    let ids = self.participant_ids(&sid);
                    for id in ids {
                        self.send_to(&id, &sid, Payload::SessionStartAck);
                    }
                }
                Err(e) => self.session_error(conn, Some(&sid), &e, now_ms),
            },
            Ok(false) => {}
            Err(e) => self.session_error(conn, Some(&sid), &e, now_ms),
        }
    }

    fn participant_ids(&self, sid: &str) -> Vec<String> {
        self.lobby
            .session(sid)
            .map(|s| s.participants().iter().map(|p| p.participant_id.clone()).collect())
            .unwrap_or_default()
    }

    fn on_chat(&mut self, conn: ConnId, sid: Option<&str>, chat: Chat, now_ms: u64) {
        let (sid, pid) = match self.resolve(conn, sid) {
            Ok(r) => r,
            Err(e) => return self.session_error(conn, sid, &e, now_ms),
        };
        match self.lobby.route_chat(&sid, &pid, &chat.text, now_ms) {
            Ok(record) => {
                let session = self.lobby.session(&sid).expect("just routed");
                let role = session.role_of(&pid);
                let peer = session.peer_of(&pid).expect("two participants").participant_id.clone();
                let delivered = Chat {
                    text: chat.text,
                    from: Some(pid),
                    role,
                    scene_version: Some(record.scene_version),
                };
                self.send_to(&peer, &sid, Payload::Chat(delivered));
            }
            Err(e) => self.session_error(conn, Some(&sid), &e, now_ms),
        }
    }

    fn on_command(&mut self, conn: ConnId, sid: Option<&str>, msg_id: u64, command: SceneCommand, now_ms: u64) {
        let reject = |this: &mut Self, sid: Option<&str>, err: &SessionError, version: u64| {
            let payload = Payload::Rejection(Rejection {
                in_reply_to: msg_id,
                code: err.code().to_string(),
                message: err.to_string(),
                current_version: version,
            });
            this.send(conn, sid, payload);
        };
        let (sid, pid) = match self.resolve(conn, sid) {
            Ok(r) => r,
            Err(e) => return reject(self, sid, &e, 0),
        };
        let session = self.lobby.session_mut(&sid).expect("resolved");
        let result = submit_command(session, &pid, command, now_ms);
        let version = session.scene.version;
        match result {
            Ok(delta) => {
                if session.role_of(&pid) == Some(Role::Agent) {
                    session.agent_deadline_ms = None;
                }
                let peer = session.peer_of(&pid).expect("two participants").participant_id.clone();
                let issuer_copy = DeltaMsg {
                    delta: delta.clone(),
                    in_reply_to: Some(msg_id),
                };
                self.send(conn, Some(&sid), Payload::Delta(issuer_copy));
                let peer_copy = DeltaMsg {
                    delta,
                    in_reply_to: None,
                };
                self.send_to(&peer, &sid, Payload::Delta(peer_copy));
            }
            Err(e) => {
                if matches!(e, SessionError::Scene(_)) && session.role_of(&pid) == Some(Role::Agent) {
                    session.agent_deadline_ms = None;
                }
                reject(self, Some(&sid), &e, version);
                if e.is_storage_failure() {
                    self.end_session(&sid, Phase::Abandoned, "storage_failure", now_ms);
                }
            }
        }
    }

    fn on_resync(&mut self, conn: ConnId, sid: Option<&str>, last_good: u64, now_ms: u64) {
        let (sid, pid) = match self.resolve(conn, sid) {
            Ok(r) => r,
            Err(e) => return self.session_error(conn, sid, &e, now_ms),
        };
        let sync = self.config.lobby.sync;
        let session = self.lobby.session_mut(&sid).expect("resolved");
        match resync(session, &pid, last_good, &sync) {
            Ok(ResyncPayload::Batch(deltas)) => {
                self.send(conn, Some(&sid), Payload::ResyncBatch(ResyncBatch { deltas }));
            }
            Ok(ResyncPayload::Full {
                state,
                digest,
                snapshot,
            }) => {
                let full = FullState {
                    state,
                    digest,
                    snapshot,
                };
                self.send(conn, Some(&sid), Payload::FullState(Box::new(full)));
            }
            Err(e) => self.session_error(conn, Some(&sid), &e, now_ms),
        }
    }

    fn on_session_end(&mut self, conn: ConnId, sid: Option<&str>, now_ms: u64) {
        let (sid, pid) = match self.resolve(conn, sid) {
            Ok(r) => r,
            Err(e) => return self.session_error(conn, sid, &e, now_ms),
        };
        let phase = self.lobby.session(&sid).map(|s| s.phase);
        let to = match phase {
            Some(Phase::Active) => Phase::Completed,
            Some(Phase::Forming) => Phase::Abandoned,
            _ => {
                let e = SessionError::SessionNotActive(sid.clone());
                return self.session_error(conn, Some(&sid), &e, now_ms);
            }
        };
        self.end_session(&sid, to, &format!("ended by {pid}"), now_ms);
    }

    fn on_ping(&mut self, conn: ConnId, sid: Option<&str>, acked: Option<u64>) {
        let resolved = self.resolve(conn, sid).ok();
        let version = resolved.as_ref().and_then(|(sid, pid)| {
            let session = self.lobby.session_mut(sid)?;
            if let Some(v) = acked {
                session.report_replica_version(pid, v);
            }
            (!session.phase.is_terminal()).then_some(session.scene.version)
        });
        let sid = resolved.map(|(sid, _)| sid);
        self.send(conn, sid.as_deref(), Payload::Pong(Pong { version }));
    }

    /// Moves a live session to a terminal phase and tells both participants.
    fn end_session(&mut self, sid: &str, to: Phase, reason: &str, now_ms: u64) {
        let Some(session) = self.lobby.session(sid) else { return };
        if session.phase.is_terminal() {
            return;
        }
        let ids = self.participant_ids(sid);
        let scenario = session.scenario_id.clone();
        let evaluation = session.mode == Mode::Evaluation;
        // Seals even when the final records cannot be written.
        let _ = self.lobby.transition(sid, to, Some(reason), now_ms);
        for id in &ids {
            let end = SessionEnd {
                phase: Some(to),
                reason: Some(reason.to_string()),
            };
            self.send_to(id, sid, Payload::SessionEnd(end));
        }
        self.lobby.retire_sealed();
        if evaluation {
            self.match_all(&scenario, Mode::Evaluation, now_ms);
        }
    }
}

fn ids_label(state: &ConnState) -> String {
    state.ids().collect::<Vec<_>>().join(",")
}

impl Outbound {
    pub fn conn(&self) -> ConnId {
        match self {
            Outbound::Frame { conn, .. } | Outbound::Close { conn } => *conn,
        }
    }
}
