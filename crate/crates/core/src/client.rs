//! Client side of the wire protocol without I/O: keeps verified replicas,
//! acknowledges session starts and asks for resyncs on its own. Used by
//! the harness, the bundled agent runner and tests.

use std::collections::BTreeMap;

use crate::agent::{as_command, AssistantAction, AssistantPolicy};
use crate::protocol::{
    self, Chat, CommandRequest, ErrorMsg, Payload, Ping, Rejection, ResyncRequest, SessionStart, WireMessage,
};
use crate::scene::{Catalog, Role, SceneCommand, SceneContext};
use crate::session::Phase;
use crate::sync::{RemoteView, Replica, ReplicaOutcome, Topology};

/// One session as seen from one participant.
#[derive(Debug, Clone)]
pub struct ClientSession {
    pub session_id: String,
    pub you: String,
    pub peer: String,
    pub topology: Topology,
    pub phase: Phase,
    pub end_reason: Option<String>,
    pub replica: Replica,
    /// Remote-render topology only.
    pub view: Option<RemoteView>,
    pub catalog: Catalog,
    pub transcript: Vec<Chat>,
    pub rejections: Vec<Rejection>,
    awaiting_resync: bool,
}

impl ClientSession {
    fn from_start(session_id: &str, start: SessionStart) -> Result<Self, String> {
        let SessionStart {
            topology,
            you,
            peer,
            catalog,
            permissions,
            state,
            digest,
            snapshot,
            ..
        } = start;
        let context = SceneContext {
            catalog: catalog.clone(),
            permissions,
        };
        let mut replica = Replica::new(state.clone(), context);
        replica.apply_full_state(state.clone(), digest)?;
        let view = match (topology, snapshot) {
            (Topology::RemoteRender, Some(snapshot)) => Some(RemoteView {
                version: state.version,
                digest,
                snapshot,
            }),
            (Topology::RemoteRender, None) => return Err("remote-render session start without snapshot".into()),
            (Topology::LocalRender, _) => None,
        };
        Ok(ClientSession {
            session_id: session_id.to_string(),
            you,
            peer,
            topology,
            phase: Phase::Forming,
            end_reason: None,
            replica,
            view,
            catalog,
            transcript: Vec::new(),
            rejections: Vec::new(),
            awaiting_resync: false,
        })
    }

    /// Version shown to the participant: the replica, or the remote view.
    pub fn displayed_version(&self) -> u64 {
        match &self.view {
            Some(view) => view.version,
            None => self.replica.version(),
        }
    }

    fn last_good(&self) -> u64 {
        self.displayed_version().min(self.replica.version())
    }
}

/// Protocol state of one connection.
#[derive(Debug, Clone, Default)]
pub struct ClientCore {
    next_msg_id: u64,
    last_in: Option<u64>,
    pub sessions: BTreeMap<String, ClientSession>,
    pub errors: Vec<ErrorMsg>,
    /// Inbound msg_ids that skipped ahead, i.e. frames lost in transit.
    pub gaps: u64,
    pub queue_position: Option<u64>,
}

impl ClientCore {
    pub fn new() -> Self {
        ClientCore {
            next_msg_id: 1,
            ..Default::default()
        }
    }

    pub fn message(&mut self, session_id: Option<&str>, payload: Payload) -> WireMessage {
        let msg = WireMessage {
            session_id: session_id.map(str::to_string),
            msg_id: self.next_msg_id,
            payload,
        };
        self.next_msg_id += 1;
        msg
    }

    /// Starts over on a fresh connection: msg_ids restart, sessions stay.
    pub fn reset_connection(&mut self) {
        self.next_msg_id = 1;
        self.last_in = None;
    }

    pub fn session(&self, session_id: &str) -> Option<&ClientSession> {
        self.sessions.get(session_id)
    }

    /// An active session if there is one, else the latest by id.
    pub fn current(&self) -> Option<&ClientSession> {
        self.sessions
            .values()
            .max_by_key(|s| (s.phase == Phase::Active, s.session_id.clone()))
    }

    pub fn chat(&mut self, session_id: &str, text: &str) -> WireMessage {
        self.message(Some(session_id), Payload::Chat(Chat::outgoing(text)))
    }

    pub fn command(&mut self, session_id: &str, command: SceneCommand) -> WireMessage {
        self.message(Some(session_id), Payload::CommandRequest(CommandRequest { command }))
    }

    /// A keepalive that also reports the replica version, which lets the
    /// server's Pong reveal missed deltas.
    pub fn ping(&mut self, session_id: Option<&str>) -> WireMessage {
        let acked_version = session_id.and_then(|sid| self.sessions.get(sid)).map(|s| s.last_good());
        self.message(session_id, Payload::Ping(Ping { acked_version }))
    }

    fn resync_request(&mut self, session_id: &str) -> Option<WireMessage> {
        let session = self.sessions.get_mut(session_id)?;
        session.awaiting_resync = true;
        let last_good_version = session.last_good();
        Some(self.message(
            Some(session_id),
            Payload::ResyncRequest(ResyncRequest { last_good_version }),
        ))
    }

    /// Applies an inbound message and returns the automatic replies.
    pub fn handle(&mut self, msg: &WireMessage) -> Vec<WireMessage> {
        if let Some(last) = self.last_in {
            if msg.msg_id > last + 1 {
                self.gaps += 1;
            }
        }
        self.last_in = Some(msg.msg_id);
        let sid = msg.session_id.as_deref();
        let mut replies = Vec::new();
        match (&msg.payload, sid) {
            (Payload::SessionStart(start), Some(sid)) => match ClientSession::from_start(sid, (**start).clone()) {
                Ok(mut session) => {
                    // A repeated SessionStart after reconnecting keeps the transcript.
                    if let Some(old) = self.sessions.remove(sid) {
                        session.transcript = old.transcript;
                        session.rejections = old.rejections;
                        session.phase = old.phase;
                    }
                    self.sessions.insert(sid.to_string(), session);
                    replies.push(self.message(Some(sid), Payload::SessionStartAck));
                }
                Err(message) => self.errors.push(ErrorMsg {
                    code: "bad_session_start".into(),
                    message,
                    offset: None,
                    fatal: false,
                }),
            },
            (Payload::SessionStartAck, Some(sid)) => {
                if let Some(s) = self.sessions.get_mut(sid) {
                    s.phase = Phase::Active;
                }
            }
            (Payload::Delta(d), Some(sid)) => {
                let Some(s) = self.sessions.get_mut(sid) else {
                    return replies;
                };
                let mut outcome = s.replica.verify_and_apply(&d.delta);
                if let Some(view) = &mut s.view {
                    if let r @ ReplicaOutcome::Resync { .. } = view.accept(&d.delta) {
                        outcome = r;
                    }
                }
                if matches!(outcome, ReplicaOutcome::Resync { .. }) && !s.awaiting_resync {
                    replies.extend(self.resync_request(sid));
                }
            }
            (Payload::ResyncBatch(batch), Some(sid)) => {
                let Some(s) = self.sessions.get_mut(sid) else {
                    return replies;
                };
                s.awaiting_resync = false;
                let mut outcome = s.replica.apply_batch(&batch.deltas);
                if let Some(view) = &mut s.view {
                    if let r @ ReplicaOutcome::Resync { .. } = view.accept_batch(&batch.deltas) {
                        outcome = r;
                    }
                }
                if matches!(outcome, ReplicaOutcome::Resync { .. }) {
                    replies.extend(self.resync_request(sid));
                }
            }
            (Payload::FullState(full), Some(sid)) => {
                let Some(s) = self.sessions.get_mut(sid) else {
                    return replies;
                };
                s.awaiting_resync = false;
                if s.replica.apply_full_state(full.state.clone(), full.digest).is_err() {
                    replies.extend(self.resync_request(sid));
                } else if let (Some(view), Some(snapshot)) = (&mut s.view, &full.snapshot) {
                    *view = RemoteView {
                        version: full.state.version,
                        digest: full.digest,
                        snapshot: snapshot.clone(),
                    };
                }
            }
            (Payload::Pong(pong), Some(sid)) => {
                let behind = self
                    .sessions
                    .get(sid)
                    .zip(pong.version)
                    .is_some_and(|(s, v)| v > s.last_good() && s.phase != Phase::Completed);
                if behind {
                    replies.extend(self.resync_request(sid));
                }
            }
            (Payload::Chat(chat), Some(sid)) => {
                if let Some(s) = self.sessions.get_mut(sid) {
                    s.transcript.push(chat.clone());
                }
            }
            (Payload::Rejection(r), Some(sid)) => {
                if let Some(s) = self.sessions.get_mut(sid) {
                    s.rejections.push(r.clone());
                }
            }
            (Payload::SessionEnd(end), Some(sid)) => {
                if let Some(s) = self.sessions.get_mut(sid) {
                    s.phase = end.phase.unwrap_or(Phase::Completed);
                    s.end_reason = end.reason.clone();
                }
            }
            (Payload::EnqueueRequest(req), _) => self.queue_position = req.position,
            (Payload::Error(e), _) => self.errors.push(e.clone()),
            _ => {}
        }
        replies
    }

    /// Decodes and handles one frame.
    pub fn handle_frame(&mut self, bytes: &[u8]) -> Result<(WireMessage, Vec<WireMessage>), protocol::DecodeError> {
        let msg = protocol::decode(bytes)?;
        let replies = self.handle(&msg);
        Ok((msg, replies))
    }
}

/// Occupies the assistant seat: answers each user chat through a policy.
pub struct AssistantClient {
    pub core: ClientCore,
    pub role: Role,
    policy: Box<dyn AssistantPolicy>,
}

impl AssistantClient {
    /// `role` is `Wizard` for a scripted human stand-in, `Agent` otherwise.
    pub fn new(role: Role, policy: Box<dyn AssistantPolicy>) -> Self {
        AssistantClient {
            core: ClientCore::new(),
            role,
            policy,
        }
    }

    pub fn handle(&mut self, msg: &WireMessage) -> Vec<WireMessage> {
        let mut replies = self.core.handle(msg);
        let (Payload::Chat(chat), Some(sid)) = (&msg.payload, msg.session_id.as_deref()) else {
            return replies;
        };
        if chat.role != Some(Role::User) {
            return replies;
        }
        let Some(session) = self.core.sessions.get(sid) else {
            return replies;
        };
        if session.phase != Phase::Active {
            return replies;
        }
        let actions = self
            .policy
            .respond(&chat.text, session.replica.state(), &session.catalog);
        for action in actions {
            let reply = match action {
                AssistantAction::Say(text) => self.core.chat(sid, &text),
                AssistantAction::Command(kind) => self.core.command(sid, as_command(kind, self.role)),
            };
            replies.push(reply);
        }
        replies
    }
}
