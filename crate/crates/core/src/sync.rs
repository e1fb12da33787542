//! Server-authoritative scene replication.
//!
//! Every mutation goes through [`submit_command`], which applies it to the
//! session's authoritative state and yields a [`Delta`] stamped with the new
//! version and post-state digest. Local-render clients hold a [`Replica`]
//! that applies deltas strictly in order and verifies each digest;
//! remote-render clients keep only the latest snapshot in a [`RemoteView`].
//! Any gap or mismatch produces a resync request, answered by [`resync`]
//! with either the missing deltas or the full state.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::logging::{CommandOutcome, Event};
use crate::scene::{apply_command, render_snapshot, Digest, SceneCommand, SceneContext, SceneState};
use crate::session::{Phase, Session, SessionError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    /// The server renders; every delta carries a snapshot.
    RemoteRender,
    /// Clients hold replicas and apply deltas themselves.
    LocalRender,
}

impl std::str::FromStr for Topology {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "remote" | "remote_render" => Ok(Topology::RemoteRender),
            "local" | "local_render" => Ok(Topology::LocalRender),
            other => Err(format!("unknown render topology '{other}' (expected remote or local)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Delta {
    /// Version of the authoritative state after applying `command`.
    pub version: u64,
    pub command: SceneCommand,
    /// Participant whose request produced this delta.
    pub issuer: String,
    pub post_digest: Digest,
    /// Present iff the session uses [`Topology::RemoteRender`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyncConfig {
    /// Gaps larger than this are answered with the full state.
    pub full_state_threshold: u64,
    /// Deltas retained per session for batch resync.
    pub retention: usize,
}

impl Default for SyncConfig {
    fn default() -> Self {
        SyncConfig {
            full_state_threshold: 64,
            retention: 1024,
        }
    }
}

/// Ring buffer of the most recent deltas of one session.
#[derive(Debug, Clone)]
pub struct DeltaHistory {
    capacity: usize,
    deltas: VecDeque<Delta>,
}

impl DeltaHistory {
    pub fn new(capacity: usize) -> Self {
        DeltaHistory {
            capacity: capacity.max(1),
            deltas: VecDeque::new(),
        }
    }

    pub fn push(&mut self, delta: Delta) {
        if self.deltas.len() == self.capacity {
            self.deltas.pop_front();
        }
        self.deltas.push_back(delta);
    }

    /// Deltas with version in `(after, latest]`, if all are still retained.
    pub fn since(&self, after: u64) -> Option<Vec<Delta>> {
        let oldest = self.deltas.front().map_or(after + 1, |d| d.version);
        if oldest > after + 1 {
            return None;
        }
        Some(self.deltas.iter().filter(|d| d.version > after).cloned().collect())
    }

    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }
}

/// What the server tracks about each participant's replica.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplicaStatus {
    pub participant_id: String,
    pub acked_version: u64,
    pub mode: Topology,
}

/// Applies `cmd` from `issuer` to the session's authoritative state.
///
/// Accepted and scene-rejected commands are both logged. Session-level
/// failures (inactive session, outsider, role mismatch) are not.
pub fn submit_command(
    session: &mut Session,
    issuer: &str,
    cmd: SceneCommand,
    now_ms: u64,
) -> Result<Delta, SessionError> {
    if session.phase != Phase::Active {
        return Err(SessionError::SessionNotActive(session.session_id.clone()));
    }
    let role = session
        .role_of(issuer)
        .ok_or_else(|| SessionError::NotAParticipant(issuer.to_string()))?;
    if role != cmd.issuer_role {
        return Err(SessionError::RoleMismatch {
            participant: issuer.to_string(),
            claimed: cmd.issuer_role,
            actual: role,
        });
    }

    match apply_command(&session.scene, &cmd, &session.context) {
        Ok(next) => {
            let post_digest = next.digest();
            let event = Event::Command {
                command: cmd.clone(),
                outcome: CommandOutcome::Accepted {
                    version: next.version,
                    digest: post_digest,
                },
            };
            session.log.append_event(now_ms, issuer, event, &next)?;
            let delta = Delta {
                version: next.version,
                command: cmd,
                issuer: issuer.to_string(),
                post_digest,
                snapshot: (session.topology == Topology::RemoteRender).then(|| render_snapshot(&next)),
            };
            session.scene = next;
            session.history.push(delta.clone());
            Ok(delta)
        }
        Err(err) => {
            let event = Event::Command {
                command: cmd,
                outcome: CommandOutcome::Rejected {
                    code: err.code().to_string(),
                    message: err.to_string(),
                },
            };
            session.log.append_event(now_ms, issuer, event, &session.scene)?;
            Err(SessionError::Scene(err))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ResyncPayload {
    /// Deltas `(last_good_version, authoritative]`, possibly empty.
    Batch(Vec<Delta>),
    Full {
        state: SceneState,
        digest: Digest,
        snapshot: Option<String>,
    },
}

/// Answers a replica that last verified `last_good_version`.
pub fn resync(
    session: &mut Session,
    participant: &str,
    last_good_version: u64,
    config: &SyncConfig,
) -> Result<ResyncPayload, SessionError> {
    if session.phase.is_terminal() {
        return Err(SessionError::SessionNotActive(session.session_id.clone()));
    }
    if session.role_of(participant).is_none() {
        return Err(SessionError::NotAParticipant(participant.to_string()));
    }
    let current = session.scene.version;
    if last_good_version > current {
        return Err(SessionError::VersionAhead {
            claimed: last_good_version,
            authoritative: current,
        });
    }
    session.note_ack(participant, last_good_version);
    let gap = current - last_good_version;
    if gap <= config.full_state_threshold {
        if let Some(batch) = session.history.since(last_good_version) {
            return Ok(ResyncPayload::Batch(batch));
        }
    }
    Ok(ResyncPayload::Full {
        digest: session.scene.digest(),
        snapshot: (session.topology == Topology::RemoteRender).then(|| render_snapshot(&session.scene)),
        state: session.scene.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplicaOutcome {
    Applied,
    /// Already at or past this version; nothing changed.
    Stale,
    /// Gap or divergence: the replica needs everything after this version.
    Resync {
        last_good_version: u64,
    },
}

/// A local-render client's copy of the scene.
#[derive(Debug, Clone)]
pub struct Replica {
    state: SceneState,
    context: SceneContext,
    digest: Digest,
}

impl Replica {
    pub fn new(state: SceneState, context: SceneContext) -> Self {
        Replica {
            digest: state.digest(),
            state,
            context,
        }
    }

    pub fn state(&self) -> &SceneState {
        &self.state
    }

    pub fn version(&self) -> u64 {
        self.state.version
    }

    pub fn digest(&self) -> Digest {
        self.digest
    }

    pub fn verify_and_apply(&mut self, delta: &Delta) -> ReplicaOutcome {
        let version = self.state.version;
        if delta.version <= version {
            return ReplicaOutcome::Stale;
        }
        let resync = ReplicaOutcome::Resync {
            last_good_version: version,
        };
        if delta.version != version + 1 {
            return resync;
        }
        match apply_command(&self.state, &delta.command, &self.context) {
            Ok(next) => {
                let digest = next.digest();
                if digest != delta.post_digest || next.version != delta.version {
                    return resync;
                }
                self.state = next;
                self.digest = digest;
                ReplicaOutcome::Applied
            }
            Err(_) => resync,
        }
    }

    /// Applies a resync batch in order, stopping at the first failure.
    pub fn apply_batch(&mut self, deltas: &[Delta]) -> ReplicaOutcome {
        for delta in deltas {
            if let ReplicaOutcome::Resync { last_good_version } = self.verify_and_apply(delta) {
                return ReplicaOutcome::Resync { last_good_version };
            }
        }
        ReplicaOutcome::Applied
    }

    /// Replaces the replica with a full state after checking its digest and
    /// invariants.
    pub fn apply_full_state(&mut self, state: SceneState, digest: Digest) -> Result<(), String> {
        state.validate().map_err(|e| e.to_string())?;
        let actual = state.digest();
        if actual != digest {
            return Err(format!("full state digest {actual} does not match {digest}"));
        }
        self.state = state;
        self.digest = digest;
        Ok(())
    }
}

/// A remote-render client's view: the latest snapshot and its version.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RemoteView {
    pub version: u64,
    pub digest: Digest,
    pub snapshot: String,
}

impl RemoteView {
    pub fn accept(&mut self, delta: &Delta) -> ReplicaOutcome {
        if delta.version <= self.version {
            return ReplicaOutcome::Stale;
        }
        match &delta.snapshot {
            Some(snapshot) if delta.version == self.version + 1 => {
                self.version = delta.version;
                self.digest = delta.post_digest;
                self.snapshot = snapshot.clone();
                ReplicaOutcome::Applied
            }
            _ => ReplicaOutcome::Resync {
                last_good_version: self.version,
            },
        }
    }

    pub fn accept_batch(&mut self, deltas: &[Delta]) -> ReplicaOutcome {
        for delta in deltas {
            if let r @ ReplicaOutcome::Resync { .. } = self.accept(delta) {
                return r;
            }
        }
        ReplicaOutcome::Applied
    }
}
