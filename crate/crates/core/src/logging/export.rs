//! Dataset export: one line per dialogue turn plus a manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::replay::scenario_of;
use super::{read_events, CommandOutcome, Event, LogError, SystemEvent, EVENTS_FILE, MANIFEST_FILE, SNAPSHOT_DIR};
use crate::scene::{Digest, Role, SceneObject};
use crate::session::{Mode, Phase};
use crate::sync::Topology;

pub const TURNS_FILE: &str = "turns.jsonl";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportTurn {
    pub session_id: String,
    pub turn_index: u64,
    pub speaker_role: Role,
    pub text: String,
    pub scene_version: u64,
    pub layout: Vec<SceneObject>,
    pub snapshot_ref: String,
    pub elapsed_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportManifest {
    pub session_id: String,
    pub scenario_id: String,
    pub mode: Mode,
    pub topology: Topology,
    pub participant_roles: Vec<Role>,
    pub final_phase: Option<Phase>,
    pub turn_count: u64,
    pub final_version: u64,
    pub final_digest: Digest,
}

#[derive(Debug, Clone)]
pub struct ExportSummary {
    pub out_dir: PathBuf,
    pub manifest: ExportManifest,
    pub snapshot_count: usize,
}

/// Exports the sealed session `session_id` found under `log_root` into
/// `out_dir` (`turns.jsonl`, `manifest.json`, `snapshots/`). The output is a
/// pure function of the session's event log.
pub fn export_session(log_root: &Path, session_id: &str, out_dir: &Path) -> Result<ExportSummary, LogError> {
    let dir = log_root.join(session_id);
    if session_id.is_empty() || session_id.contains(['/', '\\']) || !dir.join(EVENTS_FILE).is_file() {
        return Err(LogError::UnknownSession(session_id.to_string()));
    }
    if !dir.join(MANIFEST_FILE).is_file() {
        return Err(LogError::NotSealed(session_id.to_string()));
    }
    let records = read_events(&dir.join(EVENTS_FILE))?;
    let scenario_id = scenario_of(&records)?.to_string();
    let Some(Event::System(SystemEvent::SessionCreated {
        mode,
        topology,
        participants,
        initial_digest,
        ..
    })) = records.first().map(|r| &r.event)
    else {
        unreachable!("scenario_of checked the first record");
    };
    let roles: BTreeMap<&str, Role> = participants
        .iter()
        .map(|p| (p.participant_id.as_str(), p.role))
        .collect();
    let started_ms = records[0].timestamp_ms;

    let mut turns = Vec::new();
    let mut final_version = 0;
    let mut final_digest = *initial_digest;
    let mut final_phase = None;
    for record in &records {
        match &record.event {
            Event::Message { text } => {
                let speaker_role = *roles.get(record.actor.as_str()).ok_or_else(|| {
                    LogError::malformed(
                        format!("seq {}", record.seq),
                        format!("message from non-participant '{}'", record.actor),
                    )
                })?;
                let snapshot_ref = record.snapshot_ref.clone().ok_or_else(|| {
                    LogError::malformed(format!("seq {}", record.seq), "message record without snapshot")
                })?;
                turns.push(ExportTurn {
                    session_id: session_id.to_string(),
                    turn_index: turns.len() as u64,
                    speaker_role,
                    text: text.clone(),
                    scene_version: record.scene_version,
                    layout: record.layout.clone(),
                    snapshot_ref,
                    elapsed_ms: record.timestamp_ms.saturating_sub(started_ms),
                });
            }
            Event::Command {
                outcome: CommandOutcome::Accepted { version, digest },
                ..
            } => {
                final_version = *version;
                final_digest = *digest;
            }
            Event::System(SystemEvent::PhaseChanged { to, .. }) => final_phase = Some(*to),
            _ => {}
        }
    }

    let manifest = ExportManifest {
        session_id: session_id.to_string(),
        scenario_id,
        mode: *mode,
        topology: *topology,
        participant_roles: participants.iter().map(|p| p.role).collect(),
        final_phase,
        turn_count: turns.len() as u64,
        final_version,
        final_digest,
    };

    let snap_out = out_dir.join(SNAPSHOT_DIR);
    fs::create_dir_all(&snap_out).map_err(|e| LogError::io(&snap_out, e))?;
    let mut lines = String::new();
    for turn in &turns {
        lines.push_str(&serde_json::to_string(turn).expect("turns serialize"));
        lines.push('\n');
        let src = dir.join(&turn.snapshot_ref);
        let dst = out_dir.join(&turn.snapshot_ref);
        fs::copy(&src, &dst).map_err(|e| LogError::io(&src, e))?;
    }
    let turns_path = out_dir.join(TURNS_FILE);
    fs::write(&turns_path, lines).map_err(|e| LogError::io(&turns_path, e))?;
    let manifest_path = out_dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    fs::write(&manifest_path, json).map_err(|e| LogError::io(&manifest_path, e))?;

    Ok(ExportSummary {
        out_dir: out_dir.to_path_buf(),
        snapshot_count: turns.len(),
        manifest,
    })
}
