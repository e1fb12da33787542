use std::fs;
use std::path::Path;

use super::{read_manifest, CommandOutcome, Event, EventKind, EventRecord, LogError, SystemEvent, EVENTS_FILE};
use crate::scene::{apply_command, render_snapshot, Digest, LoadedScenario, ScenarioLibrary, SceneState};

/// Result of re-applying a log to its scenario.
#[derive(Debug, Clone)]
pub struct ReplayOutcome {
    pub final_state: SceneState,
    pub final_digest: Digest,
    pub accepted_commands: u64,
    pub rejected_commands: u64,
    pub messages: u64,
}

/// Parses `events.jsonl`.
pub fn read_events(path: &Path) -> Result<Vec<EventRecord>, LogError> {
    let text = fs::read_to_string(path).map_err(|e| LogError::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line)
                .map_err(|e| LogError::malformed(format!("{EVENTS_FILE} line {}", i + 1), e.to_string()))
        })
        .collect()
}

/// Loads the SVG text behind a `snapshot_ref`.
pub type SnapshotLoader<'a> = dyn FnMut(&str) -> Result<String, LogError> + 'a;

/// Re-applies every command in seq order from the scenario's initial state,
/// checking each record against the replayed state. `snapshot` loads the
/// bytes behind a record's `snapshot_ref`; pass `None` to skip snapshot checks.
pub fn replay(
    scenario: &LoadedScenario,
    records: &[EventRecord],
    mut snapshot: Option<&mut SnapshotLoader<'_>>,
) -> Result<ReplayOutcome, LogError> {
    let ctx = scenario.context();
    let mut state = scenario.state.clone();
    let mut out = ReplayOutcome {
        final_digest: state.digest(),
        final_state: state.clone(),
        accepted_commands: 0,
        rejected_commands: 0,
        messages: 0,
    };

    for (i, record) in records.iter().enumerate() {
        let expected_seq = i as u64 + 1;
        if record.seq != expected_seq {
            return Err(LogError::malformed(
                format!("record {}", i + 1),
                format!("seq gap: expected {expected_seq}, found {}", record.seq),
            ));
        }
        let seq = record.seq;
        match &record.event {
            Event::Command { command, outcome } => {
                let result = apply_command(&state, command, &ctx);
                match (outcome, result) {
                    (CommandOutcome::Accepted { version, digest }, Ok(next)) => {
                        let actual = next.digest();
                        if next.version != *version || actual != *digest {
                            return Err(LogError::DigestMismatch {
                                location: format!("seq {seq}"),
                                expected: *digest,
                                actual,
                            });
                        }
                        state = next;
                        out.accepted_commands += 1;
                    }
                    (CommandOutcome::Rejected { code, .. }, Err(e)) => {
                        if e.code() != code {
                            return Err(LogError::OutcomeMismatch {
                                seq,
                                message: format!("logged '{code}', replay gave '{}'", e.code()),
                            });
                        }
                        out.rejected_commands += 1;
                    }
                    (CommandOutcome::Accepted { .. }, Err(e)) => {
                        return Err(LogError::OutcomeMismatch {
                            seq,
                            message: format!("logged accepted, replay rejected with '{}'", e.code()),
                        })
                    }
                    (CommandOutcome::Rejected { code, .. }, Ok(_)) => {
                        return Err(LogError::OutcomeMismatch {
                            seq,
                            message: format!("logged '{code}', replay accepted"),
                        })
                    }
                }
            }
            Event::System(SystemEvent::SessionCreated {
                scenario_id,
                initial_digest,
                ..
            }) => {
                if scenario_id != &scenario.scenario_id {
                    return Err(LogError::malformed(
                        format!("seq {seq}"),
                        format!("log is for scenario '{scenario_id}', not '{}'", scenario.scenario_id),
                    ));
                }
                let actual = state.digest();
                if *initial_digest != actual {
                    return Err(LogError::DigestMismatch {
                        location: format!("seq {seq} (initial state)"),
                        expected: *initial_digest,
                        actual,
                    });
                }
            }
            Event::Message { .. } => out.messages += 1,
            Event::System(_) => {}
        }

        if record.scene_version != state.version {
            return Err(LogError::malformed(
                format!("seq {seq}"),
                format!(
                    "scene_version {} but replayed state is at {}",
                    record.scene_version, state.version
                ),
            ));
        }
        if record.layout != state.objects {
            return Err(LogError::malformed(
                format!("seq {seq}"),
                "layout differs from the replayed state",
            ));
        }
        match (&record.snapshot_ref, record.kind()) {
            (Some(r), EventKind::Message) => {
                if let Some(load) = snapshot.as_mut() {
                    let bytes = load(r)?;
                    if bytes != render_snapshot(&state) {
                        return Err(LogError::SnapshotMismatch {
                            seq,
                            message: format!("{r} differs from a re-render of version {}", state.version),
                        });
                    }
                }
            }
            (None, EventKind::Message) => {
                return Err(LogError::malformed(
                    format!("seq {seq}"),
                    "message record without snapshot",
                ))
            }
            (Some(_), _) => {
                return Err(LogError::malformed(
                    format!("seq {seq}"),
                    "snapshot on a non-message record",
                ))
            }
            (None, _) => {}
        }
    }

    out.final_digest = state.digest();
    out.final_state = state;
    Ok(out)
}

/// Everything checked about one sealed session directory.
#[derive(Debug, Clone)]
pub struct SessionVerification {
    pub session_id: String,
    pub event_count: u64,
    pub final_version: u64,
    pub final_digest: Digest,
    pub accepted_commands: u64,
    pub rejected_commands: u64,
    pub messages: u64,
}

pub(crate) fn scenario_of(records: &[EventRecord]) -> Result<&str, LogError> {
    match records.first().map(|r| &r.event) {
        Some(Event::System(SystemEvent::SessionCreated { scenario_id, .. })) => Ok(scenario_id),
        _ => Err(LogError::malformed("seq 1", "log does not start with session_created")),
    }
}

/// Replays a sealed session directory and checks it against its manifest:
/// gapless seqs, one accepted command per version, byte-identical snapshots
/// and the manifest's final version and digest.
pub fn verify_session_dir(dir: &Path, library: &ScenarioLibrary) -> Result<SessionVerification, LogError> {
    let manifest = read_manifest(dir)?;
    let records = read_events(&dir.join(EVENTS_FILE))?;
    let scenario_id = scenario_of(&records)?;
    let scenario = library
        .get(scenario_id)
        .ok_or_else(|| LogError::UnknownScenario(scenario_id.to_string()))?;
    let mut load = |r: &str| {
        let path = dir.join(r);
        fs::read_to_string(&path).map_err(|e| LogError::io(&path, e))
    };
    let outcome = replay(scenario, &records, Some(&mut load))?;
    if outcome.final_digest != manifest.final_digest {
        return Err(LogError::DigestMismatch {
            location: "manifest".into(),
            expected: manifest.final_digest,
            actual: outcome.final_digest,
        });
    }
    if outcome.final_state.version != manifest.final_version || outcome.accepted_commands != manifest.final_version {
        return Err(LogError::malformed(
            "manifest",
            format!(
                "final_version {} but {} accepted commands replayed",
                manifest.final_version, outcome.accepted_commands
            ),
        ));
    }
    if manifest.event_count != records.len() as u64 {
        return Err(LogError::malformed(
            "manifest",
            format!("event_count {} but {} records", manifest.event_count, records.len()),
        ));
    }
    Ok(SessionVerification {
        session_id: manifest.session_id,
        event_count: records.len() as u64,
        final_version: outcome.final_state.version,
        final_digest: outcome.final_digest,
        accepted_commands: outcome.accepted_commands,
        rejected_commands: outcome.rejected_commands,
        messages: outcome.messages,
    })
}
