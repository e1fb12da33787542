//! Coordinator behavior driven through the in-process harness.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wozsim_core::agent::{AssistantAction, AssistantPolicy, EchoAgent};
use wozsim_core::coordinator::{Coordinator, CoordinatorConfig, Outbound};
use wozsim_core::logging::{replay, Event, EventKind, EventRecord, MemoryStore, SessionManifest, SystemEvent};
use wozsim_core::protocol::{self, Payload, ResyncRequest, WireMessage};
use wozsim_core::scene::{apply_command, render_snapshot, Catalog, CommandKind, Role, ScenarioLibrary, SceneState};
use wozsim_core::session::{Mode, Phase};
use wozsim_core::sim::{pump, random_command, Actor, Assistant, Harness, Human};
use wozsim_core::sync::Topology;

fn library() -> Arc<ScenarioLibrary> {
    Arc::new(ScenarioLibrary::builtin())
}

fn harness_with(store: &MemoryStore, f: impl FnOnce(&mut CoordinatorConfig)) -> Harness {
    let mut config = CoordinatorConfig::default();
    f(&mut config);
    Harness::new(Coordinator::new(library(), Box::new(store.clone()), config), 1)
}

fn harness(store: &MemoryStore) -> Harness {
    harness_with(store, |_| {})
}

/// Joins a user and a wizard and runs the handshake to an active session.
fn pair(h: &mut Harness) -> (Human, Human, String) {
    let mut user = Human::join(h, "alice", Role::User);
    let mut wizard = Human::join(h, "wendy", Role::Wizard);
    h.record(user.conn);
    h.record(wizard.conn);
    wizard.enqueue(h, "shopping", None);
    user.enqueue(h, "shopping", Some(Mode::Collection));
    pump(h, &mut [&mut user, &mut wizard]).unwrap();
    let sid = user.session_id().expect("session formed");
    assert_eq!(user.core.session(&sid).unwrap().phase, Phase::Active);
    assert_eq!(wizard.core.session(&sid).unwrap().phase, Phase::Active);
    (user, wizard, sid)
}

fn decoded(frames: &[Vec<u8>]) -> Vec<WireMessage> {
    frames.iter().map(|f| protocol::decode(f).unwrap()).collect()
}

fn records(store: &MemoryStore, sid: &str) -> Vec<EventRecord> {
    store
        .log(sid)
        .unwrap()
        .records
        .iter()
        .map(|line| serde_json::from_str(line).unwrap())
        .collect()
}

fn manifest(store: &MemoryStore, sid: &str) -> SessionManifest {
    serde_json::from_str(&store.log(sid).unwrap().manifest.expect("sealed")).unwrap()
}

fn shopping_catalog() -> Catalog {
    library().get("shopping").unwrap().catalog.clone()
}

struct Silent;

impl AssistantPolicy for Silent {
    fn respond(&mut self, _: &str, _: &SceneState, _: &Catalog) -> Vec<AssistantAction> {
        Vec::new()
    }
}

#[test]
fn scripted_collection_session_end_to_end() {
    let store = MemoryStore::new();
    let mut h = harness(&store);
    let (mut user, mut wizard, sid) = pair(&mut h);

    user.say(&mut h, &sid, "hello");
    pump(&mut h, &mut [&mut user, &mut wizard]).unwrap();
    let got = &wizard.core.session(&sid).unwrap().transcript;
    assert_eq!(got.len(), 1);
    assert_eq!(got[0].text, "hello");
    assert_eq!(got[0].from.as_deref(), Some("alice"));
    assert_eq!(got[0].role, Some(Role::User));
    assert_eq!(got[0].scene_version, Some(0));

    user.issue(
        &mut h,
        &sid,
        CommandKind::Navigate {
            dx_cells: 0,
            dy_cells: 1,
        },
        Role::User,
    );
    pump(&mut h, &mut [&mut user, &mut wizard]).unwrap();
    assert_eq!(user.core.session(&sid).unwrap().replica.version(), 1);
    assert_eq!(wizard.core.session(&sid).unwrap().replica.version(), 1);

    // A user attribute edit is refused to the user alone.
    let wizard_frames = h.recording(wizard.conn).len();
    let set_red = CommandKind::SetAttribute {
        object_id: "o0".into(),
        key: "color".into(),
        value: "red".into(),
    };
    user.issue(&mut h, &sid, set_red.clone(), Role::User);
    pump(&mut h, &mut [&mut user, &mut wizard]).unwrap();
    let rejections = &user.core.session(&sid).unwrap().rejections;
    assert_eq!(rejections.len(), 1);
    assert_eq!(rejections[0].code, "permission_denied");
    assert_eq!(rejections[0].current_version, 1);
    assert_eq!(h.recording(wizard.conn).len(), wizard_frames);

    wizard.issue(&mut h, &sid, set_red, Role::Wizard);
    wizard.say(&mut h, &sid, "here it is in red");
    pump(&mut h, &mut [&mut user, &mut wizard]).unwrap();
    let u = user.core.session(&sid).unwrap();
    assert_eq!(u.replica.state().object("o0").unwrap().attributes["color"], "red");
    assert_eq!(u.transcript.last().unwrap().scene_version, Some(2));

    user.end(&mut h, &sid);
    pump(&mut h, &mut [&mut user, &mut wizard]).unwrap();
    for p in [&user, &wizard] {
        let s = p.core.session(&sid).unwrap();
        assert_eq!(s.phase, Phase::Completed);
        assert_eq!(s.end_reason.as_deref(), Some("ended by alice"));
    }

    let recs = records(&store, &sid);
    let m = manifest(&store, &sid);
    assert_eq!(m.phase, Phase::Completed);
    assert_eq!(m.event_count, recs.len() as u64);
    assert_eq!(m.final_version, 2);
    let scenario = library().get("shopping").unwrap().clone();
    let log = store.log(&sid).unwrap();
    let mut load = |r: &str| Ok(log.snapshots[r.trim_start_matches("snapshots/")].clone());
    let out = replay(&scenario, &recs, Some(&mut load)).unwrap();
    assert_eq!(out.final_digest, m.final_digest);
    assert_eq!(out.accepted_commands, 2);
    assert_eq!(out.rejected_commands, 1);
    assert_eq!(out.messages, 2);
    assert_eq!(log.snapshots.len(), 2);
}

#[test]
fn alternating_exchange_logs_one_record_per_message() {
    let store = MemoryStore::new();
    let mut h = harness(&store);
    let (mut user, mut wizard, sid) = pair(&mut h);
    for turn in 0..10 {
        if turn % 2 == 0 {
            user.say(&mut h, &sid, &format!("user turn {turn}"));
            user.issue(&mut h, &sid, CommandKind::TurnUser { dyaw_deg: 15 }, Role::User);
        } else {
            wizard.say(&mut h, &sid, &format!("wizard turn {turn}"));
        }
        pump(&mut h, &mut [&mut user, &mut wizard]).unwrap();
    }
    user.end(&mut h, &sid);
    pump(&mut h, &mut [&mut user, &mut wizard]).unwrap();
    let messages: Vec<EventRecord> = records(&store, &sid)
        .into_iter()
        .filter(|r| r.kind() == EventKind::Message)
        .collect();
    assert_eq!(messages.len(), 10);
    assert!(messages.windows(2).all(|w| w[0].scene_version <= w[1].scene_version));
    assert!(messages.iter().all(|r| r.snapshot_ref.is_some()));
}

#[test]
fn blank_messages_are_refused_and_not_logged() {
    let store = MemoryStore::new();
    let mut h = harness(&store);
    let (mut user, mut wizard, sid) = pair(&mut h);
    let before = store.log(&sid).unwrap().records.len();
    user.say(&mut h, &sid, "  \t ");
    pump(&mut h, &mut [&mut user, &mut wizard]).unwrap();
    assert_eq!(user.core.errors.last().unwrap().code, "empty_message");
    assert!(!user.core.errors.last().unwrap().fatal);
    assert!(wizard.core.session(&sid).unwrap().transcript.is_empty());
    assert_eq!(store.log(&sid).unwrap().records.len(), before);
}

#[test]
fn silent_participant_abandons_the_session_once() {
    let store = MemoryStore::new();
    let mut h = harness(&store);
    let (mut user, mut wizard, sid) = pair(&mut h);
    // The user keeps pinging; the wizard goes quiet.
    for _ in 0..20 {
        user.ping(&mut h, Some(&sid));
        h.advance(5_000);
        pump(&mut h, &mut [&mut user, &mut wizard]).unwrap();
    }
    let ends: Vec<_> = decoded(h.recording(user.conn))
        .into_iter()
        .filter_map(|m| match m.payload {
            Payload::SessionEnd(end) => Some(end),
            _ => None,
        })
        .collect();
    assert_eq!(ends.len(), 1);
    assert_eq!(ends[0].phase, Some(Phase::Abandoned));
    assert_eq!(ends[0].reason.as_deref(), Some("participant wendy silent"));
    assert_eq!(wizard.core.session(&sid).unwrap().phase, Phase::Abandoned);
    assert_eq!(manifest(&store, &sid).phase, Phase::Abandoned);
    // Both are free to queue again.
    assert!(h.coordinator().lobby().live_session_of("alice").is_none());
    assert!(h.coordinator().lobby().live_session_of("wendy").is_none());
}

#[test]
fn closed_socket_alone_does_not_abandon_and_reconnect_resumes() {
    let store = MemoryStore::new();
    let mut h = harness(&store);
    let (mut user, mut wizard, sid) = pair(&mut h);
    user.issue(&mut h, &sid, CommandKind::TurnUser { dyaw_deg: 90 }, Role::User);
    pump(&mut h, &mut [&mut user, &mut wizard]).unwrap();

    h.disconnect(user.conn);
    wizard.issue(
        &mut h,
        &sid,
        CommandKind::FocusItem { object_id: "o2".into() },
        Role::Wizard,
    );
    h.advance(10_000);
    pump(&mut h, &mut [&mut user, &mut wizard]).unwrap();
    assert_eq!(h.coordinator().lobby().session(&sid).unwrap().phase, Phase::Active);

    user.conn = h.connect();
    h.record(user.conn);
    user.core.reset_connection();
    let hello = user.core.message(
        None,
        Payload::Hello(protocol::Hello {
            participant_id: "alice".into(),
            role: Role::User,
        }),
    );
    h.send(user.conn, &hello);
    pump(&mut h, &mut [&mut user, &mut wizard]).unwrap();
    let after: Vec<_> = decoded(h.recording(user.conn))
        .into_iter()
        .map(|m| m.message_type())
        .collect();
    assert_eq!(
        after[..2],
        [protocol::MessageType::Hello, protocol::MessageType::SessionStart]
    );
    let s = user.core.session(&sid).unwrap();
    assert_eq!(s.phase, Phase::Active);
    assert_eq!(s.replica.version(), 2);
    assert_eq!(
        s.replica.digest(),
        h.coordinator().lobby().session(&sid).unwrap().scene.digest()
    );
    user.say(&mut h, &sid, "back again");
    pump(&mut h, &mut [&mut user, &mut wizard]).unwrap();
    assert_eq!(
        wizard.core.session(&sid).unwrap().transcript.last().unwrap().text,
        "back again"
    );
}

#[test]
fn second_hello_supersedes_the_old_connection() {
    let store = MemoryStore::new();
    let mut h = harness(&store);
    let (user, _wizard, _sid) = pair(&mut h);
    let mut other = Human::join(&mut h, "alice", Role::User);
    pump(&mut h, &mut [&mut other]).unwrap();
    let last = decoded(h.recording(user.conn)).pop().unwrap();
    match last.payload {
        Payload::Error(e) => {
            assert_eq!(e.code, "superseded");
            assert!(e.fatal);
        }
        other => panic!("expected superseded error, got {other:?}"),
    }
    assert!(h.is_closed(user.conn));
    assert!(!h.is_closed(other.conn));
    assert!(
        !other.core.sessions.is_empty(),
        "the new connection resumes the session"
    );
}

#[test]
fn every_command_request_gets_exactly_one_answer() {
    for topology in [Topology::LocalRender, Topology::RemoteRender] {
        let store = MemoryStore::new();
        let mut h = harness_with(&store, |c| c.lobby.default_topology = topology);
        let (mut user, mut wizard, sid) = pair(&mut h);
        let catalog = shopping_catalog();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut sent: Vec<(bool, u64)> = Vec::new();
        for _ in 0..300 {
            // Send a burst from both sides before delivering anything.
            for _ in 0..rng.random_range(1..4) {
                let is_user = rng.random_bool(0.5);
                let p = if is_user { &mut user } else { &mut wizard };
                let state = p.core.session(&sid).unwrap().replica.state().clone();
                let cmd = random_command(&mut rng, &state, &catalog, p.role);
                let msg = p.core.command(&sid, cmd);
                sent.push((is_user, msg.msg_id));
                h.send(p.conn, &msg);
            }
            pump(&mut h, &mut [&mut user, &mut wizard]).unwrap();
        }

        for (is_user, conn) in [(true, user.conn), (false, wizard.conn)] {
            let msgs = decoded(h.recording(conn));
            let mut answers: Vec<u64> = msgs
                .iter()
                .filter_map(|m| match &m.payload {
                    Payload::Delta(d) => d.in_reply_to,
                    Payload::Rejection(r) => Some(r.in_reply_to),
                    _ => None,
                })
                .collect();
            answers.sort_unstable();
            let mut expected: Vec<u64> = sent.iter().filter(|(u, _)| *u == is_user).map(|(_, id)| *id).collect();
            expected.sort_unstable();
            assert_eq!(answers, expected, "{topology:?}");
        }

        // Deltas as seen by the user, applied in order, reproduce the
        // authoritative state; remote-render snapshots match the post-state.
        let scenario = library().get("shopping").unwrap().clone();
        let ctx = scenario.context();
        let mut state = scenario.state.clone();
        let mut versions = Vec::new();
        for m in decoded(h.recording(user.conn)) {
            if let Payload::Delta(d) = m.payload {
                state = apply_command(&state, &d.delta.command, &ctx).unwrap();
                assert_eq!(state.digest(), d.delta.post_digest);
                match topology {
                    Topology::RemoteRender => {
                        assert_eq!(d.delta.snapshot.as_deref(), Some(render_snapshot(&state).as_str()))
                    }
                    Topology::LocalRender => assert!(d.delta.snapshot.is_none()),
                }
                versions.push(d.delta.version);
            }
        }
        assert_eq!(versions, (1..=versions.len() as u64).collect::<Vec<_>>());
        let session = h.coordinator().lobby().session(&sid).unwrap();
        assert_eq!(state.digest(), session.scene.digest());
        assert_eq!(
            user.core.session(&sid).unwrap().replica.digest(),
            session.scene.digest()
        );
        assert_eq!(
            wizard.core.session(&sid).unwrap().replica.digest(),
            session.scene.digest()
        );
    }
}

#[test]
fn resync_answers_by_gap_size() {
    let store = MemoryStore::new();
    let mut h = harness(&store);
    let (mut user, mut wizard, sid) = pair(&mut h);
    for i in 0..70 {
        let dyaw = if i % 2 == 0 { 15 } else { -15 };
        user.issue(&mut h, &sid, CommandKind::TurnUser { dyaw_deg: dyaw }, Role::User);
    }
    pump(&mut h, &mut [&mut user, &mut wizard]).unwrap();
    let authoritative = h.coordinator().lobby().session(&sid).unwrap().scene.digest();
    h.take(user.conn);

    let mut ask = |h: &mut Harness, last_good: u64| {
        let payload = Payload::ResyncRequest(ResyncRequest {
            last_good_version: last_good,
        });
        let msg = user.core.message(Some(&sid), payload);
        h.send(user.conn, &msg);
        let frames = h.take(user.conn);
        assert_eq!(frames.len(), 1);
        protocol::decode(&frames[0]).unwrap().payload
    };
    match ask(&mut h, 67) {
        Payload::ResyncBatch(b) => {
            assert_eq!(b.deltas.iter().map(|d| d.version).collect::<Vec<_>>(), [68, 69, 70]);
            assert_eq!(b.deltas.last().unwrap().post_digest, authoritative);
        }
        other => panic!("expected a batch, got {other:?}"),
    }
    match ask(&mut h, 70) {
        Payload::ResyncBatch(b) => assert!(b.deltas.is_empty()),
        other => panic!("expected an empty batch, got {other:?}"),
    }
    match ask(&mut h, 1) {
        Payload::FullState(f) => {
            assert_eq!(f.digest, authoritative);
            assert_eq!(f.state.version, 70);
        }
        other => panic!("expected full state, got {other:?}"),
    }
    match ask(&mut h, 75) {
        Payload::Error(e) => {
            assert_eq!(e.code, "version_ahead");
            assert!(!e.fatal);
        }
        other => panic!("expected version_ahead, got {other:?}"),
    }
}

#[test]
fn agent_missing_its_deadline_abandons_the_session() {
    let store = MemoryStore::new();
    let mut h = harness(&store);
    let mut agent = Assistant::register_agent(&mut h, "mute-bot", &["shopping"], Box::new(Silent));
    let mut user = Human::join(&mut h, "alice", Role::User);
    user.enqueue(&mut h, "shopping", Some(Mode::Evaluation));
    pump(&mut h, &mut [&mut user, &mut agent]).unwrap();
    let sid = user.session_id().unwrap();
    user.say(&mut h, &sid, "show me a sofa");
    for _ in 0..7 {
        h.advance(5_000);
        user.ping(&mut h, Some(&sid));
        let ping = agent.client.core.ping(Some(&sid));
        h.send(agent.conn, &ping);
        pump(&mut h, &mut [&mut user, &mut agent]).unwrap();
    }
    let s = user.core.session(&sid).unwrap();
    assert_eq!(s.phase, Phase::Abandoned);
    assert_eq!(s.end_reason.as_deref(), Some("agent_timeout"));
    let notes: Vec<String> = records(&store, &sid)
        .into_iter()
        .filter_map(|r| match r.event {
            Event::System(SystemEvent::Note { text }) => Some(text),
            _ => None,
        })
        .collect();
    assert_eq!(notes, ["agent mute-bot missed its response deadline"]);
}

#[test]
fn answering_agent_keeps_the_session_alive() {
    let store = MemoryStore::new();
    let mut h = harness(&store);
    let mut agent = Assistant::register_agent(&mut h, "echo-bot", &["shopping"], Box::new(EchoAgent::new()));
    let mut user = Human::join(&mut h, "alice", Role::User);
    user.enqueue(&mut h, "shopping", Some(Mode::Evaluation));
    pump(&mut h, &mut [&mut user, &mut agent]).unwrap();
    let sid = user.session_id().unwrap();
    for i in 0..5 {
        user.say(&mut h, &sid, &format!("message {i}"));
        h.advance(20_000);
        pump(&mut h, &mut [&mut user, &mut agent]).unwrap();
    }
    let s = user.core.session(&sid).unwrap();
    assert_eq!(s.phase, Phase::Active);
    assert_eq!(s.transcript.len(), 5);
    assert_eq!(s.transcript[4].text, "echo: message 4");
    assert_eq!(s.transcript[4].role, Some(Role::Agent));
}

/// Issues Navigate from the assistant seat and returns the rejection with
/// the role name blanked.
fn assistant_navigate_rejection(mode: Mode) -> (String, String, u64) {
    let store = MemoryStore::new();
    let mut h = harness(&store);
    let mut user = Human::join(&mut h, "alice", Role::User);
    let (mut assistant, role) = match mode {
        Mode::Collection => (
            Assistant::join_wizard(&mut h, "seat", "shopping", Box::new(Silent)),
            Role::Wizard,
        ),
        Mode::Evaluation => (
            Assistant::register_agent(&mut h, "seat", &["shopping"], Box::new(Silent)),
            Role::Agent,
        ),
    };
    user.enqueue(&mut h, "shopping", Some(mode));
    pump(&mut h, &mut [&mut user, &mut assistant]).unwrap();
    let sid = user.session_id().unwrap();
    let msg = assistant.client.core.command(
        &sid,
        wozsim_core::scene::SceneCommand::new(
            CommandKind::Navigate {
                dx_cells: 1,
                dy_cells: 0,
            },
            role,
        ),
    );
    h.send(assistant.conn, &msg);
    let user_frames = h.take(user.conn);
    assert!(user_frames.is_empty(), "the user must not see the rejection");
    let frames = h.take(assistant.conn);
    assert_eq!(frames.len(), 1);
    match protocol::decode(&frames[0]).unwrap().payload {
        Payload::Rejection(r) => {
            assert_eq!(r.in_reply_to, msg.msg_id);
            (r.code, r.message.replace(role.as_str(), "ROLE"), r.current_version)
        }
        other => panic!("expected a rejection, got {other:?}"),
    }
}

#[test]
fn agent_navigate_is_refused_like_a_wizard_navigate() {
    let wizard = assistant_navigate_rejection(Mode::Collection);
    let agent = assistant_navigate_rejection(Mode::Evaluation);
    assert_eq!(wizard.0, "permission_denied");
    assert_eq!(agent, wizard);
}

#[test]
fn agent_capacity_bounds_concurrent_sessions() {
    let store = MemoryStore::new();
    let mut h = harness(&store);
    let mut agent = Assistant::register_agent(&mut h, "bot", &["shopping"], Box::new(EchoAgent::new()));
    // Capacity defaults to one; re-register with two on a fresh connection.
    h.disconnect(agent.conn);
    agent.conn = h.connect();
    let reg = Payload::AgentRegister(protocol::AgentRegister {
        agent_id: "bot".into(),
        capacity: 2,
        scenario_ids: vec!["shopping".into()],
    });
    agent.client.core.reset_connection();
    let msg = agent.client.core.message(None, reg);
    h.send(agent.conn, &msg);

    let mut users: Vec<Human> = (0..3)
        .map(|i| {
            let mut u = Human::join(&mut h, &format!("user{i}"), Role::User);
            u.enqueue(&mut h, "shopping", Some(Mode::Evaluation));
            u
        })
        .collect();
    {
        let mut actors: Vec<&mut dyn Actor> = users.iter_mut().map(|u| u as &mut dyn Actor).collect();
        actors.push(&mut agent);
        pump(&mut h, &mut actors).unwrap();
    }
    let started: Vec<bool> = users.iter().map(|u| u.session_id().is_some()).collect();
    assert_eq!(started, [true, true, false]);
    assert_eq!(h.coordinator().lobby().agents().load_of("bot"), Some(2));

    let sid = users[0].session_id().unwrap();
    users[0].end(&mut h, &sid);
    let mut actors: Vec<&mut dyn Actor> = users.iter_mut().map(|u| u as &mut dyn Actor).collect();
    actors.push(&mut agent);
    pump(&mut h, &mut actors).unwrap();
    assert!(users[2].session_id().is_some());
    assert_eq!(h.coordinator().lobby().agents().load_of("bot"), Some(2));
}

#[test]
fn wizard_serves_sequential_sessions() {
    let store = MemoryStore::new();
    let mut h = harness(&store);
    let (mut user, mut wizard, first) = pair(&mut h);
    user.end(&mut h, &first);
    pump(&mut h, &mut [&mut user, &mut wizard]).unwrap();
    let mut second_user = Human::join(&mut h, "bob", Role::User);
    wizard.enqueue(&mut h, "shopping", None);
    second_user.enqueue(&mut h, "shopping", None);
    pump(&mut h, &mut [&mut second_user, &mut wizard]).unwrap();
    let second = second_user.session_id().unwrap();
    assert_ne!(first, second);
    assert_eq!(wizard.core.session(&second).unwrap().phase, Phase::Active);
}

#[test]
fn protocol_violations_close_only_the_offending_connection() {
    let store = MemoryStore::new();
    let mut h = harness(&store);
    let (mut user, mut wizard, sid) = pair(&mut h);

    let ping = |id| {
        protocol::encode(&WireMessage::new(
            id,
            Payload::Ping(protocol::Ping { acked_version: None }),
        ))
    };
    let pong = protocol::encode(&WireMessage::new(1, Payload::Pong(protocol::Pong { version: None })));
    let cases: Vec<(&str, Vec<Vec<u8>>)> = vec![
        ("decode_error", vec![b"\x00\x00\x00\x05{nope".to_vec()]),
        ("unexpected_message", vec![pong]),
        ("msg_id_regression", vec![ping(5), ping(5)]),
    ];
    for (code, frames) in cases {
        let conn = h.connect();
        h.record(conn);
        for f in &frames {
            h.send_bytes(conn, f);
        }
        let last = decoded(h.recording(conn)).pop().expect("an error frame");
        match last.payload {
            Payload::Error(e) => {
                assert_eq!(e.code, code);
                assert!(e.fatal);
                if code == "decode_error" {
                    assert!(e.offset.is_some());
                }
            }
            other => panic!("expected {code}, got {other:?}"),
        }
        assert!(h.is_closed(conn));
        assert!(!h.coordinator().is_open(conn));
    }

    user.say(&mut h, &sid, "still here");
    pump(&mut h, &mut [&mut user, &mut wizard]).unwrap();
    assert_eq!(
        wizard.core.session(&sid).unwrap().transcript.last().unwrap().text,
        "still here"
    );
}

#[test]
fn storage_failure_abandons_and_notifies_both() {
    // Enough writes for creation, activation and one message.
    let store = MemoryStore::failing_after(4);
    let mut h = harness(&store);
    let (mut user, mut wizard, sid) = pair(&mut h);
    user.say(&mut h, &sid, "first");
    user.say(&mut h, &sid, "second");
    pump(&mut h, &mut [&mut user, &mut wizard]).unwrap();
    for p in [&user, &wizard] {
        let s = p.core.session(&sid).unwrap();
        assert_eq!(s.phase, Phase::Abandoned, "{}", p.participant_id);
        assert_eq!(s.end_reason.as_deref(), Some("storage_failure"));
    }
    assert!(h.coordinator().lobby().live_session_of("alice").is_none());
}

#[test]
fn shutdown_abandons_live_sessions() {
    let store = MemoryStore::new();
    let mut coord = Coordinator::new(library(), Box::new(store.clone()), CoordinatorConfig::default());
    let u = coord.open();
    let w = coord.open();
    let hello = |id: &str, role| {
        protocol::encode(&WireMessage::new(
            1,
            Payload::Hello(protocol::Hello {
                participant_id: id.into(),
                role,
            }),
        ))
    };
    let enqueue = protocol::encode(&WireMessage::new(
        2,
        Payload::EnqueueRequest(protocol::EnqueueRequest {
            scenario_id: "shopping".into(),
            mode: None,
            position: None,
        }),
    ));
    coord.handle_frame(u, &hello("u", Role::User), 0);
    coord.handle_frame(w, &hello("w", Role::Wizard), 0);
    coord.handle_frame(u, &enqueue, 0);
    coord.handle_frame(w, &enqueue, 0);
    let sid = coord.lobby().sessions().next().unwrap().session_id.clone();
    let out = coord.shutdown(10);
    let ends = out
        .iter()
        .filter(|o| {
            matches!(o, Outbound::Frame { msg, .. } if matches!(&msg.payload,
                Payload::SessionEnd(e) if e.phase == Some(Phase::Abandoned) && e.reason.as_deref() == Some("server_shutdown")))
        })
        .count();
    assert_eq!(ends, 2);
    assert_eq!(out.iter().filter(|o| matches!(o, Outbound::Close { .. })).count(), 2);
    assert_eq!(coord.lobby().sessions().count(), 0);
    assert_eq!(manifest(&store, &sid).phase, Phase::Abandoned);
}
