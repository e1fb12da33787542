//! The published JSON Schema for frame bodies agrees with the codec.

use std::collections::BTreeSet;
use std::sync::Arc;

use jsonschema::{Draft, JSONSchema};
use serde_json::{json, Value};
use wozsim_core::coordinator::{Coordinator, CoordinatorConfig};
use wozsim_core::logging::MemoryStore;
use wozsim_core::protocol::{self, *};
use wozsim_core::scene::{CommandKind, Role, ScenarioLibrary, SceneCommand, Transform};
use wozsim_core::session::{Mode, Phase};
use wozsim_core::sim::{pump, Harness, Human};
use wozsim_core::sync::Topology;

const SCHEMA: &str = include_str!("../../../docs/wire-protocol.schema.json");

fn schema_value() -> Value {
    serde_json::from_str(SCHEMA).unwrap()
}

fn compiled() -> JSONSchema {
    JSONSchema::options()
        .with_draft(Draft::Draft202012)
        .compile(&schema_value())
        .unwrap()
}

fn assert_valid(schema: &JSONSchema, body: &Value) {
    if let Err(errors) = schema.validate(body) {
        let errors: Vec<String> = errors.map(|e| format!("{} at {}", e, e.instance_path)).collect();
        panic!("{body}\n{errors:#?}");
    }
}

#[test]
fn tag_list_matches_codec() {
    let schema = schema_value();
    let listed: BTreeSet<&str> = schema["properties"]["type"]["enum"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    let codec: BTreeSet<&str> = MessageType::ALL.iter().map(|t| t.as_str()).collect();
    assert_eq!(listed, codec);
    for t in MessageType::ALL {
        assert!(
            schema["$defs"].get(t.as_str()).is_some() || t == MessageType::Delta,
            "{t:?} has no payload schema"
        );
    }
}

fn issue(user: &mut Human, h: &mut Harness, sid: &str, kind: CommandKind) {
    user.issue(h, sid, kind, Role::User);
}

fn recorded_session(topology: Topology) -> Vec<Vec<u8>> {
    let mut config = CoordinatorConfig::default();
    config.lobby.default_topology = topology;
    let lib = Arc::new(ScenarioLibrary::builtin());
    let mut h = Harness::new(Coordinator::new(lib, Box::new(MemoryStore::new()), config), 1);
    let mut user = Human::join(&mut h, "user-1", Role::User);
    let mut wizard = Human::join(&mut h, "wizard-1", Role::Wizard);
    h.record(user.conn);
    h.record(wizard.conn);
    wizard.enqueue(&mut h, "shopping", None);
    user.enqueue(&mut h, "shopping", Some(Mode::Collection));
    pump(&mut h, &mut [&mut user, &mut wizard]).unwrap();
    let sid = user.session_id().unwrap();

    user.say(&mut h, &sid, "show me a red sofa");
    for _ in 0..70 {
        issue(
            &mut user,
            &mut h,
            &sid,
            CommandKind::Navigate {
                dx_cells: 1,
                dy_cells: 0,
            },
        );
        issue(&mut user, &mut h, &sid, CommandKind::TurnUser { dyaw_deg: 90 });
    }
    issue(
        &mut user,
        &mut h,
        &sid,
        CommandKind::RemoveObject { object_id: "o1".into() },
    );
    wizard.issue(
        &mut h,
        &sid,
        CommandKind::AddObject {
            item_id: "sofa-01".into(),
            transform: Transform {
                x_mm: 1000,
                y_mm: 1000,
                yaw_deg: 0,
                zoom_pct: 100,
            },
        },
        Role::Wizard,
    );
    wizard.say(&mut h, &sid, "here you go");
    user.ping(&mut h, Some(&sid));
    pump(&mut h, &mut [&mut user, &mut wizard]).unwrap();

    user.send(
        &mut h,
        Some(&sid),
        Payload::ResyncRequest(ResyncRequest { last_good_version: 60 }),
    );
    user.send(
        &mut h,
        Some(&sid),
        Payload::ResyncRequest(ResyncRequest { last_good_version: 0 }),
    );
    pump(&mut h, &mut [&mut user, &mut wizard]).unwrap();
    user.end(&mut h, &sid);
    pump(&mut h, &mut [&mut user, &mut wizard]).unwrap();
    user.send(&mut h, None, Payload::SessionStartAck);
    pump(&mut h, &mut [&mut user, &mut wizard]).unwrap();

    let mut frames = h.recording(user.conn).to_vec();
    frames.extend_from_slice(h.recording(wizard.conn));
    frames
}

#[test]
fn server_frames_conform() {
    let schema = compiled();
    let mut seen = BTreeSet::new();
    for topology in [Topology::LocalRender, Topology::RemoteRender] {
        for frame in recorded_session(topology) {
            let msg = protocol::decode(&frame).unwrap();
            seen.insert(msg.message_type().as_str());
            assert_valid(&schema, &serde_json::from_slice(&frame[4..]).unwrap());
        }
    }
    for tag in [
        "SessionStart",
        "Chat",
        "Delta",
        "Rejection",
        "ResyncBatch",
        "FullState",
        "SessionEnd",
        "Pong",
        "Error",
    ] {
        assert!(seen.contains(tag), "no {tag} frame recorded: {seen:?}");
    }
}

#[test]
fn client_messages_conform() {
    let schema = compiled();
    let cmd = SceneCommand::new(
        CommandKind::SetAttribute {
            object_id: "o1".into(),
            key: "color".into(),
            value: "red".into(),
        },
        Role::Wizard,
    );
    let messages = [
        WireMessage::new(
            1,
            Payload::Hello(Hello {
                participant_id: "u".into(),
                role: Role::User,
            }),
        ),
        WireMessage::new(
            2,
            Payload::EnqueueRequest(EnqueueRequest {
                scenario_id: "shopping".into(),
                mode: Some(Mode::Evaluation),
                position: None,
            }),
        ),
        WireMessage::new(
            3,
            Payload::AgentRegister(AgentRegister {
                agent_id: "a".into(),
                capacity: 2,
                scenario_ids: vec!["shopping".into()],
            }),
        ),
        WireMessage::in_session("s", 4, Payload::SessionStartAck),
        WireMessage::in_session("s", 5, Payload::Chat(Chat::outgoing("hi"))),
        WireMessage::in_session("s", 6, Payload::CommandRequest(CommandRequest { command: cmd })),
        WireMessage::in_session("s", 7, Payload::ResyncRequest(ResyncRequest { last_good_version: 3 })),
        WireMessage::in_session("s", 8, Payload::Ping(Ping { acked_version: Some(3) })),
        WireMessage::in_session(
            "s",
            9,
            Payload::SessionEnd(SessionEnd {
                phase: None,
                reason: None,
            }),
        ),
        WireMessage::in_session(
            "s",
            10,
            Payload::SessionEnd(SessionEnd {
                phase: Some(Phase::Completed),
                reason: Some("done".into()),
            }),
        ),
    ];
    for msg in &messages {
        assert_valid(&schema, &serde_json::from_str(&msg.to_json()).unwrap());
    }
}

#[test]
fn schema_rejects_what_the_codec_rejects() {
    let schema = compiled();
    let bad = [
        json!({"msg_id": 1, "type": "Teleport", "payload": {}}),
        json!({"msg_id": -1, "type": "Ping", "payload": {}}),
        json!({"type": "Ping", "payload": {}}),
        json!({"msg_id": 1, "type": "Ping", "payload": {}, "extra": true}),
        json!({"msg_id": 1, "type": "Hello", "payload": {"participant_id": "u", "role": "admin"}}),
        json!({"msg_id": 1, "type": "Hello", "payload": {"participant_id": "u"}}),
        json!({"msg_id": 1, "type": "CommandRequest", "payload": {"command": {"op": "fly", "issuer_role": "user"}}}),
        json!({"msg_id": 1, "type": "CommandRequest", "payload": {"command": {"op": "navigate", "dx_cells": 1, "issuer_role": "user"}}}),
        json!({"msg_id": 1, "type": "Rejection", "payload": {"in_reply_to": 1, "code": "x", "message": "y"}}),
    ];
    for body in &bad {
        assert!(!schema.is_valid(body), "schema accepted {body}");
        let text = body.to_string();
        let mut frame = (text.len() as u32).to_be_bytes().to_vec();
        frame.extend_from_slice(text.as_bytes());
        assert!(protocol::decode(&frame).is_err(), "codec accepted {body}");
    }
}
