//! Deterministic in-process harness: a coordinator, scripted or seeded
//! clients, a virtual clock and optional frame loss and reconnects. Every
//! byte goes through the real codec, so runs exercise the wire protocol.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use crate::agent::{AssistantPolicy, EchoAgent};
use crate::client::{AssistantClient, ClientCore};
use crate::coordinator::{Coordinator, CoordinatorConfig, Outbound};
use crate::logging::LogStore;
use crate::protocol::{self, AgentRegister, EnqueueRequest, Hello, Payload, SessionEnd, WireMessage};
use crate::scene::{
    Catalog, CommandKind, Digest, Role, ScenarioLibrary, SceneCommand, SceneState, Transform, PATTERNS,
};
use crate::session::{ConnId, Mode};
use crate::sync::Topology;

/// Faults applied to server-to-client traffic. Frames are never reordered.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaultPlan {
    /// Probability that a frame is lost.
    pub drop_rate: f64,
    /// Probability, per scripted step, that the acting client reconnects.
    pub reconnect_rate: f64,
}

impl FaultPlan {
    pub const NONE: FaultPlan = FaultPlan {
        drop_rate: 0.0,
        reconnect_rate: 0.0,
    };
}

/// Moves frames between a coordinator and in-process clients.
pub struct Harness {
    coord: Coordinator,
    now_ms: u64,
    inbox: BTreeMap<ConnId, VecDeque<Vec<u8>>>,
    closed: BTreeSet<ConnId>,
    recorded: BTreeMap<ConnId, Vec<Vec<u8>>>,
    faults: FaultPlan,
    rng: ChaCha8Rng,
    pub dropped_frames: u64,
}

impl Harness {
    pub fn new(coord: Coordinator, seed: u64) -> Self {
        Harness {
            coord,
            now_ms: 1_000,
            inbox: BTreeMap::new(),
            closed: BTreeSet::new(),
            recorded: BTreeMap::new(),
            faults: FaultPlan::NONE,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_fa17),
            dropped_frames: 0,
        }
    }

    pub fn coordinator(&self) -> &Coordinator {
        &self.coord
    }

    pub fn now(&self) -> u64 {
        self.now_ms
    }

    pub fn set_faults(&mut self, faults: FaultPlan) {
        self.faults = faults;
    }

    pub fn connect(&mut self) -> ConnId {
        let conn = self.coord.open();
        self.inbox.insert(conn, VecDeque::new());
        conn
    }

    /// Client-side close.
    pub fn disconnect(&mut self, conn: ConnId) {
        self.closed.insert(conn);
        self.inbox.remove(&conn);
        let out = self.coord.close(conn, self.now_ms);
        self.route(out);
    }

    /// Keeps a copy of every frame delivered to `conn`.
    pub fn record(&mut self, conn: ConnId) {
        self.recorded.entry(conn).or_default();
    }

    pub fn recording(&self, conn: ConnId) -> &[Vec<u8>] {
        self.recorded.get(&conn).map(Vec::as_slice).unwrap_or_default()
    }

    pub fn is_closed(&self, conn: ConnId) -> bool {
        self.closed.contains(&conn)
    }

    pub fn send(&mut self, conn: ConnId, msg: &WireMessage) {
        self.send_bytes(conn, &protocol::encode(msg));
    }

    pub fn send_bytes(&mut self, conn: ConnId, bytes: &[u8]) {
        if self.closed.contains(&conn) {
            return;
        }
        let out = self.coord.handle_frame(conn, bytes, self.now_ms);
        self.route(out);
    }

    /// Advances the clock and runs the coordinator's timers.
    pub fn advance(&mut self, ms: u64) {
        self.now_ms += ms;
        let out = self.coord.tick(self.now_ms);
        self.route(out);
    }

    /// Frames waiting for `conn`, oldest first.
    pub fn take(&mut self, conn: ConnId) -> Vec<Vec<u8>> {
        self.inbox
            .get_mut(&conn)
            .map(|q| q.drain(..).collect())
            .unwrap_or_default()
    }

    fn route(&mut self, out: Vec<Outbound>) {
        for o in out {
            match o {
                Outbound::Frame { conn, msg } => {
                    if self.faults.drop_rate > 0.0 && self.rng.random_bool(self.faults.drop_rate) {
                        self.dropped_frames += 1;
                        continue;
                    }
                    let bytes = protocol::encode(&msg);
                    if let Some(rec) = self.recorded.get_mut(&conn) {
                        rec.push(bytes.clone());
                    }
                    if let Some(q) = self.inbox.get_mut(&conn) {
                        q.push_back(bytes);
                    }
                }
                Outbound::Close { conn } => {
                    self.closed.insert(conn);
                }
            }
        }
    }
}

/// A harness client: reacts to inbound messages with replies.
pub trait Actor {
    fn conn(&self) -> ConnId;
    fn on_message(&mut self, msg: &WireMessage) -> Vec<WireMessage>;
}

/// A human participant (user or wizard) driven by the test.
pub struct Human {
    pub participant_id: String,
    pub role: Role,
    pub conn: ConnId,
    pub core: ClientCore,
    pub reconnects: u64,
}

impl Human {
    /// Connects and says Hello.
    pub fn join(h: &mut Harness, participant_id: &str, role: Role) -> Human {
        let mut human = Human {
            participant_id: participant_id.to_string(),
            role,
            conn: h.connect(),
            core: ClientCore::new(),
            reconnects: 0,
        };
        human.hello(h);
        human
    }

    fn hello(&mut self, h: &mut Harness) {
        let hello = Payload::Hello(Hello {
            participant_id: self.participant_id.clone(),
            role: self.role,
        });
        let msg = self.core.message(None, hello);
        h.send(self.conn, &msg);
    }

    pub fn enqueue(&mut self, h: &mut Harness, scenario_id: &str, mode: Option<Mode>) {
        let req = Payload::EnqueueRequest(EnqueueRequest {
            scenario_id: scenario_id.to_string(),
            mode,
            position: None,
        });
        let msg = self.core.message(None, req);
        h.send(self.conn, &msg);
    }

    pub fn send(&mut self, h: &mut Harness, session_id: Option<&str>, payload: Payload) {
        let msg = self.core.message(session_id, payload);
        h.send(self.conn, &msg);
    }

    pub fn say(&mut self, h: &mut Harness, session_id: &str, text: &str) {
        let msg = self.core.chat(session_id, text);
        h.send(self.conn, &msg);
    }

    pub fn issue(&mut self, h: &mut Harness, session_id: &str, kind: CommandKind, role: Role) {
        let msg = self.core.command(
            session_id,
            SceneCommand {
                kind,
                issuer_role: role,
            },
        );
        h.send(self.conn, &msg);
    }

    pub fn ping(&mut self, h: &mut Harness, session_id: Option<&str>) {
        let msg = self.core.ping(session_id);
        h.send(self.conn, &msg);
    }

    pub fn end(&mut self, h: &mut Harness, session_id: &str) {
        let end = Payload::SessionEnd(SessionEnd {
            phase: None,
            reason: None,
        });
        self.send(h, Some(session_id), end);
    }

    /// Drops the connection and comes back on a new one.
    pub fn reconnect(&mut self, h: &mut Harness) {
        h.disconnect(self.conn);
        self.conn = h.connect();
        self.core.reset_connection();
        self.reconnects += 1;
        self.hello(h);
    }

    /// The single session this participant has seen.
    pub fn session_id(&self) -> Option<String> {
        self.core.sessions.keys().next_back().cloned()
    }
}

impl Actor for Human {
    fn conn(&self) -> ConnId {
        self.conn
    }

    fn on_message(&mut self, msg: &WireMessage) -> Vec<WireMessage> {
        self.core.handle(msg)
    }
}

/// The assistant seat run by a policy: an agent or a scripted wizard.
pub struct Assistant {
    pub id: String,
    pub conn: ConnId,
    pub client: AssistantClient,
}

impl Assistant {
    /// Registers as an evaluation agent.
    pub fn register_agent(
        h: &mut Harness,
        agent_id: &str,
        scenario_ids: &[&str],
        policy: Box<dyn AssistantPolicy>,
    ) -> Assistant {
        let mut a = Assistant {
            id: agent_id.to_string(),
            conn: h.connect(),
            client: AssistantClient::new(Role::Agent, policy),
        };
        let reg = Payload::AgentRegister(AgentRegister {
            agent_id: agent_id.to_string(),
            capacity: 1,
            scenario_ids: scenario_ids.iter().map(|s| s.to_string()).collect(),
        });
        let msg = a.client.core.message(None, reg);
        h.send(a.conn, &msg);
        a
    }

    /// Joins as a human wizard and enqueues for `scenario_id`.
    pub fn join_wizard(
        h: &mut Harness,
        wizard_id: &str,
        scenario_id: &str,
        policy: Box<dyn AssistantPolicy>,
    ) -> Assistant {
        let mut a = Assistant {
            id: wizard_id.to_string(),
            conn: h.connect(),
            client: AssistantClient::new(Role::Wizard, policy),
        };
        let hello = Payload::Hello(Hello {
            participant_id: wizard_id.to_string(),
            role: Role::Wizard,
        });
        let msg = a.client.core.message(None, hello);
        h.send(a.conn, &msg);
        let req = Payload::EnqueueRequest(EnqueueRequest {
            scenario_id: scenario_id.to_string(),
            mode: None,
            position: None,
        });
        let msg = a.client.core.message(None, req);
        h.send(a.conn, &msg);
        a
    }
}

impl Actor for Assistant {
    fn conn(&self) -> ConnId {
        self.conn
    }

    fn on_message(&mut self, msg: &WireMessage) -> Vec<WireMessage> {
        self.client.handle(msg)
    }
}

const MAX_PUMP_ROUNDS: usize = 100_000;

/// Delivers frames to the actors and sends their replies until no frames
/// are in flight.
pub fn pump(h: &mut Harness, actors: &mut [&mut dyn Actor]) -> Result<(), String> {
    for _ in 0..MAX_PUMP_ROUNDS {
        let mut progressed = false;
        for actor in actors.iter_mut() {
            let conn = actor.conn();
            for frame in h.take(conn) {
                progressed = true;
                let msg = protocol::decode(&frame).map_err(|e| format!("server sent an undecodable frame: {e}"))?;
                for reply in actor.on_message(&msg) {
                    h.send(conn, &reply);
                }
            }
        }
        if !progressed {
            return Ok(());
        }
    }
    Err("traffic did not settle".into())
}

const WORDS: [&str; 24] = [
    "hello", "show", "me", "the", "sofa", "red", "could", "you", "rotate", "it", "zoom", "in", "what", "color", "is",
    "that", "lamp", "please", "turn", "around", "a", "bit", "thanks", "table",
];

pub fn random_text(rng: &mut impl Rng) -> String {
    let n = rng.random_range(1..=8);
    (0..n)
        .map(|_| WORDS[rng.random_range(0..WORDS.len())])
        .collect::<Vec<_>>()
        .join(" ")
}

const COLORS: [&str; 6] = ["red", "blue", "gray", "#1a2b3c", "mauve-ish", "GREEN"];

/// A mix of valid and invalid commands against `state`, as `role`.
pub fn random_command(rng: &mut impl Rng, state: &SceneState, catalog: &Catalog, role: Role) -> SceneCommand {
    let object_id = if !state.objects.is_empty() && rng.random_bool(0.85) {
        state.objects[rng.random_range(0..state.objects.len())]
            .object_id
            .clone()
    } else {
        format!("o{}", rng.random_range(0..40))
    };
    let step = |rng: &mut dyn rand::RngCore| -> i32 {
        if rng.random_bool(0.9) {
            rng.random_range(-1..=1)
        } else {
            rng.random_range(-3..=3)
        }
    };
    let kind = match rng.random_range(0..8) {
        0 => CommandKind::Navigate {
            dx_cells: step(rng),
            dy_cells: step(rng),
        },
        1 => CommandKind::TurnUser {
            dyaw_deg: if rng.random_bool(0.85) {
                15 * rng.random_range(-24..=24)
            } else {
                rng.random_range(-400..=400)
            },
        },
        2 => CommandKind::RotateItem {
            object_id,
            dyaw_deg: if rng.random_bool(0.85) {
                15 * rng.random_range(-24..=24)
            } else {
                rng.random_range(-400..=400)
            },
        },
        3 => CommandKind::ZoomItem {
            object_id,
            dzoom_steps: if rng.random_bool(0.9) {
                [-1, 1][rng.random_range(0..2)]
            } else {
                rng.random_range(-3..=3)
            },
        },
        4 => CommandKind::FocusItem { object_id },
        5 => {
            let (key, value) = match rng.random_range(0..5) {
                0 | 1 => (
                    "color".to_string(),
                    COLORS[rng.random_range(0..COLORS.len())].to_string(),
                ),
                2 => (
                    "pattern".to_string(),
                    PATTERNS[rng.random_range(0..PATTERNS.len())].to_string(),
                ),
                3 => ("pattern".to_string(), "paisley".to_string()),
                _ => (
                    ["material", "Bad-Key", "finish"][rng.random_range(0..3)].to_string(),
                    ["oak", "", "matte"][rng.random_range(0..3)].to_string(),
                ),
            };
            CommandKind::SetAttribute { object_id, key, value }
        }
        6 => {
            let item_id = if !catalog.is_empty() && rng.random_bool(0.9) {
                catalog.items()[rng.random_range(0..catalog.len())].item_id.clone()
            } else {
                "unicorn".to_string()
            };
            let x = rng.random_range(-500..state.floor.width_mm() + 500);
            let y = rng.random_range(-500..state.floor.depth_mm() + 500);
            let mut transform = Transform::at(x, y);
            if rng.random_bool(0.1) {
                transform.yaw_deg = rng.random_range(0..360);
            }
            CommandKind::AddObject { item_id, transform }
        }
        _ => CommandKind::RemoveObject { object_id },
    };
    let issuer_role = if rng.random_bool(0.03) {
        Role::ALL[rng.random_range(0..Role::ALL.len())]
    } else {
        role
    };
    SceneCommand { kind, issuer_role }
}

#[derive(Debug, Clone)]
pub struct RandomSessionConfig {
    pub scenario_id: String,
    pub commands: usize,
    pub messages: usize,
    pub topology: Topology,
    pub faults: FaultPlan,
}

impl Default for RandomSessionConfig {
    fn default() -> Self {
        RandomSessionConfig {
            scenario_id: "shopping".into(),
            commands: 1000,
            messages: 50,
            topology: Topology::LocalRender,
            faults: FaultPlan::NONE,
        }
    }
}

/// Outcome of one seeded session.
#[derive(Debug, Clone)]
pub struct SessionRun {
    pub seed: u64,
    pub session_id: String,
    pub final_version: u64,
    pub authoritative_digest: Digest,
    /// Replica digests after quiescence: user then wizard, plus the remote
    /// views in remote-render topology.
    pub replica_digests: Vec<Digest>,
    pub dropped_frames: u64,
    pub reconnects: u64,
}

impl SessionRun {
    pub fn converged(&self) -> bool {
        self.replica_digests.iter().all(|d| *d == self.authoritative_digest)
    }
}

const QUIESCENCE_ROUNDS: usize = 8;

/// Runs one complete collection session between a seeded user and wizard:
/// matchmaking, `commands` random commands and `messages` chat messages in
/// random order, optional faults, quiescence and completion.
pub fn run_random_session(
    seed: u64,
    library: Arc<ScenarioLibrary>,
    store: Box<dyn LogStore>,
    cfg: &RandomSessionConfig,
) -> Result<SessionRun, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut config = CoordinatorConfig::default();
    config.lobby.session_prefix = format!("seed{seed}-");
    config.lobby.default_topology = cfg.topology;
    let catalog = library
        .get(&cfg.scenario_id)
        .ok_or_else(|| format!("unknown scenario {}", cfg.scenario_id))?
        .catalog
        .clone();
    let mut h = Harness::new(Coordinator::new(library, store, config), seed);

    let mut user = Human::join(&mut h, &format!("user-{seed}"), Role::User);
    let mut wizard = Human::join(&mut h, &format!("wizard-{seed}"), Role::Wizard);
    wizard.enqueue(&mut h, &cfg.scenario_id, None);
    user.enqueue(&mut h, &cfg.scenario_id, Some(Mode::Collection));
    pump(&mut h, &mut [&mut user, &mut wizard])?;
    let sid = user.session_id().ok_or("no session formed")?;

    let mut schedule: Vec<bool> = std::iter::repeat_n(true, cfg.messages)
        .chain(std::iter::repeat_n(false, cfg.commands))
        .collect();
    schedule.shuffle(&mut rng);

    h.set_faults(cfg.faults);
    for is_message in schedule {
        let actor = if rng.random_bool(0.5) { &mut user } else { &mut wizard };
        if cfg.faults.reconnect_rate > 0.0 && rng.random_bool(cfg.faults.reconnect_rate) {
            actor.reconnect(&mut h);
        }
        if is_message {
            let text = random_text(&mut rng);
            actor.say(&mut h, &sid, &text);
        } else {
            let state = actor
                .core
                .session(&sid)
                .map(|s| s.replica.state().clone())
                .ok_or("actor lost its session")?;
            let cmd = random_command(&mut rng, &state, &catalog, actor.role);
            let msg = actor.core.command(&sid, cmd);
            h.send(actor.conn, &msg);
        }
        h.advance(rng.random_range(1..=20));
        pump(&mut h, &mut [&mut user, &mut wizard])?;
    }

    h.set_faults(FaultPlan::NONE);
    for _ in 0..QUIESCENCE_ROUNDS {
        user.ping(&mut h, Some(&sid));
        wizard.ping(&mut h, Some(&sid));
        pump(&mut h, &mut [&mut user, &mut wizard])?;
    }

    let session = h
        .coordinator()
        .lobby()
        .session(&sid)
        .ok_or("session ended before quiescence")?;
    let authoritative_digest = session.scene.digest();
    let final_version = session.scene.version;
    let mut replica_digests = Vec::new();
    for p in [&user, &wizard] {
        let s = p.core.session(&sid).ok_or("participant lost its session")?;
        replica_digests.push(s.replica.digest());
        if let Some(view) = &s.view {
            replica_digests.push(view.digest);
        }
    }

    user.end(&mut h, &sid);
    pump(&mut h, &mut [&mut user, &mut wizard])?;
    if h.coordinator().lobby().session(&sid).is_some() {
        return Err(format!("session {sid} did not end"));
    }
    Ok(SessionRun {
        seed,
        session_id: sid,
        final_version,
        authoritative_digest,
        replica_digests,
        dropped_frames: h.dropped_frames,
        reconnects: user.reconnects + wizard.reconnects,
    })
}

/// One scripted user turn.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum UserStep {
    Say(String),
    Do(CommandKind),
}

/// Frames delivered to the assistant seat, from its SessionStart through
/// SessionEnd, for a scripted user and an [`EchoAgent`] following
/// `assistant_script`. In collection mode the assistant is a wizard client,
/// in evaluation mode a registered agent.
pub fn assistant_transcript(
    mode: Mode,
    topology: Topology,
    user_script: &[UserStep],
    assistant_script: &[Vec<CommandKind>],
    library: Arc<ScenarioLibrary>,
    store: Box<dyn LogStore>,
) -> Result<Vec<Vec<u8>>, String> {
    let mut config = CoordinatorConfig::default();
    config.lobby.default_topology = topology;
    let mut h = Harness::new(Coordinator::new(library, store, config), 0);
    let policy = Box::new(EchoAgent::with_script(assistant_script.to_vec()));
    let mut assistant = match mode {
        Mode::Collection => Assistant::join_wizard(&mut h, "wizard-1", "shopping", policy),
        Mode::Evaluation => Assistant::register_agent(&mut h, "agent-1", &["shopping"], policy),
    };
    h.record(assistant.conn);
    let mut user = Human::join(&mut h, "user-1", Role::User);
    user.enqueue(&mut h, "shopping", Some(mode));
    pump(&mut h, &mut [&mut user, &mut assistant])?;
    let sid = user.session_id().ok_or("no session formed")?;

    for step in user_script {
        match step {
            UserStep::Say(text) => user.say(&mut h, &sid, text),
            UserStep::Do(kind) => user.issue(&mut h, &sid, kind.clone(), Role::User),
        }
        h.advance(10);
        pump(&mut h, &mut [&mut user, &mut assistant])?;
    }
    user.end(&mut h, &sid);
    pump(&mut h, &mut [&mut user, &mut assistant])?;

    let frames = h.recording(assistant.conn);
    let start = frames
        .iter()
        .position(|f| {
            matches!(
                protocol::decode(f).map(|m| m.message_type()),
                Ok(protocol::MessageType::SessionStart)
            )
        })
        .ok_or("assistant never received SessionStart")?;
    Ok(frames[start..].to_vec())
}

/// Rewrites a transcript so that runs differing only in ids, msg_ids and
/// the name of the assistant seat compare equal: `msg_id` and `in_reply_to`
/// become 0, session ids become `"S"`, each id in `ids` becomes its
/// placeholder wherever it appears, and the roles `wizard` and `agent`
/// become `assistant`, also when quoted inside a message.
pub fn normalize_transcript(frames: &[Vec<u8>], ids: &[(&str, &str)]) -> Result<Vec<u8>, String> {
    fn walk(v: &mut Value, ids: &[(&str, &str)]) {
        match v {
            Value::Object(map) => {
                for (k, child) in map.iter_mut() {
                    match (k.as_str(), &*child) {
                        ("msg_id" | "in_reply_to", Value::Number(_)) => *child = Value::from(0),
                        ("session_id", Value::String(_)) => *child = Value::from("S"),
                        _ => walk(child, ids),
                    }
                }
            }
            Value::Array(items) => items.iter_mut().for_each(|c| walk(c, ids)),
            Value::String(s) => {
                if s == "wizard" || s == "agent" {
                    *s = "assistant".to_string();
                    return;
                }
                for (id, placeholder) in ids {
                    if s.contains(id) {
                        *s = s.replace(id, placeholder);
                    }
                }
                // Error texts name the role in quotes.
                for role in ["'wizard'", "'agent'"] {
                    if s.contains(role) {
                        *s = s.replace(role, "'assistant'");
                    }
                }
            }
            _ => {}
        }
    }
    let mut out = Vec::new();
    for frame in frames {
        let body = frame
            .get(protocol::LENGTH_PREFIX_BYTES..)
            .ok_or("frame shorter than its length prefix")?;
        let mut v: Value = serde_json::from_slice(body).map_err(|e| e.to_string())?;
        walk(&mut v, ids);
        out.extend_from_slice(serde_json::to_string(&v).map_err(|e| e.to_string())?.as_bytes());
        out.push(b'\n');
    }
    Ok(out)
}
