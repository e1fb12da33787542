//! Wire protocol: length-delimited JSON frames.
//!
//! A frame is a 4-byte big-endian body length followed by a UTF-8 JSON
//! envelope `{"session_id"?, "msg_id", "type", "payload"}`. The `type` tag
//! selects the payload schema; unknown tags are decode errors, never panics.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::scene::{Catalog, Digest, PermissionTable, Role, SceneCommand, SceneState};
use crate::session::{Mode, Phase};
use crate::sync::{Delta, Topology};

/// Largest accepted frame body.
pub const MAX_FRAME_BYTES: usize = 1 << 20;
pub const LENGTH_PREFIX_BYTES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MessageType {
    Hello,
    EnqueueRequest,
    SessionStart,
    SessionStartAck,
    Chat,
    CommandRequest,
    Delta,
    Rejection,
    ResyncRequest,
    ResyncBatch,
    FullState,
    SessionEnd,
    Ping,
    Pong,
    AgentRegister,
    Error,
}

impl MessageType {
    pub const ALL: [MessageType; 16] = [
        MessageType::Hello,
        MessageType::EnqueueRequest,
        MessageType::SessionStart,
        MessageType::SessionStartAck,
        MessageType::Chat,
        MessageType::CommandRequest,
        MessageType::Delta,
        MessageType::Rejection,
        MessageType::ResyncRequest,
        MessageType::ResyncBatch,
        MessageType::FullState,
        MessageType::SessionEnd,
        MessageType::Ping,
        MessageType::Pong,
        MessageType::AgentRegister,
        MessageType::Error,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MessageType::Hello => "Hello",
            MessageType::EnqueueRequest => "EnqueueRequest",
            MessageType::SessionStart => "SessionStart",
            MessageType::SessionStartAck => "SessionStartAck",
            MessageType::Chat => "Chat",
            MessageType::CommandRequest => "CommandRequest",
            MessageType::Delta => "Delta",
            MessageType::Rejection => "Rejection",
            MessageType::ResyncRequest => "ResyncRequest",
            MessageType::ResyncBatch => "ResyncBatch",
            MessageType::FullState => "FullState",
            MessageType::SessionEnd => "SessionEnd",
            MessageType::Ping => "Ping",
            MessageType::Pong => "Pong",
            MessageType::AgentRegister => "AgentRegister",
            MessageType::Error => "Error",
        }
    }

    pub fn parse(tag: &str) -> Option<MessageType> {
        MessageType::ALL.into_iter().find(|t| t.as_str() == tag)
    }

    /// Tags only the server may send.
    pub fn is_server_only(self) -> bool {
        matches!(
            self,
            MessageType::SessionStart
                | MessageType::Delta
                | MessageType::Rejection
                | MessageType::ResyncBatch
                | MessageType::FullState
                | MessageType::Pong
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hello {
    pub participant_id: String,
    pub role: Role,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnqueueRequest {
    pub scenario_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<Mode>,
    /// Set by the server when acknowledging: 1-based queue position.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentRegister {
    pub agent_id: String,
    #[serde(default = "default_capacity")]
    pub capacity: u32,
    pub scenario_ids: Vec<String>,
}

fn default_capacity() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionStart {
    pub scenario_id: String,
    pub topology: Topology,
    /// The receiving participant's id.
    pub you: String,
    pub peer: String,
    pub catalog: Catalog,
    pub permissions: PermissionTable,
    pub state: SceneState,
    pub digest: Digest,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chat {
    pub text: String,
    /// Filled in by the server on delivery.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub from: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<Role>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene_version: Option<u64>,
}

impl Chat {
    pub fn outgoing(text: impl Into<String>) -> Chat {
        Chat {
            text: text.into(),
            from: None,
            role: None,
            scene_version: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommandRequest {
    pub command: SceneCommand,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeltaMsg {
    #[serde(flatten)]
    pub delta: Delta,
    /// The issuer's CommandRequest msg_id; only on the issuer's copy.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_reply_to: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub in_reply_to: u64,
    pub code: String,
    pub message: String,
    pub current_version: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResyncRequest {
    pub last_good_version: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResyncBatch {
    pub deltas: Vec<Delta>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FullState {
    pub state: SceneState,
    pub digest: Digest,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionEnd {
    /// Final phase; absent on a client's request to complete.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<Phase>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ping {
    /// Client replica version, if in a session.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acked_version: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pong {
    /// Authoritative version of the envelope's session.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorMsg {
    pub code: String,
    pub message: String,
    /// Byte offset of a decode failure within the frame.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<u64>,
    /// The server closes the connection after a fatal error.
    #[serde(default)]
    pub fatal: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Payload {
    Hello(Hello),
    EnqueueRequest(EnqueueRequest),
    SessionStart(Box<SessionStart>),
    SessionStartAck,
    Chat(Chat),
    CommandRequest(CommandRequest),
    Delta(DeltaMsg),
    Rejection(Rejection),
    ResyncRequest(ResyncRequest),
    ResyncBatch(ResyncBatch),
    FullState(Box<FullState>),
    SessionEnd(SessionEnd),
    Ping(Ping),
    Pong(Pong),
    AgentRegister(AgentRegister),
    Error(ErrorMsg),
}

impl Payload {
    pub fn message_type(&self) -> MessageType {
        match self {
            Payload::Hello(_) => MessageType::Hello,
            Payload::EnqueueRequest(_) => MessageType::EnqueueRequest,
            Payload::SessionStart(_) => MessageType::SessionStart,
            Payload::SessionStartAck => MessageType::SessionStartAck,
            Payload::Chat(_) => MessageType::Chat,
            Payload::CommandRequest(_) => MessageType::CommandRequest,
            Payload::Delta(_) => MessageType::Delta,
            Payload::Rejection(_) => MessageType::Rejection,
            Payload::ResyncRequest(_) => MessageType::ResyncRequest,
            Payload::ResyncBatch(_) => MessageType::ResyncBatch,
            Payload::FullState(_) => MessageType::FullState,
            Payload::SessionEnd(_) => MessageType::SessionEnd,
            Payload::Ping(_) => MessageType::Ping,
            Payload::Pong(_) => MessageType::Pong,
            Payload::AgentRegister(_) => MessageType::AgentRegister,
            Payload::Error(_) => MessageType::Error,
        }
    }

    fn to_value(&self) -> Value {
        let v = match self {
            Payload::Hello(p) => serde_json::to_value(p),
            Payload::EnqueueRequest(p) => serde_json::to_value(p),
            Payload::SessionStart(p) => serde_json::to_value(p),
            Payload::SessionStartAck => Ok(Value::Object(Default::default())),
            Payload::Chat(p) => serde_json::to_value(p),
            Payload::CommandRequest(p) => serde_json::to_value(p),
            Payload::Delta(p) => serde_json::to_value(p),
            Payload::Rejection(p) => serde_json::to_value(p),
            Payload::ResyncRequest(p) => serde_json::to_value(p),
            Payload::ResyncBatch(p) => serde_json::to_value(p),
            Payload::FullState(p) => serde_json::to_value(p),
            Payload::SessionEnd(p) => serde_json::to_value(p),
            Payload::Ping(p) => serde_json::to_value(p),
            Payload::Pong(p) => serde_json::to_value(p),
            Payload::AgentRegister(p) => serde_json::to_value(p),
            Payload::Error(p) => serde_json::to_value(p),
        };
        v.expect("payloads serialize to JSON")
    }

    fn from_value(ty: MessageType, value: Value) -> Result<Payload, serde_json::Error> {
        fn de<T: DeserializeOwned>(v: Value) -> Result<T, serde_json::Error> {
            serde_json::from_value(v)
        }
        Ok(match ty {
            MessageType::Hello => Payload::Hello(de(value)?),
            MessageType::EnqueueRequest => Payload::EnqueueRequest(de(value)?),
            MessageType::SessionStart => Payload::SessionStart(de(value)?),
            MessageType::SessionStartAck => {
                let _: serde::de::IgnoredAny = de(value)?;
                Payload::SessionStartAck
            }
            MessageType::Chat => Payload::Chat(de(value)?),
            MessageType::CommandRequest => Payload::CommandRequest(de(value)?),
            MessageType::Delta => Payload::Delta(de(value)?),
            MessageType::Rejection => Payload::Rejection(de(value)?),
            MessageType::ResyncRequest => Payload::ResyncRequest(de(value)?),
            MessageType::ResyncBatch => Payload::ResyncBatch(de(value)?),
            MessageType::FullState => Payload::FullState(de(value)?),
            MessageType::SessionEnd => Payload::SessionEnd(de(value)?),
            MessageType::Ping => Payload::Ping(de(value)?),
            MessageType::Pong => Payload::Pong(de(value)?),
            MessageType::AgentRegister => Payload::AgentRegister(de(value)?),
            MessageType::Error => Payload::Error(de(value)?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireMessage {
    pub session_id: Option<String>,
    pub msg_id: u64,
    pub payload: Payload,
}

impl WireMessage {
    pub fn new(msg_id: u64, payload: Payload) -> Self {
        WireMessage {
            session_id: None,
            msg_id,
            payload,
        }
    }

    pub fn in_session(session_id: impl Into<String>, msg_id: u64, payload: Payload) -> Self {
        WireMessage {
            session_id: Some(session_id.into()),
            msg_id,
            payload,
        }
    }

    pub fn message_type(&self) -> MessageType {
        self.payload.message_type()
    }

    /// The JSON envelope without the length prefix.
    pub fn to_json(&self) -> String {
        let env = RawEnvelope {
            session_id: self.session_id.clone(),
            msg_id: self.msg_id,
            ty: self.message_type().as_str().to_string(),
            payload: self.payload.to_value(),
        };
        serde_json::to_string(&env).expect("envelopes serialize")
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEnvelope {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    session_id: Option<String>,
    msg_id: u64,
    #[serde(rename = "type")]
    ty: String,
    #[serde(default = "empty_object")]
    payload: Value,
}

fn empty_object() -> Value {
    Value::Object(Default::default())
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("truncated frame at byte {offset}: need {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("frame length {length} exceeds the {max}-byte limit (byte 0)")]
    TooLarge { length: usize, max: usize },
    #[error("invalid UTF-8 at byte {offset}")]
    InvalidUtf8 { offset: usize },
    #[error("malformed envelope at byte {offset}: {message}")]
    Malformed { offset: usize, message: String },
    #[error("unknown message type '{tag}' (byte {offset})")]
    UnknownType { offset: usize, tag: String },
    #[error("invalid {tag} payload at byte {offset}: {message}")]
    InvalidPayload {
        offset: usize,
        tag: String,
        message: String,
    },
    #[error("{extra} trailing bytes after frame at byte {offset}")]
    TrailingBytes { offset: usize, extra: usize },
}

impl DecodeError {
    /// Byte offset of the failure, counted from the start of the frame.
    pub fn offset(&self) -> usize {
        match self {
            DecodeError::TooLarge { .. } => 0,
            DecodeError::Truncated { offset, .. }
            | DecodeError::InvalidUtf8 { offset }
            | DecodeError::Malformed { offset, .. }
            | DecodeError::UnknownType { offset, .. }
            | DecodeError::InvalidPayload { offset, .. }
            | DecodeError::TrailingBytes { offset, .. } => *offset,
        }
    }

    /// Whether the byte stream can no longer be split into frames.
    pub fn breaks_framing(&self) -> bool {
        matches!(self, DecodeError::TooLarge { .. })
    }
}

/// Encodes one frame: length prefix plus JSON body.
pub fn encode(msg: &WireMessage) -> Vec<u8> {
    let body = msg.to_json();
    let mut out = Vec::with_capacity(LENGTH_PREFIX_BYTES + body.len());
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(body.as_bytes());
    out
}

/// Decodes exactly one frame occupying all of `bytes`.
pub fn decode(bytes: &[u8]) -> Result<WireMessage, DecodeError> {
    let (msg, used) = decode_prefix(bytes)?;
    if used != bytes.len() {
        return Err(DecodeError::TrailingBytes {
            offset: used,
            extra: bytes.len() - used,
        });
    }
    msg
}

/// Decodes the first frame in `bytes`, returning it with the number of bytes
/// it occupied. The inner result is a frame that was delimited correctly but
/// whose body is invalid; the outer error means no frame could be delimited.
pub fn decode_prefix(bytes: &[u8]) -> Result<(Result<WireMessage, DecodeError>, usize), DecodeError> {
    if bytes.len() < LENGTH_PREFIX_BYTES {
        return Err(DecodeError::Truncated {
            offset: bytes.len(),
            needed: LENGTH_PREFIX_BYTES - bytes.len(),
        });
    }
    let length = u32::from_be_bytes(bytes[..LENGTH_PREFIX_BYTES].try_into().unwrap()) as usize;
    if length > MAX_FRAME_BYTES {
        return Err(DecodeError::TooLarge {
            length,
            max: MAX_FRAME_BYTES,
        });
    }
    let end = LENGTH_PREFIX_BYTES + length;
    if bytes.len() < end {
        return Err(DecodeError::Truncated {
            offset: bytes.len(),
            needed: end - bytes.len(),
        });
    }
    Ok((decode_body(&bytes[LENGTH_PREFIX_BYTES..end]), end))
}

fn decode_body(body: &[u8]) -> Result<WireMessage, DecodeError> {
    let base = LENGTH_PREFIX_BYTES;
    let text = std::str::from_utf8(body).map_err(|e| DecodeError::InvalidUtf8 {
        offset: base + e.valid_up_to(),
    })?;
    let env: RawEnvelope = serde_json::from_str(text).map_err(|e| DecodeError::Malformed {
        offset: base + json_error_offset(text, &e),
        message: strip_position(&e),
    })?;
    let tag_offset = base + text.find("\"type\"").unwrap_or(0);
    let ty = MessageType::parse(&env.ty).ok_or_else(|| DecodeError::UnknownType {
        offset: tag_offset,
        tag: env.ty.clone(),
    })?;
    let payload = Payload::from_value(ty, env.payload).map_err(|e| DecodeError::InvalidPayload {
        offset: base + text.find("\"payload\"").unwrap_or(0),
        tag: env.ty.clone(),
        message: strip_position(&e),
    })?;
    Ok(WireMessage {
        session_id: env.session_id,
        msg_id: env.msg_id,
        payload,
    })
}

/// Converts serde_json's 1-based line/column into a byte offset.
fn json_error_offset(text: &str, e: &serde_json::Error) -> usize {
    if e.line() == 0 {
        return text.len();
    }
    let line_start: usize = text.split_inclusive('\n').take(e.line() - 1).map(str::len).sum();
    (line_start + e.column().saturating_sub(1)).min(text.len())
}

fn strip_position(e: &serde_json::Error) -> String {
    let s = e.to_string();
    match s.rfind(" at line ") {
        Some(i) => s[..i].to_string(),
        None => s,
    }
}

/// Splits a byte stream into frames.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
    broken: bool,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Bytes buffered but not yet returned as a frame.
    pub fn pending(&self) -> usize {
        self.buf.len()
    }

    /// The next complete frame, `None` when more bytes are needed. Once a
    /// length prefix is rejected every later call returns that error.
    pub fn next_frame(&mut self) -> Option<Result<WireMessage, DecodeError>> {
        if self.broken {
            return Some(Err(DecodeError::TooLarge {
                length: 0,
                max: MAX_FRAME_BYTES,
            }));
        }
        match decode_prefix(&self.buf) {
            Ok((msg, used)) => {
                self.buf.drain(..used);
                Some(msg)
            }
            Err(DecodeError::Truncated { .. }) => None,
            Err(e) => {
                self.broken = true;
                Some(Err(e))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{CommandKind, SHOPPING_SCENARIO};

    fn ping() -> WireMessage {
        WireMessage::new(7, Payload::Ping(Ping { acked_version: None }))
    }

    #[test]
    fn ping_round_trips() {
        let bytes = encode(&ping());
        assert_eq!(&bytes[..4], &(bytes.len() as u32 - 4).to_be_bytes());
        assert_eq!(decode(&bytes).unwrap(), ping());
        assert_eq!(
            std::str::from_utf8(&bytes[4..]).unwrap(),
            r#"{"msg_id":7,"type":"Ping","payload":{}}"#
        );
    }

    #[test]
    fn truncated_frames_fail_with_offsets() {
        let bytes = encode(&ping());
        for cut in 0..bytes.len() {
            let err = decode(&bytes[..cut]).unwrap_err();
            assert!(
                matches!(err, DecodeError::Truncated { offset, .. } if offset == cut),
                "{err}"
            );
        }
    }

    #[test]
    fn unknown_tag_is_an_error() {
        let body = br#"{"msg_id":1,"type":"Teleport","payload":{}}"#;
        let mut frame = (body.len() as u32).to_be_bytes().to_vec();
        frame.extend_from_slice(body);
        let err = decode(&frame).unwrap_err();
        assert_eq!(
            err,
            DecodeError::UnknownType {
                offset: 4 + 12,
                tag: "Teleport".into()
            }
        );
    }

    #[test]
    fn malformed_json_reports_offset() {
        let body = b"{\"msg_id\":1,\n \"type\": oops}";
        let mut frame = (body.len() as u32).to_be_bytes().to_vec();
        frame.extend_from_slice(body);
        let err = decode(&frame).unwrap_err();
        // "oops" starts at body byte 22
        assert!(
            matches!(err, DecodeError::Malformed { offset, .. } if offset == 4 + 22),
            "{err:?}"
        );
    }

    #[test]
    fn oversize_length_breaks_framing() {
        let mut dec = FrameDecoder::new();
        dec.push(&u32::MAX.to_be_bytes());
        let err = dec.next_frame().unwrap().unwrap_err();
        assert!(err.breaks_framing());
        assert!(dec.next_frame().unwrap().is_err());
    }

    #[test]
    fn decoder_splits_stream() {
        let a = encode(&ping());
        let b = encode(&WireMessage::in_session(
            "s1",
            8,
            Payload::CommandRequest(CommandRequest {
                command: SceneCommand {
                    kind: CommandKind::ZoomItem {
                        object_id: "o1".into(),
                        dzoom_steps: 1,
                    },
                    issuer_role: Role::Agent,
                },
            }),
        ));
        let mut dec = FrameDecoder::new();
        let all: Vec<u8> = a.iter().chain(b.iter()).copied().collect();
        for chunk in all.chunks(5) {
            dec.push(chunk);
        }
        assert_eq!(dec.next_frame().unwrap().unwrap(), ping());
        let second = dec.next_frame().unwrap().unwrap();
        assert_eq!(second.session_id.as_deref(), Some("s1"));
        assert!(dec.next_frame().is_none());
        assert_eq!(dec.pending(), 0);
    }

    #[test]
    fn session_start_round_trips() {
        let scenario = crate::scene::load_scenario(SHOPPING_SCENARIO).unwrap();
        let ctx = scenario.context();
        let msg = WireMessage::in_session(
            "s1",
            3,
            Payload::SessionStart(Box::new(SessionStart {
                scenario_id: scenario.scenario_id.clone(),
                topology: Topology::RemoteRender,
                you: "u".into(),
                peer: "w".into(),
                catalog: ctx.catalog,
                permissions: ctx.permissions,
                digest: scenario.state.digest(),
                snapshot: Some(crate::scene::render_snapshot(&scenario.state)),
                state: scenario.state.clone(),
            })),
        );
        assert_eq!(decode(&encode(&msg)).unwrap(), msg);
    }

    #[test]
    fn server_only_tags() {
        let server_only: Vec<_> = MessageType::ALL
            .into_iter()
            .filter(|t| t.is_server_only())
            .map(|t| t.as_str())
            .collect();
        assert_eq!(
            server_only,
            ["SessionStart", "Delta", "Rejection", "ResyncBatch", "FullState", "Pong"]
        );
    }
}
