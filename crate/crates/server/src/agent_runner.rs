//! A programmatic assistant that connects to a running server like any
//! other client and answers through an [`AssistantPolicy`].

use std::time::Duration;

use anyhow::{bail, Context};
use futures::{SinkExt, StreamExt};
use tokio_tungstenite::tungstenite::Message;
use tracing::{info, warn};
use wozsim_core::agent::{AssistantPolicy, EchoAgent, ReferenceAgent};
use wozsim_core::client::AssistantClient;
use wozsim_core::protocol::{self, AgentRegister, Payload, WireMessage};
use wozsim_core::scene::Role;
use wozsim_core::session::Phase;

const KEEPALIVE: Duration = Duration::from_secs(10);

#[derive(Debug, Clone)]
pub struct AgentOptions {
    /// Websocket URL, e.g. `ws://127.0.0.1:8080/ws`.
    pub url: String,
    pub agent_id: String,
    pub scenario_ids: Vec<String>,
    pub capacity: u32,
    pub policy: String,
}

pub fn policy_by_name(name: &str) -> anyhow::Result<Box<dyn AssistantPolicy>> {
    match name {
        "echo" => Ok(Box::new(EchoAgent::new())),
        "reference" => Ok(Box::new(ReferenceAgent::new())),
        other => bail!("unknown agent policy {other:?} (expected echo or reference)"),
    }
}

/// Serves sessions until the server closes the connection.
pub async fn run(opts: AgentOptions) -> anyhow::Result<()> {
    let policy = policy_by_name(&opts.policy)?;
    let (socket, _) = tokio_tungstenite::connect_async(opts.url.as_str())
        .await
        .with_context(|| format!("connecting to {}", opts.url))?;
    let (mut sink, mut stream) = socket.split();
    let mut client = AssistantClient::new(Role::Agent, policy);

    let register = client.core.message(
        None,
        Payload::AgentRegister(AgentRegister {
            agent_id: opts.agent_id.clone(),
            capacity: opts.capacity,
            scenario_ids: opts.scenario_ids.clone(),
        }),
    );
    send(&mut sink, &register).await?;
    info!(agent_id = %opts.agent_id, url = %opts.url, "registered");

    let mut keepalive = tokio::time::interval(KEEPALIVE);
    loop {
        tokio::select! {
            msg = stream.next() => {
                let bytes = match msg {
                    Some(Ok(Message::Binary(b))) => b,
                    Some(Ok(Message::Close(_))) | None => break,
                    Some(Ok(_)) => continue,
                    Some(Err(e)) => return Err(e).context("reading from server"),
                };
                let msg = match protocol::decode(&bytes) {
                    Ok(msg) => msg,
                    Err(e) => {
                        warn!("undecodable frame from server: {e}");
                        continue;
                    }
                };
                if let Payload::Error(e) = &msg.payload {
                    if e.fatal {
                        bail!("server closed the connection: {} ({})", e.message, e.code);
                    }
                    warn!(code = %e.code, "{}", e.message);
                }
                if let (Payload::SessionEnd(end), Some(sid)) = (&msg.payload, &msg.session_id) {
                    info!(session_id = %sid, reason = ?end.reason, "session ended");
                }
                for reply in client.handle(&msg) {
                    send(&mut sink, &reply).await?;
                }
            }
            _ = keepalive.tick() => {
                let live: Vec<String> = client
                    .core
                    .sessions
                    .values()
                    .filter(|s| !s.phase.is_terminal())
                    .map(|s| s.session_id.clone())
                    .collect();
                for sid in live {
                    let ping = client.core.ping(Some(&sid));
                    send(&mut sink, &ping).await?;
                }
            }
        }
    }
    let served = client
        .core
        .sessions
        .values()
        .filter(|s| s.phase == Phase::Completed)
        .count();
    info!(served, "disconnected");
    Ok(())
}

async fn send<S>(sink: &mut S, msg: &WireMessage) -> anyhow::Result<()>
where
    S: SinkExt<Message> + Unpin,
    S::Error: std::error::Error + Send + Sync + 'static,
{
    sink.send(Message::Binary(protocol::encode(msg).into()))
        .await
        .context("writing to server")
}
