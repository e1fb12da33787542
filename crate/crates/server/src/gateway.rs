//! Network face: a websocket endpoint carrying protocol frames (one frame
//! per binary message), static files for the web client, and the task that
//! owns the coordinator.

use std::collections::HashMap;
use std::future::Future;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::{Html, IntoResponse};
use axum::routing::get;
use axum::Router;
use futures::{SinkExt, StreamExt};
use tokio::net::TcpListener;
use tokio::sync::{mpsc, oneshot, watch};
use tower_http::services::ServeDir;
use tracing::{debug, info, warn};
use wozsim_core::coordinator::{Coordinator, CoordinatorConfig, Outbound};
use wozsim_core::logging::DirStore;
use wozsim_core::protocol::{self, MAX_FRAME_BYTES};
use wozsim_core::scene::ScenarioLibrary;
use wozsim_core::session::{ConnId, LobbyConfig};
use wozsim_core::sync::SyncConfig;

use crate::config::ServerConfig;

pub const WS_PATH: &str = "/ws";
const TICK: Duration = Duration::from_millis(250);
const CLOSE_GRACE: Duration = Duration::from_secs(5);

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

enum Event {
    Open {
        tx: mpsc::UnboundedSender<ToConn>,
        reply: oneshot::Sender<ConnId>,
    },
    Frame {
        conn: ConnId,
        bytes: Vec<u8>,
    },
    Close {
        conn: ConnId,
    },
    Shutdown {
        done: oneshot::Sender<()>,
    },
}

enum ToConn {
    Frame(Vec<u8>),
    Close,
}

#[derive(Clone)]
struct AppState {
    events: mpsc::UnboundedSender<Event>,
}

pub fn coordinator_config(config: &ServerConfig) -> CoordinatorConfig {
    CoordinatorConfig {
        lobby: LobbyConfig {
            default_topology: config.render_topology,
            sync: SyncConfig::default(),
            turn_timeout_ms: config.turn_timeout_s * 1000,
            // Session ids must not collide with earlier runs in the same log dir.
            session_prefix: format!("{}-", now_ms()),
        },
        default_mode: config.mode_default,
        disconnect_timeout_ms: config.disconnect_timeout_s * 1000,
    }
}

/// Runs the coordinator until a Shutdown event, then abandons live sessions.
async fn run_coordinator(mut coord: Coordinator, mut events: mpsc::UnboundedReceiver<Event>) {
    let mut conns: HashMap<ConnId, mpsc::UnboundedSender<ToConn>> = HashMap::new();
    let mut ticker = tokio::time::interval(TICK);
    ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    loop {
        let out = tokio::select! {
            ev = events.recv() => match ev {
                Some(Event::Open { tx, reply }) => {
                    let conn = coord.open();
                    conns.insert(conn, tx);
                    let _ = reply.send(conn);
                    debug!(%conn, "connection opened");
                    Vec::new()
                }
                Some(Event::Frame { conn, bytes }) => coord.handle_frame(conn, &bytes, now_ms()),
                Some(Event::Close { conn }) => {
                    conns.remove(&conn);
                    debug!(%conn, "connection closed");
                    coord.close(conn, now_ms())
                }
                Some(Event::Shutdown { done }) => {
                    let out = coord.shutdown(now_ms());
                    deliver(&mut conns, out);
                    info!("live sessions abandoned for shutdown");
                    let _ = done.send(());
                    return;
                }
                None => return,
            },
            _ = ticker.tick() => coord.tick(now_ms()),
        };
        deliver(&mut conns, out);
    }
}

fn deliver(conns: &mut HashMap<ConnId, mpsc::UnboundedSender<ToConn>>, out: Vec<Outbound>) {
    for o in out {
        match o {
            Outbound::Frame { conn, msg } => {
                if let protocol::Payload::Error(e) = &msg.payload {
                    if e.fatal {
                        warn!(%conn, code = %e.code, "closing connection: {}", e.message);
                    }
                }
                if let Some(tx) = conns.get(&conn) {
                    let _ = tx.send(ToConn::Frame(protocol::encode(&msg)));
                }
            }
            Outbound::Close { conn } => {
                if let Some(tx) = conns.remove(&conn) {
                    let _ = tx.send(ToConn::Close);
                }
            }
        }
    }
}

async fn ws_handler(ws: WebSocketUpgrade, State(state): State<AppState>) -> impl IntoResponse {
    ws.max_message_size(2 * (MAX_FRAME_BYTES + protocol::LENGTH_PREFIX_BYTES))
        .on_upgrade(move |socket| connection(socket, state))
}

async fn connection(socket: WebSocket, state: AppState) {
    let (tx, mut rx) = mpsc::unbounded_channel();
    let (reply, conn) = oneshot::channel();
    if state.events.send(Event::Open { tx, reply }).is_err() {
        return;
    }
    let Ok(conn) = conn.await else { return };
    let (mut sink, mut stream) = socket.split();

    let mut writer = tokio::spawn(async move {
        while let Some(item) = rx.recv().await {
            match item {
                ToConn::Frame(bytes) => {
                    if sink.send(Message::Binary(bytes.into())).await.is_err() {
                        break;
                    }
                }
                ToConn::Close => {
                    let _ = sink.send(Message::Close(None)).await;
                    break;
                }
            }
        }
    });

    loop {
        let msg = tokio::select! {
            msg = stream.next() => msg,
            // The server closed the connection.
            _ = &mut writer => break,
        };
        let bytes = match msg {
            Some(Ok(Message::Binary(b))) => b.to_vec(),
            // Text messages cannot carry the binary length prefix; the
            // coordinator reports them as undecodable frames.
            Some(Ok(Message::Text(t))) => t.as_bytes().to_vec(),
            Some(Ok(Message::Ping(_) | Message::Pong(_))) => continue,
            Some(Ok(Message::Close(_))) | Some(Err(_)) | None => break,
        };
        if state.events.send(Event::Frame { conn, bytes }).is_err() {
            break;
        }
    }
    let _ = state.events.send(Event::Close { conn });
    writer.abort();
}

const PLACEHOLDER_INDEX: &str = "<!doctype html>\n<title>wozsim</title>\n<p>wozsim server is running. \
The web client bundle is not configured; start the server with <code>--web-dir</code>. \
Participants connect to <code>/ws</code>.</p>\n";

async fn placeholder() -> Html<&'static str> {
    Html(PLACEHOLDER_INDEX)
}

async fn healthz() -> &'static str {
    "ok"
}

fn router(state: AppState, web_dir: Option<PathBuf>) -> Router {
    let router = Router::new()
        .route(WS_PATH, get(ws_handler))
        .route("/healthz", get(healthz))
        .with_state(state);
    match web_dir {
        Some(dir) => router.fallback_service(ServeDir::new(dir)),
        None => router.route("/", get(placeholder)),
    }
}

/// Serves on `listener` until `shutdown` resolves. Live sessions are
/// abandoned and sealed before this returns.
pub async fn serve(
    config: ServerConfig,
    library: ScenarioLibrary,
    listener: TcpListener,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> anyhow::Result<()> {
    let store = DirStore::new(&config.log_dir);
    let coord = Coordinator::new(Arc::new(library), Box::new(store), coordinator_config(&config));
    let (events_tx, events_rx) = mpsc::unbounded_channel();
    let coordinator = tokio::spawn(run_coordinator(coord, events_rx));

    let app = router(
        AppState {
            events: events_tx.clone(),
        },
        config.web_dir.clone(),
    );
    info!(addr = %listener.local_addr()?, log_dir = %config.log_dir.display(), "listening");

    let (stop_tx, stop_rx) = watch::channel(false);
    let shutdown_events = events_tx.clone();
    tokio::spawn(async move {
        shutdown.await;
        let (done, wait) = oneshot::channel();
        if shutdown_events.send(Event::Shutdown { done }).is_ok() {
            let _ = wait.await;
        }
        let _ = stop_tx.send(true);
    });
    let stopped = |mut rx: watch::Receiver<bool>| async move {
        let _ = rx.wait_for(|stop| *stop).await;
    };
    let server = axum::serve(listener, app).with_graceful_shutdown(stopped(stop_rx.clone()));
    let deadline = async {
        stopped(stop_rx).await;
        tokio::time::sleep(CLOSE_GRACE).await;
    };
    tokio::select! {
        result = server => result?,
        _ = deadline => warn!("connections still open after {CLOSE_GRACE:?}; stopping anyway"),
    }
    drop(events_tx);
    let _ = coordinator.await;
    info!("server stopped");
    Ok(())
}
