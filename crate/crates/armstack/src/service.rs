//! Teleoperation service: the control-loop thread plus the HTTP/WebSocket
//! front end.
//!
//! Exactly one thread owns the controller and therefore the bus. Network
//! handlers reach it only through a command mailbox and read state from a
//! latest-value channel, so a slow client never backs up the loop.

use std::future::Future;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use armstack_core::robot_model::RobotDescription;
use armstack_core::transport::Transport;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use futures_util::{SinkExt, StreamExt};
use tokio::net::TcpListener;
use tokio::sync::{mpsc, oneshot, watch};
use tower_http::services::ServeDir;
use tracing::{debug, info};

use crate::controller::Controller;
use crate::wire::{parse_request, Ack, Command, ErrorCode, Rejection, RobotState, ServerMessage};

/// Default listen address; `ARMSTACK_BIND` overrides it in the CLI.
pub const DEFAULT_BIND: &str = "127.0.0.1:8700";

const MAILBOX_DEPTH: usize = 256;

struct Envelope {
    command: Command,
    reply: oneshot::Sender<Result<u64, Rejection>>,
}

/// Cloneable access to a running control loop.
#[derive(Clone)]
pub struct ControlHandle {
    mailbox: mpsc::Sender<Envelope>,
    state: watch::Receiver<Option<Arc<RobotState>>>,
    description: Arc<RobotDescription>,
}

impl ControlHandle {
    /// Queues `command` for the next tick and waits for its ack.
    pub async fn submit(&self, command: Command) -> Result<u64, Rejection> {
        let (reply, rx) = oneshot::channel();
        let stopped = || Rejection::new(ErrorCode::Fault, "control loop stopped");
        self.mailbox
            .send(Envelope { command, reply })
            .await
            .map_err(|_| stopped())?;
        rx.await.map_err(|_| stopped())?
    }

    pub fn latest(&self) -> Option<Arc<RobotState>> {
        self.state.borrow().clone()
    }

    pub fn subscribe(&self) -> watch::Receiver<Option<Arc<RobotState>>> {
        self.state.clone()
    }

    pub fn description(&self) -> &RobotDescription {
        &self.description
    }
}

/// Owns the control thread; dropping it does not stop the loop, call
/// [`ControlLoop::shutdown`].
pub struct ControlLoop {
    handle: ControlHandle,
    stop: Arc<AtomicBool>,
    thread: Option<thread::JoinHandle<()>>,
}

impl ControlLoop {
    /// Starts ticking `controller` at `rate_hz` on its own thread.
    pub fn spawn<T: Transport + Send + 'static>(controller: Controller<T>, rate_hz: f64) -> Self {
        let (mailbox, mut inbox) = mpsc::channel::<Envelope>(MAILBOX_DEPTH);
        let (state_tx, state_rx) = watch::channel(None);
        let stop = Arc::new(AtomicBool::new(false));
        let description = Arc::new(controller.description().clone());
        let period = Duration::from_secs_f64(1.0 / rate_hz);
        let flag = stop.clone();
        let thread = thread::Builder::new()
            .name("control-loop".into())
            .spawn(move || {
                let mut controller = controller;
                let mut last = Instant::now();
                let mut deadline = last;
                while !flag.load(Ordering::Relaxed) {
                    let mut batch = Vec::new();
                    while let Ok(env) = inbox.try_recv() {
                        batch.push(env);
                    }
                    let (commands, replies): (Vec<_>, Vec<_>) =
                        batch.into_iter().map(|e| (e.command, e.reply)).unzip();
                    let now = Instant::now();
                    let dt = now
                        .duration_since(last)
                        .as_secs_f64()
                        .max(period.as_secs_f64());
                    last = now;
                    let (acks, state) = controller.control_tick(dt, commands);
                    for (reply, ack) in replies.into_iter().zip(acks) {
                        let _ = reply.send(ack);
                    }
                    state_tx.send_replace(Some(Arc::new(state)));
                    deadline += period;
                    let now = Instant::now();
                    if deadline > now {
                        thread::sleep(deadline - now);
                    } else {
                        // overrun: restart the schedule instead of bursting
                        deadline = now;
                    }
                }
                debug!("control loop stopped");
            })
            .expect("spawn control thread");
        Self {
            handle: ControlHandle {
                mailbox,
                state: state_rx,
                description,
            },
            stop,
            thread: Some(thread),
        }
    }

    pub fn handle(&self) -> ControlHandle {
        self.handle.clone()
    }

    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// HTTP routes: `/ws`, `/state`, `/description` and static files under
/// `/ui` when a directory is given.
pub fn router(handle: ControlHandle, ui_dir: Option<PathBuf>) -> Router {
    let app = Router::new()
        .route("/ws", get(ws_upgrade))
        .route("/state", get(get_state))
        .route("/description", get(get_description))
        .with_state(handle);
    match ui_dir {
        Some(dir) => app.nest_service("/ui", ServeDir::new(dir)),
        None => app,
    }
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: TcpListener,
    handle: ControlHandle,
    ui_dir: Option<PathBuf>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    info!(addr = %listener.local_addr()?, "teleop service listening");
    axum::serve(listener, router(handle, ui_dir))
        .with_graceful_shutdown(shutdown)
        .await
}

async fn get_state(State(h): State<ControlHandle>) -> Response {
    match h.latest() {
        Some(s) => Json(&*s).into_response(),
        None => (StatusCode::SERVICE_UNAVAILABLE, "no state yet").into_response(),
    }
}

async fn get_description(State(h): State<ControlHandle>) -> Json<RobotDescription> {
    Json(h.description().clone())
}

async fn ws_upgrade(ws: WebSocketUpgrade, State(h): State<ControlHandle>) -> Response {
    ws.on_upgrade(move |socket| session(socket, h))
}

/// Handles one text message and returns the ack to send back.
async fn handle_text(h: &ControlHandle, text: &str) -> Ack {
    match parse_request(text) {
        Ok(req) => {
            let id = req.id;
            match h.submit(req.command).await {
                Ok(seq) => Ack::accepted(seq).with_id(id),
                Err(r) => Ack::rejected(r).with_id(id),
            }
        }
        Err((r, id)) => Ack::rejected(r).with_id(id),
    }
}

async fn session(socket: WebSocket, h: ControlHandle) {
    let (mut sink, mut stream) = socket.split();
    let (ack_tx, mut ack_rx) = mpsc::channel::<Ack>(64);
    let mut states = h.subscribe();
    let writer = tokio::spawn(async move {
        loop {
            let msg = tokio::select! {
                biased;
                ack = ack_rx.recv() => match ack {
                    Some(a) => ServerMessage::Ack(a),
                    None => break,
                },
                changed = states.changed() => {
                    if changed.is_err() {
                        break;
                    }
                    // latest-wins: intermediate states are skipped when
                    // this client falls behind
                    let Some(s) = states.borrow_and_update().clone() else { continue };
                    ServerMessage::State((*s).clone())
                }
            };
            if sink
                .send(Message::Text(msg.to_text().into()))
                .await
                .is_err()
            {
                break;
            }
        }
    });
    while let Some(Ok(msg)) = stream.next().await {
        let ack = match msg {
            Message::Text(t) => handle_text(&h, t.as_str()).await,
            Message::Binary(_) => Ack::rejected(Rejection::new(
                ErrorCode::MalformedJson,
                "binary frames are not accepted",
            )),
            Message::Close(_) => break,
            Message::Ping(_) | Message::Pong(_) => continue,
        };
        if ack_tx.send(ack).await.is_err() {
            break;
        }
    }
    drop(ack_tx);
    writer.abort();
    debug!("client disconnected");
}
