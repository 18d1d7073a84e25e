//! WebSocket front end. The simulation runs on its own thread, owns the
//! [`Controller`] and publishes serialized snapshots into a watch channel;
//! connections only read that channel and forward commands, so slow or
//! absent observers never hold up a tick.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc};
use std::thread;
use std::time::{Duration, Instant};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Query, State};
use axum::response::Response;
use axum::routing::get;
use axum::Router;
use serde::Deserialize;
use tokio::net::TcpListener;
use tokio::sync::{oneshot, watch};

use crate::controller::Controller;
use crate::protocol::{parse_command, CommandError, ControlCommand, Role, ServerMessage, PROTOCOL_VERSION};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GatewayConfig {
    /// Virtual seconds per wall-clock second; 0 runs as fast as possible.
    pub speed: f64,
    /// Snapshots per virtual second.
    pub snapshot_hz: u32,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            speed: 1.0,
            snapshot_hz: 30,
        }
    }
}

struct Request {
    command: ControlCommand,
    reply: oneshot::Sender<Result<u64, CommandError>>,
}

#[derive(Clone)]
struct Shared {
    commands: mpsc::Sender<Request>,
    snapshots: watch::Receiver<Arc<String>>,
    hello_info: Arc<crate::protocol::SessionInfo>,
    commander: Arc<AtomicBool>,
}

pub struct GatewayHandle {
    pub addr: SocketAddr,
    stop: Arc<AtomicBool>,
    shutdown: Option<oneshot::Sender<()>>,
    server: tokio::task::JoinHandle<()>,
    sim: Option<thread::JoinHandle<Controller>>,
}

impl GatewayHandle {
    /// Stops the server and the simulation thread, returning the controller
    /// in its final state.
    pub async fn shutdown(mut self) -> Controller {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        let _ = (&mut self.server).await;
        self.stop.store(true, Ordering::SeqCst);
        let sim = self.sim.take().expect("joined once");
        tokio::task::spawn_blocking(move || sim.join().expect("simulation thread panicked"))
            .await
            .expect("join task")
    }
}

/// Serves `/ws` (commands and snapshots) and `/health` on `listener`.
pub async fn spawn(controller: Controller, listener: TcpListener, config: GatewayConfig) -> std::io::Result<GatewayHandle> {
    let addr = listener.local_addr()?;
    let (cmd_tx, cmd_rx) = mpsc::channel::<Request>();
    let (snap_tx, snap_rx) = watch::channel(Arc::new(
        ServerMessage::Snapshot(Box::new(controller.snapshot())).to_json(),
    ));
    let stop = Arc::new(AtomicBool::new(false));
    let shared = Shared {
        commands: cmd_tx,
        snapshots: snap_rx,
        hello_info: Arc::new(controller.info()),
        commander: Arc::new(AtomicBool::new(false)),
    };
    let sim_stop = stop.clone();
    let sim = thread::Builder::new()
        .name("twinloop-sim".into())
        .spawn(move || simulate(controller, cmd_rx, snap_tx, config, sim_stop))?;

    let app = Router::new()
        .route("/ws", get(upgrade))
        .route("/health", get(|| async { "ok" }))
        .with_state(shared);
    let (shutdown_tx, shutdown_rx) = oneshot::channel::<()>();
    let server = tokio::spawn(async move {
        let graceful = async {
            let _ = shutdown_rx.await;
        };
        if let Err(e) = axum::serve(listener, app).with_graceful_shutdown(graceful).await {
            tracing::error!("gateway server failed: {e}");
        }
    });
    Ok(GatewayHandle {
        addr,
        stop,
        shutdown: Some(shutdown_tx),
        server,
        sim: Some(sim),
    })
}

fn publish(controller: &Controller, tx: &watch::Sender<Arc<String>>) {
    let msg = ServerMessage::Snapshot(Box::new(controller.snapshot())).to_json();
    tx.send_replace(Arc::new(msg));
}

fn simulate(
    mut controller: Controller,
    commands: mpsc::Receiver<Request>,
    snapshots: watch::Sender<Arc<String>>,
    config: GatewayConfig,
    stop: Arc<AtomicBool>,
) -> Controller {
    let snapshot_hz = config.snapshot_hz.max(1) as u64;
    // Wall-clock anchor for pacing: (instant, tick) when running resumed.
    let mut anchor: Option<(Instant, u64)> = None;
    while !stop.load(Ordering::SeqCst) {
        let mut changed = false;
        let wait = if controller.is_running() {
            Duration::ZERO
        } else {
            Duration::from_millis(5)
        };
        let mut first = commands.recv_timeout(wait).ok();
        while let Some(req) = first.take().or_else(|| commands.try_recv().ok()) {
            let result = controller.apply(req.command).map(|_| controller.session().tick());
            changed |= result.is_ok();
            let _ = req.reply.send(result);
        }

        if controller.is_resetting() {
            if let Err(e) = controller.advance() {
                tracing::error!("reset failed: {e}");
            }
            anchor = None;
            publish(&controller, &snapshots);
            continue;
        }
        if !controller.is_running() {
            anchor = None;
            if changed {
                publish(&controller, &snapshots);
            }
            continue;
        }

        let tick = controller.session().tick();
        let (t0, tick0) = *anchor.get_or_insert((Instant::now(), tick));
        let due = if config.speed > 0.0 {
            tick0 + (t0.elapsed().as_secs_f64() * 1000.0 * config.speed) as u64
        } else {
            tick + 10
        };
        if due <= tick {
            thread::sleep(Duration::from_millis(1));
            if changed {
                publish(&controller, &snapshots);
            }
            continue;
        }
        for _ in tick..due.min(tick + 100) {
            let before = controller.session().tick();
            match controller.advance() {
                Ok(true) => {}
                Ok(false) => break,
                Err(e) => {
                    tracing::error!("simulation stopped: {e}");
                    let _ = controller.apply(ControlCommand::Pause);
                    break;
                }
            }
            let after = controller.session().tick();
            if before * snapshot_hz / 1000 != after * snapshot_hz / 1000 {
                publish(&controller, &snapshots);
                changed = false;
            }
        }
        if changed {
            publish(&controller, &snapshots);
        }
    }
    controller
}

#[derive(Debug, Default, Deserialize)]
struct ConnectParams {
    role: Option<Role>,
}

async fn upgrade(ws: WebSocketUpgrade, Query(params): Query<ConnectParams>, State(shared): State<Shared>) -> Response {
    let wants_command = params.role == Some(Role::Commander);
    ws.on_upgrade(move |socket| connection(socket, wants_command, shared))
}

async fn send(socket: &mut WebSocket, msg: &ServerMessage) -> bool {
    socket.send(Message::Text(msg.to_json().into())).await.is_ok()
}

async fn connection(mut socket: WebSocket, wants_command: bool, shared: Shared) {
    let commander = wants_command
        && shared
            .commander
            .compare_exchange(false, true, Ordering::SeqCst, Ordering::SeqCst)
            .is_ok();
    let role = if commander { Role::Commander } else { Role::Observer };
    let hello = ServerMessage::Hello {
        v: PROTOCOL_VERSION,
        role,
        info: (*shared.hello_info).clone(),
    };
    let mut open = send(&mut socket, &hello).await;
    if open && wants_command && !commander {
        let busy = ServerMessage::Error {
            v: PROTOCOL_VERSION,
            code: "commander_taken".into(),
            path: None,
            message: "another commander is connected; joined as observer".into(),
        };
        open = send(&mut socket, &busy).await;
    }
    let mut snapshots = shared.snapshots.clone();
    snapshots.mark_changed();
    while open {
        tokio::select! {
            changed = snapshots.changed() => {
                if changed.is_err() {
                    break;
                }
                let text = snapshots.borrow_and_update().clone();
                open = socket.send(Message::Text(text.as_str().into())).await.is_ok();
            }
            incoming = socket.recv() => {
                let text = match incoming {
                    Some(Ok(Message::Text(t))) => t,
                    Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                    Some(Ok(_)) => continue,
                };
                let reply = if commander {
                    execute(&shared, text.as_str()).await
                } else {
                    ServerMessage::error(&CommandError::NotCommander)
                };
                open = send(&mut socket, &reply).await;
            }
        }
    }
    if commander {
        shared.commander.store(false, Ordering::SeqCst);
    }
}

async fn execute(shared: &Shared, text: &str) -> ServerMessage {
    let command = match parse_command(text) {
        Ok(c) => c,
        Err(e) => return ServerMessage::error(&e),
    };
    let (reply_tx, reply_rx) = oneshot::channel();
    let request = Request {
        command,
        reply: reply_tx,
    };
    if shared.commands.send(request).is_err() {
        return ServerMessage::error(&CommandError::Busy);
    }
    match reply_rx.await {
        Ok(Ok(tick)) => ServerMessage::Ack {
            v: PROTOCOL_VERSION,
            command: command.name().into(),
            tick,
        },
        Ok(Err(e)) => ServerMessage::error(&e),
        Err(_) => ServerMessage::error(&CommandError::Busy),
    }
}
