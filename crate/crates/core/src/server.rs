//! TCP transport around [`Broker`]. Connection tasks decode frames and feed
//! a single broker task; processing jobs run on a worker and come back
//! through the same queue.

use std::collections::HashMap;
use std::future::Future;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, oneshot};
use tokio::task::JoinHandle;

use crate::broker::{Action, Broker, ConnId, ProcessingJob};
use crate::codec::{Codec, Packet};
use crate::config::BrokerConfig;
use crate::processing::{ProcessingError, ProcessingRegistry, ProcessingResult, CNTPPL};

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("cannot bind {addr}: {source}")]
    BindFailure {
        addr: String,
        #[source]
        source: std::io::Error,
    },
    #[error("server task failed: {0}")]
    Join(String),
}

enum Event {
    Opened(ConnId, mpsc::UnboundedSender<Outbound>),
    Packet(ConnId, Packet),
    Lost(ConnId),
    Processed(ProcessingJob, Result<ProcessingResult, ProcessingError>),
}

enum Outbound {
    Packet(Packet),
    Close,
}

pub fn registry_for(config: &BrokerConfig) -> ProcessingRegistry {
    let mut registry = ProcessingRegistry::new();
    if config.capabilities.iter().any(|c| c == CNTPPL) {
        registry.register_stub_cntppl();
    }
    registry
}

pub struct Server {
    listener: TcpListener,
    config: BrokerConfig,
}

impl Server {
    pub async fn bind(config: BrokerConfig) -> Result<Self, ServerError> {
        let addr = format!("{}:{}", config.host, config.port);
        let listener = TcpListener::bind(&addr)
            .await
            .map_err(|source| ServerError::BindFailure { addr, source })?;
        Ok(Self { listener, config })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.listener.local_addr().expect("bound listener has an address")
    }

    /// Serve until `shutdown` resolves, then close every connection.
    pub async fn run(self, shutdown: impl Future<Output = ()>) -> Result<(), ServerError> {
        let registry = Arc::new(registry_for(&self.config));
        for cap in registry.capabilities() {
            log::info!(target: "capability", "{} ({}): {}", cap.keyword, serde_json::to_value(cap.returns).unwrap_or_default(), cap.desc);
        }
        for w in &self.config.windows {
            log::info!(target: "window", "{w} x {}s", self.config.window_unit_secs);
        }
        log::info!(target: "listening", "{} (clock {:?})", self.local_addr(), self.config.clock);

        let broker = Broker::new(self.config, Arc::clone(&registry));
        let (events_tx, events_rx) = mpsc::unbounded_channel();
        let (jobs_tx, jobs_rx) = mpsc::unbounded_channel();
        let worker = tokio::spawn(processing_worker(registry, jobs_rx, events_tx.clone()));
        let accept = tokio::spawn(accept_loop(self.listener, events_tx));
        event_loop(broker, events_rx, jobs_tx, shutdown).await;
        accept.abort();
        worker.abort();
        log::info!(target: "shutdown", "broker stopped");
        log::logger().flush();
        Ok(())
    }

    /// Run on the current runtime; the handle stops it.
    pub fn spawn(self) -> ServerHandle {
        let addr = self.local_addr();
        let (tx, rx) = oneshot::channel::<()>();
        let task = tokio::spawn(self.run(async move {
            let _ = rx.await;
        }));
        ServerHandle {
            addr,
            shutdown: Some(tx),
            task,
        }
    }
}

pub struct ServerHandle {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    task: JoinHandle<Result<(), ServerError>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub async fn shutdown(mut self) -> Result<(), ServerError> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        (&mut self.task).await.map_err(|e| ServerError::Join(e.to_string()))?
    }
}

async fn accept_loop(listener: TcpListener, events: mpsc::UnboundedSender<Event>) {
    let mut next: ConnId = 1;
    loop {
        match listener.accept().await {
            Ok((stream, peer)) => {
                let _ = stream.set_nodelay(true);
                let conn = next;
                next += 1;
                log::debug!(target: "accept", "connection {conn} from {peer}");
                let (tx, rx) = mpsc::unbounded_channel();
                if events.send(Event::Opened(conn, tx)).is_err() {
                    return;
                }
                tokio::spawn(connection(conn, stream, rx, events.clone()));
            }
            Err(e) => log::warn!(target: "accept", "{e}"),
        }
    }
}

async fn connection(
    conn: ConnId,
    mut stream: TcpStream,
    mut outbound: mpsc::UnboundedReceiver<Outbound>,
    events: mpsc::UnboundedSender<Event>,
) {
    let codec = Codec::default();
    let mut buf = Vec::with_capacity(4096);
    let mut chunk = vec![0u8; 64 * 1024];
    loop {
        tokio::select! {
            read = stream.read(&mut chunk) => {
                let n = match read {
                    Ok(0) | Err(_) => break,
                    Ok(n) => n,
                };
                buf.extend_from_slice(&chunk[..n]);
                loop {
                    match codec.decode(&buf) {
                        Ok(Some((packet, used))) => {
                            buf.drain(..used);
                            if events.send(Event::Packet(conn, packet)).is_err() {
                                return;
                            }
                        }
                        Ok(None) => break,
                        Err(e) => {
                            log::warn!(target: "protocol_error", "connection {conn}: {e}");
                            let _ = events.send(Event::Lost(conn));
                            return;
                        }
                    }
                }
            }
            out = outbound.recv() => match out {
                Some(Outbound::Packet(p)) => {
                    let bytes = match codec.encode(&p) {
                        Ok(b) => b,
                        Err(e) => {
                            log::warn!(target: "protocol_error", "cannot encode {} for {conn}: {e}", p.name());
                            continue;
                        }
                    };
                    if stream.write_all(&bytes).await.is_err() {
                        break;
                    }
                }
                Some(Outbound::Close) | None => {
                    let _ = stream.shutdown().await;
                    return;
                }
            }
        }
    }
    let _ = events.send(Event::Lost(conn));
}

async fn processing_worker(
    registry: Arc<ProcessingRegistry>,
    mut jobs: mpsc::UnboundedReceiver<ProcessingJob>,
    events: mpsc::UnboundedSender<Event>,
) {
    // Jobs run one at a time so results re-enter the queue in publish order.
    while let Some(job) = jobs.recv().await {
        let registry = Arc::clone(&registry);
        let (keyword, payload) = (job.keyword.clone(), job.payload.clone());
        let result = tokio::task::spawn_blocking(move || registry.invoke(&keyword, &payload))
            .await
            .unwrap_or_else(|e| Err(ProcessingError::ProcessingFailure(e.to_string())));
        if events.send(Event::Processed(job, result)).is_err() {
            return;
        }
    }
}

async fn event_loop(
    mut broker: Broker,
    mut events: mpsc::UnboundedReceiver<Event>,
    jobs: mpsc::UnboundedSender<ProcessingJob>,
    shutdown: impl Future<Output = ()>,
) {
    let mut writers: HashMap<ConnId, mpsc::UnboundedSender<Outbound>> = HashMap::new();
    let mut ticker = tokio::time::interval(Duration::from_secs(1));
    ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    tokio::pin!(shutdown);
    loop {
        let actions = tokio::select! {
            _ = &mut shutdown => break,
            _ = ticker.tick() => broker.tick(),
            ev = events.recv() => match ev {
                None => break,
                Some(Event::Opened(conn, tx)) => {
                    writers.insert(conn, tx);
                    broker.connection_opened(conn);
                    Vec::new()
                }
                Some(Event::Packet(conn, p)) => broker.handle_packet(conn, p),
                Some(Event::Lost(conn)) => {
                    writers.remove(&conn);
                    broker.connection_lost(conn)
                }
                Some(Event::Processed(job, result)) => broker.processing_complete(&job, result),
            }
        };
        for action in actions {
            match action {
                Action::Send(conn, p) => {
                    if let Some(w) = writers.get(&conn) {
                        let _ = w.send(Outbound::Packet(p));
                    }
                }
                Action::Close(conn) => {
                    if let Some(w) = writers.remove(&conn) {
                        let _ = w.send(Outbound::Close);
                    }
                }
                Action::Process(job) => {
                    let _ = jobs.send(job);
                }
            }
        }
    }
    for (_, w) in writers.drain() {
        let _ = w.send(Outbound::Close);
    }
}

/// Resolves on SIGTERM or Ctrl-C. Handlers are installed when this is
/// called, not when the future is first polled.
pub fn shutdown_signal() -> impl Future<Output = ()> {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        let term = signal(SignalKind::terminate());
        let int = signal(SignalKind::interrupt());
        async move {
            match (term, int) {
                (Ok(mut term), Ok(mut int)) => {
                    tokio::select! {
                        _ = term.recv() => {}
                        _ = int.recv() => {}
                    }
                }
                _ => {
                    let _ = tokio::signal::ctrl_c().await;
                }
            }
        }
    }
    #[cfg(not(unix))]
    {
        async {
            let _ = tokio::signal::ctrl_c().await;
        }
    }
}
