//! WebSocket endpoint: fan-out of server messages and intake of client commands.

use std::io;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{sync_channel, Receiver, Sender, SyncSender, TryRecvError, TrySendError};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use tungstenite::{Message, WebSocket};

use crate::protocol::{decode_client, encode, ClientMessage, ServerMessage};

/// Messages a client may have queued before it is disconnected.
pub const CLIENT_BACKLOG: usize = 64;
const POLL: Duration = Duration::from_millis(10);

/// A decoded client message tagged with its sender.
#[derive(Clone, Debug, PartialEq)]
pub struct Command {
    pub client: Option<u64>,
    pub message: ClientMessage,
}

/// Connected clients, each behind a bounded outgoing queue.
#[derive(Debug)]
pub struct Hub {
    clients: Mutex<Vec<(u64, SyncSender<Arc<str>>)>>,
    next_id: AtomicU64,
    backlog: usize,
}

impl Hub {
    pub fn new(backlog: usize) -> Arc<Self> {
        Arc::new(Self {
            clients: Mutex::new(Vec::new()),
            next_id: AtomicU64::new(0),
            backlog,
        })
    }

    pub fn register(&self) -> (u64, Receiver<Arc<str>>) {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let (tx, rx) = sync_channel(self.backlog);
        self.clients.lock().unwrap().push((id, tx));
        (id, rx)
    }

    pub fn remove(&self, id: u64) {
        self.clients.lock().unwrap().retain(|(c, _)| *c != id);
    }

    pub fn client_count(&self) -> usize {
        self.clients.lock().unwrap().len()
    }

    /// Queues `msg` for every client without blocking. Clients whose queue
    /// is full are dropped. Returns the number of clients reached.
    pub fn broadcast(&self, msg: &ServerMessage) -> usize {
        let text: Arc<str> = encode(msg).into();
        let mut clients = self.clients.lock().unwrap();
        clients.retain(|(id, tx)| match tx.try_send(Arc::clone(&text)) {
            Ok(()) => true,
            Err(TrySendError::Full(_)) => {
                log::warn!("client {id} disconnected: {} undelivered messages", self.backlog);
                false
            }
            Err(TrySendError::Disconnected(_)) => false,
        });
        clients.len()
    }

    /// Queues `msg` for one client, with the same overflow rule as broadcast.
    pub fn send_to(&self, id: u64, msg: &ServerMessage) -> bool {
        let mut clients = self.clients.lock().unwrap();
        let Some(pos) = clients.iter().position(|(c, _)| *c == id) else {
            return false;
        };
        match clients[pos].1.try_send(encode(msg).into()) {
            Ok(()) => true,
            Err(e) => {
                if matches!(e, TrySendError::Full(_)) {
                    log::warn!("client {id} disconnected: {} undelivered messages", self.backlog);
                }
                clients.remove(pos);
                false
            }
        }
    }
}

/// Accepts WebSocket clients on a background thread.
pub struct Server {
    addr: SocketAddr,
    hub: Arc<Hub>,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl Server {
    /// Binds `127.0.0.1:port`; port 0 picks a free port.
    pub fn bind(port: u16, hub: Arc<Hub>, inbox: Sender<Command>) -> io::Result<Self> {
        let listener = TcpListener::bind(("127.0.0.1", port))?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let accept = {
            let (hub, stop) = (Arc::clone(&hub), Arc::clone(&stop));
            std::thread::Builder::new()
                .name("ws-accept".into())
                .spawn(move || accept_loop(listener, hub, inbox, stop))?
        };
        log::info!("serving on ws://{addr}");
        Ok(Self {
            addr,
            hub,
            stop,
            accept: Some(accept),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn hub(&self) -> &Arc<Hub> {
        &self.hub
    }

    /// Stops accepting and closes client connections once their queues drain.
    pub fn shutdown(mut self) {
        self.stop_threads();
    }

    fn stop_threads(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.stop_threads();
    }
}

fn accept_loop(listener: TcpListener, hub: Arc<Hub>, inbox: Sender<Command>, stop: Arc<AtomicBool>) {
    let mut workers = Vec::new();
    while !stop.load(Ordering::Relaxed) {
        match listener.accept() {
            Ok((stream, peer)) => {
                let (hub, inbox, stop) = (Arc::clone(&hub), inbox.clone(), Arc::clone(&stop));
                let spawned = std::thread::Builder::new().name(format!("ws-{peer}")).spawn(move || {
                    if let Err(e) = serve_client(stream, &hub, &inbox, &stop) {
                        log::info!("client {peer} closed: {e}");
                    }
                });
                match spawned {
                    Ok(h) => workers.push(h),
                    Err(e) => log::error!("cannot start client thread: {e}"),
                }
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => std::thread::sleep(POLL),
            Err(e) => {
                log::error!("accept failed: {e}");
                std::thread::sleep(POLL);
            }
        }
        workers.retain(|h| !h.is_finished());
    }
    for h in workers {
        let _ = h.join();
    }
}

fn is_timeout(e: &tungstenite::Error) -> bool {
    matches!(e, tungstenite::Error::Io(io) if matches!(io.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut))
}

fn serve_client(stream: TcpStream, hub: &Hub, inbox: &Sender<Command>, stop: &AtomicBool) -> Result<(), tungstenite::Error> {
    stream.set_nonblocking(false)?;
    stream.set_read_timeout(Some(Duration::from_secs(5)))?;
    stream.set_write_timeout(Some(Duration::from_secs(5)))?;
    let mut ws = tungstenite::accept(stream).map_err(|e| match e {
        tungstenite::HandshakeError::Failure(e) => e,
        tungstenite::HandshakeError::Interrupted(_) => tungstenite::Error::Io(io::ErrorKind::TimedOut.into()),
    })?;
    ws.get_mut().set_read_timeout(Some(POLL))?;
    let (id, outgoing) = hub.register();
    log::info!("client {id} connected");
    let result = client_loop(&mut ws, id, &outgoing, hub, inbox, stop);
    hub.remove(id);
    let _ = ws.close(None);
    let _ = ws.flush();
    log::info!("client {id} disconnected");
    result
}

fn client_loop(
    ws: &mut WebSocket<TcpStream>,
    id: u64,
    outgoing: &Receiver<Arc<str>>,
    hub: &Hub,
    inbox: &Sender<Command>,
    stop: &AtomicBool,
) -> Result<(), tungstenite::Error> {
    loop {
        loop {
            match outgoing.try_recv() {
                Ok(text) => ws.send(Message::text(&*text))?,
                Err(TryRecvError::Empty) => break,
                // Dropped by the hub or the server is shutting down.
                Err(TryRecvError::Disconnected) => return Ok(()),
            }
        }
        if stop.load(Ordering::Relaxed) {
            return Ok(());
        }
        match ws.read() {
            Ok(Message::Text(text)) => match decode_client(text.as_str()) {
                Ok(Some(message)) => {
                    if inbox.send(Command { client: Some(id), message }).is_err() {
                        return Ok(());
                    }
                }
                Ok(None) => {}
                Err(e) => {
                    hub.send_to(id, &ServerMessage::Error { message: e.to_string() });
                }
            },
            Ok(Message::Binary(_)) => {
                hub.send_to(
                    id,
                    &ServerMessage::Error {
                        message: "binary frames are not part of the protocol".into(),
                    },
                );
            }
            Ok(Message::Close(_)) => return Ok(()),
            Ok(_) => {}
            Err(e) if is_timeout(&e) => {}
            Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => return Ok(()),
            Err(e) => return Err(e),
        }
    }
}
