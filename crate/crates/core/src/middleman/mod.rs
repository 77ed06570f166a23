//! IO multiplexing: one event-loop thread per node hosts brokers (actors
//! that own sockets) and the node-to-node transport that backs remote
//! actor handles.
//!
//! Broker callbacks run on the loop thread and must return quickly. A
//! watchdog logs a warning for every broker run longer than the configured
//! threshold (100 ms by default).

mod basp;
mod transport;

use std::collections::{HashMap, VecDeque};
use std::io::{self, Read, Write};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{mpsc, Arc, OnceLock, Weak};
use std::thread::{self, JoinHandle, ThreadId};
use std::time::{Duration, Instant};

use mio::{Events, Interest, Poll, Token, Waker};
use parking_lot::Mutex;
use thiserror::Error;

use crate::atom::{atom, AtomConstant, AtomValue};
use crate::behavior::Behavior;
use crate::interface::{ActorAddr, ActorHandle, Handle, InterfaceError, MessagingInterface, NodeId, TypedHandle};
use crate::message::{deserialize, serialize, Message, TypeRegistry, Value};
use crate::runtime::cell::Exec;
use crate::runtime::{
    parse_down, req_failed_message, ActorRef, Context, Envelope, EnvelopeKind, ExitReason, Forwarder, MessageId,
    System,
};

pub use basp::{BaspError, BaspFrame, Handshake, Header, Operation, FLAG_EXIT, HEADER_LEN, MAGIC, VERSION};
pub use transport::Endpoint;
use transport::{Listener, Stream};

pub const NEW_CONN_ATOM: AtomValue = atom("new_conn");
pub const NEW_DATA_ATOM: AtomValue = atom("new_data");
pub const CONN_CLOSED_ATOM: AtomValue = atom("conn_close");
pub const ACC_CLOSED_ATOM: AtomValue = atom("acc_closed");
/// `(io_error, u64 handle)`: an IO request named a handle the broker does
/// not own.
pub const IO_ERROR_ATOM: AtomValue = atom("io_error");

pub type NewConnAtom = AtomConstant<{ NEW_CONN_ATOM.raw() }>;
pub type NewDataAtom = AtomConstant<{ NEW_DATA_ATOM.raw() }>;
pub type ConnClosedAtom = AtomConstant<{ CONN_CLOSED_ATOM.raw() }>;
pub type AccClosedAtom = AtomConstant<{ ACC_CLOSED_ATOM.raw() }>;
pub type IoErrorAtom = AtomConstant<{ IO_ERROR_ATOM.raw() }>;

const WAKER: Token = Token(0);
const READ_CHUNK: usize = 64 * 1024;
const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(10);

/// When the middleman hands buffered bytes to a broker. Stays in effect
/// until replaced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReceivePolicy {
    /// Deliver everything once at least `n` bytes are buffered.
    AtLeast(usize),
    /// Deliver chunks of exactly `n` bytes.
    Exactly(usize),
    /// Deliver whatever arrived, at most `n` bytes per event.
    AtMost(usize),
}

impl ReceivePolicy {
    /// Size of the next chunk to deliver with `available` bytes buffered.
    pub fn next_chunk(self, available: usize) -> Option<usize> {
        match self {
            ReceivePolicy::AtLeast(n) => (available > 0 && available >= n).then_some(available),
            ReceivePolicy::Exactly(n) => (n > 0 && available >= n).then_some(n),
            ReceivePolicy::AtMost(n) => (available > 0).then(|| available.min(n.max(1))),
        }
    }
}

/// Messages the middleman sends to brokers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BrokerEvent {
    /// `(new_conn, u64 acceptor, u64 connection)`
    NewConnection { source: u64, handle: u64 },
    /// `(new_data, u64 connection, bytes)`
    NewData { handle: u64, buf: Vec<u8> },
    /// `(conn_close, u64 connection)`
    ConnectionClosed { handle: u64 },
    /// `(acc_closed, u64 acceptor)`
    AcceptorClosed { handle: u64 },
}

impl BrokerEvent {
    pub fn to_message(&self) -> Message {
        match self {
            BrokerEvent::NewConnection { source, handle } => crate::message!(NEW_CONN_ATOM, *source, *handle),
            BrokerEvent::NewData { handle, buf } => crate::message!(NEW_DATA_ATOM, *handle, buf.clone()),
            BrokerEvent::ConnectionClosed { handle } => crate::message!(CONN_CLOSED_ATOM, *handle),
            BrokerEvent::AcceptorClosed { handle } => crate::message!(ACC_CLOSED_ATOM, *handle),
        }
    }

    pub fn parse(msg: &Message) -> Option<BrokerEvent> {
        let head = msg.atom_at(0)?;
        let u = |i| msg.get_as::<u64>(i).ok();
        match (head, msg.len()) {
            (a, 3) if a == NEW_CONN_ATOM => Some(BrokerEvent::NewConnection {
                source: u(1)?,
                handle: u(2)?,
            }),
            (a, 3) if a == NEW_DATA_ATOM => Some(BrokerEvent::NewData {
                handle: u(1)?,
                buf: msg.get_as(2).ok()?,
            }),
            (a, 2) if a == CONN_CLOSED_ATOM => Some(BrokerEvent::ConnectionClosed { handle: u(1)? }),
            (a, 2) if a == ACC_CLOSED_ATOM => Some(BrokerEvent::AcceptorClosed { handle: u(1)? }),
            _ => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum MiddlemanError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Interface(#[from] InterfaceError),
    #[error("handshake failed: {0}")]
    Handshake(String),
    #[error("the runtime is shut down")]
    Stopped,
}

/// IO operations of a broker, executed by the event loop.
pub struct BrokerIo {
    shared: Weak<Shared>,
    owner: ActorAddr,
}

impl BrokerIo {
    fn push(&self, cmd: Command) {
        if let Some(s) = self.shared.upgrade() {
            s.push(cmd);
        }
    }

    pub(crate) fn configure_read(&self, conn: u64, policy: ReceivePolicy) {
        self.push(Command::ConfigureRead {
            owner: self.owner,
            conn,
            policy,
        });
    }

    pub(crate) fn write(&self, conn: u64, bytes: Vec<u8>) {
        self.push(Command::Write {
            owner: self.owner,
            conn,
            bytes,
        });
    }

    pub(crate) fn close(&self, handle: u64) {
        self.push(Command::Close {
            owner: self.owner,
            handle,
        });
    }

    pub(crate) fn terminated(&self, addr: ActorAddr) {
        self.push(Command::BrokerDown(addr));
    }
}

#[derive(Clone)]
pub(crate) struct Published {
    actor: ActorRef,
    iface: Option<MessagingInterface>,
}

pub(crate) enum AcceptorKind {
    Broker(ActorRef),
    Basp(Published),
}

struct Acceptor {
    listener: Listener,
    kind: AcceptorKind,
}

type ConnectReply = mpsc::Sender<Result<Handshake, MiddlemanError>>;

pub(crate) struct BaspConn {
    established: bool,
    peer: NodeId,
    /// Client side: waiting for the server handshake.
    reply: Option<ConnectReply>,
    /// Server side: the actor announced in the handshake.
    published: Option<Published>,
}

pub(crate) enum ConnOwner {
    Broker(ActorRef),
    Basp(BaspConn),
}

struct Conn {
    stream: Stream,
    owner: ConnOwner,
    inbuf: Vec<u8>,
    outbuf: Vec<u8>,
    policy: Option<ReceivePolicy>,
    reuse: Option<Message>,
    writable: bool,
}

impl Conn {
    fn new(stream: Stream, owner: ConnOwner) -> Conn {
        Conn {
            stream,
            owner,
            inbuf: Vec::new(),
            outbuf: Vec::new(),
            policy: None,
            reuse: None,
            writable: false,
        }
    }
}

pub(crate) enum Command {
    Resume(ActorRef),
    AddAcceptor {
        handle: u64,
        listener: Listener,
        kind: AcceptorKind,
    },
    AddConn {
        handle: u64,
        stream: Stream,
        owner: ConnOwner,
    },
    PipeAccepted {
        acceptor: u64,
        stream: Stream,
    },
    ConfigureRead {
        owner: ActorAddr,
        conn: u64,
        policy: ReceivePolicy,
    },
    Write {
        owner: ActorAddr,
        conn: u64,
        bytes: Vec<u8>,
    },
    Close {
        owner: ActorAddr,
        handle: u64,
    },
    BrokerDown(ActorAddr),
    Forward {
        conn: u64,
        dst: ActorAddr,
        env: Envelope,
    },
    SendMonitor {
        conn: u64,
        target: ActorAddr,
    },
    LocalDown {
        id: u32,
        reason: ExitReason,
    },
}

pub(crate) struct Shared {
    self_weak: Weak<Shared>,
    system: Weak<System>,
    waker: Waker,
    commands: Mutex<VecDeque<Command>>,
    next_handle: AtomicU64,
    loop_thread: OnceLock<ThreadId>,
    stopped: AtomicBool,
    watchdog_ms: AtomicU64,
    proxies: Mutex<HashMap<ActorAddr, (ActorRef, u64)>>,
}

impl Shared {
    pub(crate) fn push(&self, cmd: Command) {
        self.commands.lock().push_back(cmd);
        if self.loop_thread.get() != Some(&thread::current().id()) {
            let _ = self.waker.wake();
        }
    }

    fn next_handle(&self) -> u64 {
        self.next_handle.fetch_add(1, Ordering::Relaxed)
    }

    /// The proxy for remote actor `addr` reachable over `conn`, created on
    /// first use.
    fn proxy(&self, addr: ActorAddr, conn: u64) -> Option<ActorRef> {
        let mut map = self.proxies.lock();
        if let Some((p, _)) = map.get(&addr) {
            if p.is_alive() {
                return Some(p.clone());
            }
        }
        let sys = self.system.upgrade()?;
        let fwd = Arc::new(ProxyForwarder {
            shared: self.self_weak.clone(),
            conn,
        });
        let cell = sys.new_cell(Some(addr), Exec::Forward(fwd), false, false);
        map.insert(addr, (cell.clone(), conn));
        drop(map);
        self.push(Command::SendMonitor { conn, target: addr });
        Some(cell)
    }
}

struct ProxyForwarder {
    shared: Weak<Shared>,
    conn: u64,
}

impl Forwarder for ProxyForwarder {
    fn forward(&self, cell: &ActorRef, env: Envelope) {
        match self.shared.upgrade() {
            Some(s) => s.push(Command::Forward {
                conn: self.conn,
                dst: cell.addr(),
                env,
            }),
            None => cell.bounce_with(env, &ExitReason::RemoteUnreachable),
        }
    }
}

/// Observes local actors on behalf of remote proxies.
struct DownRelay {
    shared: Weak<Shared>,
}

impl Forwarder for DownRelay {
    fn forward(&self, _cell: &ActorRef, env: Envelope) {
        if let (Some((addr, reason)), Some(s)) = (parse_down(&env.content), self.shared.upgrade()) {
            s.push(Command::LocalDown { id: addr.id, reason });
        }
    }
}

/// The IO multiplexer of one node.
pub struct Middleman {
    shared: Arc<Shared>,
    thread: Mutex<Option<JoinHandle<()>>>,
}

impl Middleman {
    pub(crate) fn start(system: Weak<System>) -> io::Result<Middleman> {
        let poll = Poll::new()?;
        let waker = Waker::new(poll.registry(), WAKER)?;
        let shared = Arc::new_cyclic(|w| Shared {
            self_weak: w.clone(),
            system,
            waker,
            commands: Mutex::new(VecDeque::new()),
            next_handle: AtomicU64::new(1),
            loop_thread: OnceLock::new(),
            stopped: AtomicBool::new(false),
            watchdog_ms: AtomicU64::new(100),
            proxies: Mutex::new(HashMap::new()),
        });
        let s = shared.clone();
        let thread = thread::Builder::new().name("cafx-middleman".into()).spawn(move || {
            let _ = s.loop_thread.set(thread::current().id());
            EventLoop::new(s, poll).run();
        })?;
        Ok(Middleman {
            shared,
            thread: Mutex::new(Some(thread)),
        })
    }

    pub(crate) fn resume_broker(&self, cell: ActorRef) {
        self.shared.push(Command::Resume(cell));
    }

    /// Broker runs longer than this are logged. `None` disables the check.
    pub fn set_watchdog(&self, threshold: Option<Duration>) {
        let ms = threshold.map(|d| d.as_millis().max(1) as u64).unwrap_or(0);
        self.shared.watchdog_ms.store(ms, Ordering::Relaxed);
    }

    pub fn stop(&self) {
        if self.shared.stopped.swap(true, Ordering::AcqRel) {
            return;
        }
        let _ = self.shared.waker.wake();
        if let Some(t) = self.thread.lock().take() {
            if t.thread().id() != thread::current().id() {
                let _ = t.join();
            }
        }
    }

    fn system(&self) -> Result<Arc<System>, MiddlemanError> {
        if self.shared.stopped.load(Ordering::Acquire) {
            return Err(MiddlemanError::Stopped);
        }
        self.shared.system.upgrade().ok_or(MiddlemanError::Stopped)
    }

    fn spawn_broker<F>(&self, sys: &System, install: impl FnOnce(&ActorRef), f: F) -> Result<ActorRef, MiddlemanError>
    where
        F: FnOnce(&mut Context) -> Behavior,
    {
        let shared = Arc::downgrade(&self.shared);
        let cell = sys.spawn_cell(Exec::Broker, None, |ctx| {
            let me = ctx.handle().actor_ref().clone();
            ctx.broker = Some(BrokerIo {
                shared,
                owner: me.addr(),
            });
            install(&me);
            Ok(f(ctx))
        })?;
        Ok(cell)
    }

    /// Spawns a broker listening on `endpoint`. The factory receives the
    /// acceptor handle; the result carries the bound port.
    pub fn spawn_server<F>(&self, endpoint: &Endpoint, f: F) -> Result<(ActorHandle, u16), MiddlemanError>
    where
        F: FnOnce(&mut Context, u64) -> Behavior,
    {
        let sys = self.system()?;
        let (listener, port) = transport::bind(endpoint)?;
        let handle = self.shared.next_handle();
        let pipe = matches!(listener, Listener::Pipe(_));
        let cell = self.spawn_broker(
            &sys,
            |me| {
                self.shared.push(Command::AddAcceptor {
                    handle,
                    listener,
                    kind: AcceptorKind::Broker(me.clone()),
                });
                if pipe {
                    transport::register_pipe(port, &self.shared, handle);
                }
            },
            |ctx| f(ctx, handle),
        )?;
        Ok((ActorHandle::new(cell), port))
    }

    /// Connects to `endpoint` and spawns a broker owning the connection.
    /// The factory receives the connection handle.
    pub fn spawn_client<F>(&self, endpoint: &Endpoint, f: F) -> Result<ActorHandle, MiddlemanError>
    where
        F: FnOnce(&mut Context, u64) -> Behavior,
    {
        let sys = self.system()?;
        let stream = transport::connect(endpoint)?;
        let handle = self.shared.next_handle();
        let cell = self.spawn_broker(
            &sys,
            |me| {
                self.shared.push(Command::AddConn {
                    handle,
                    stream,
                    owner: ConnOwner::Broker(me.clone()),
                });
            },
            |ctx| f(ctx, handle),
        )?;
        Ok(ActorHandle::new(cell))
    }

    /// Makes a local actor reachable from other nodes. Returns the bound
    /// port.
    pub fn publish(&self, actor: &impl Handle, endpoint: &Endpoint) -> Result<u16, MiddlemanError> {
        self.system()?;
        let (listener, port) = transport::bind(endpoint)?;
        let handle = self.shared.next_handle();
        let pipe = matches!(listener, Listener::Pipe(_));
        self.shared.push(Command::AddAcceptor {
            handle,
            listener,
            kind: AcceptorKind::Basp(Published {
                actor: actor.actor_ref().clone(),
                iface: actor.interface().cloned(),
            }),
        });
        if pipe {
            transport::register_pipe(port, &self.shared, handle);
        }
        Ok(port)
    }

    fn connect_node(&self, endpoint: &Endpoint) -> Result<(ActorRef, Option<MessagingInterface>), MiddlemanError> {
        self.system()?;
        let stream = transport::connect(endpoint)?;
        let handle = self.shared.next_handle();
        let (tx, rx) = mpsc::channel();
        self.shared.push(Command::AddConn {
            handle,
            stream,
            owner: ConnOwner::Basp(BaspConn {
                established: false,
                peer: NodeId::default(),
                reply: Some(tx),
                published: None,
            }),
        });
        let hs = match rx.recv_timeout(HANDSHAKE_TIMEOUT) {
            Ok(r) => r?,
            Err(_) => return Err(MiddlemanError::Handshake("no answer from the remote node".into())),
        };
        let proxy = self
            .shared
            .proxy(ActorAddr::new(hs.node, hs.actor), handle)
            .ok_or(MiddlemanError::Stopped)?;
        Ok((proxy, hs.interface))
    }

    /// Dynamic handle to the actor published at `endpoint`.
    pub fn remote_actor(&self, endpoint: &Endpoint) -> Result<ActorHandle, MiddlemanError> {
        let (proxy, _) = self.connect_node(endpoint)?;
        Ok(ActorHandle::new(proxy))
    }

    /// Typed handle to the actor published at `endpoint`. Fails unless
    /// `expected` is a subset of the published interface.
    pub fn remote_typed(&self, endpoint: &Endpoint, expected: &MessagingInterface) -> Result<TypedHandle, MiddlemanError> {
        let (proxy, published) = self.connect_node(endpoint)?;
        match published {
            Some(p) if expected.is_subset(&p) => Ok(TypedHandle::new(proxy, Arc::new(expected.clone()))),
            Some(p) => Err(InterfaceError::Mismatch(format!("{expected:?} is not a subset of {p:?}")).into()),
            None => Err(InterfaceError::Mismatch("the published actor is dynamically typed".into()).into()),
        }
    }

    /// Number of live proxies for remote actors.
    pub fn proxy_count(&self) -> usize {
        self.shared.proxies.lock().values().filter(|(p, _)| p.is_alive()).count()
    }
}

struct EventLoop {
    shared: Arc<Shared>,
    poll: Poll,
    node: NodeId,
    conns: HashMap<u64, Conn>,
    acceptors: HashMap<u64, Acceptor>,
    /// Local actor id -> connections whose peers hold a proxy for it.
    monitored: HashMap<u32, Vec<u64>>,
    relay: Option<ActorRef>,
    scratch: Vec<u8>,
}

impl EventLoop {
    fn new(shared: Arc<Shared>, poll: Poll) -> EventLoop {
        let sys = shared.system.upgrade();
        let node = sys.as_ref().map(|s| s.node()).unwrap_or_default();
        let relay = sys.map(|s| {
            let fwd = Arc::new(DownRelay {
                shared: Arc::downgrade(&shared),
            });
            s.new_cell(None, Exec::Forward(fwd), false, false)
        });
        EventLoop {
            shared,
            poll,
            node,
            conns: HashMap::new(),
            acceptors: HashMap::new(),
            monitored: HashMap::new(),
            relay,
            scratch: vec![0; READ_CHUNK],
        }
    }

    fn run(mut self) {
        let mut events = Events::with_capacity(256);
        loop {
            self.process_commands();
            if self.shared.stopped.load(Ordering::Acquire) {
                break;
            }
            if let Err(e) = self.poll.poll(&mut events, None) {
                if e.kind() == io::ErrorKind::Interrupted {
                    continue;
                }
                log::error!("middleman poll failed: {e}");
                break;
            }
            for ev in events.iter() {
                if ev.token() == WAKER {
                    continue;
                }
                let h = ev.token().0 as u64;
                if self.acceptors.contains_key(&h) {
                    self.accept_tcp(h);
                    continue;
                }
                if ev.is_writable() {
                    self.flush(h);
                }
                if ev.is_readable() || ev.is_read_closed() || ev.is_error() {
                    self.read(h);
                }
            }
        }
        self.teardown();
    }

    fn teardown(&mut self) {
        for (_, a) in self.acceptors.drain() {
            if let Listener::Pipe(p) = a.listener {
                transport::release_pipe(p);
            }
        }
        for (_, c) in self.conns.drain() {
            c.stream.shutdown();
        }
        self.shared.commands.lock().clear();
        self.shared.proxies.lock().clear();
    }

    fn process_commands(&mut self) {
        loop {
            let cmd = self.shared.commands.lock().pop_front();
            match cmd {
                Some(c) => self.command(c),
                None => return,
            }
        }
    }

    fn command(&mut self, cmd: Command) {
        match cmd {
            Command::Resume(cell) => self.run_broker(cell),
            Command::AddAcceptor {
                handle,
                mut listener,
                kind,
            } => {
                if let Listener::Tcp(l) = &mut listener {
                    if let Err(e) = self.poll.registry().register(l, Token(handle as usize), Interest::READABLE) {
                        log::warn!("cannot watch acceptor {handle}: {e}");
                        return;
                    }
                }
                self.acceptors.insert(handle, Acceptor { listener, kind });
            }
            Command::AddConn {
                handle,
                mut stream,
                owner,
            } => {
                if let Err(e) = self
                    .poll
                    .registry()
                    .register(&mut stream, Token(handle as usize), Interest::READABLE)
                {
                    log::warn!("cannot watch connection {handle}: {e}");
                    if let ConnOwner::Basp(BaspConn { reply: Some(tx), .. }) = owner {
                        let _ = tx.send(Err(e.into()));
                    }
                    return;
                }
                self.conns.insert(handle, Conn::new(stream, owner));
            }
            Command::PipeAccepted { acceptor, stream } => self.accepted(acceptor, stream),
            Command::ConfigureRead { owner, conn, policy } => {
                match self.conns.get_mut(&conn) {
                    Some(c) if owned_by(&c.owner, owner) => c.policy = Some(policy),
                    _ => return self.io_error(owner, conn),
                }
                self.deliver_data(conn);
            }
            Command::Write { owner, conn, bytes } => {
                match self.conns.get_mut(&conn) {
                    Some(c) if owned_by(&c.owner, owner) => c.outbuf.extend_from_slice(&bytes),
                    _ => return self.io_error(owner, conn),
                }
                self.flush(conn);
            }
            Command::Close { owner, handle } => {
                if self.conns.get(&handle).is_some_and(|c| owned_by(&c.owner, owner)) {
                    self.flush(handle);
                    self.close_conn(handle, false);
                } else if self
                    .acceptors
                    .get(&handle)
                    .is_some_and(|a| matches!(&a.kind, AcceptorKind::Broker(o) if o.addr() == owner))
                {
                    self.close_acceptor(handle, false);
                } else {
                    self.io_error(owner, handle);
                }
            }
            Command::BrokerDown(addr) => {
                let conns: Vec<u64> = self
                    .conns
                    .iter()
                    .filter(|(_, c)| owned_by(&c.owner, addr))
                    .map(|(h, _)| *h)
                    .collect();
                for h in conns {
                    self.flush(h);
                    self.close_conn(h, false);
                }
                let accs: Vec<u64> = self
                    .acceptors
                    .iter()
                    .filter(|(_, a)| matches!(&a.kind, AcceptorKind::Broker(o) if o.addr() == addr))
                    .map(|(h, _)| *h)
                    .collect();
                for h in accs {
                    self.close_acceptor(h, false);
                }
            }
            Command::Forward { conn, dst, env } => self.forward(conn, dst, env),
            Command::SendMonitor { conn, target } => {
                let Some(peer) = self.peer_of(conn) else {
                    return;
                };
                let mut f = BaspFrame::new(Operation::Monitor, self.node, peer);
                f.dest_actor = target.id;
                self.send_frame(conn, &f);
            }
            Command::LocalDown { id, reason } => {
                for conn in self.monitored.remove(&id).unwrap_or_default() {
                    self.send_kill(conn, id, &reason);
                }
            }
        }
    }

    fn run_broker(&mut self, cell: ActorRef) {
        let start = Instant::now();
        let result = crate::scheduler::Resumable::resume(&*cell, usize::MAX);
        let limit = self.shared.watchdog_ms.load(Ordering::Relaxed);
        let took = start.elapsed();
        if limit > 0 && took > Duration::from_millis(limit) {
            log::warn!("broker {} blocked the middleman for {took:?}", cell.addr());
        }
        if result == crate::scheduler::ResumeResult::Yielded {
            self.shared.push(Command::Resume(cell));
        }
    }

    fn io_error(&self, owner: ActorAddr, handle: u64) {
        if let Some(cell) = self.shared.system.upgrade().and_then(|s| s.lookup(owner.id)) {
            cell.enqueue(Envelope::new(crate::message!(IO_ERROR_ATOM, handle), None, MessageId::ASYNC));
        }
    }

    fn accept_tcp(&mut self, h: u64) {
        loop {
            let res = match self.acceptors.get(&h) {
                Some(Acceptor {
                    listener: Listener::Tcp(l),
                    ..
                }) => l.accept(),
                _ => return,
            };
            match res {
                Ok((s, _)) => {
                    let _ = s.set_nodelay(true);
                    self.accepted(h, Stream::Tcp(s));
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => return,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(e) => {
                    log::warn!("acceptor {h} failed: {e}");
                    self.close_acceptor(h, true);
                    return;
                }
            }
        }
    }

    fn accepted(&mut self, acceptor: u64, mut stream: Stream) {
        let owner = match self.acceptors.get(&acceptor).map(|a| &a.kind) {
            Some(AcceptorKind::Broker(o)) => ConnOwner::Broker(o.clone()),
            Some(AcceptorKind::Basp(p)) => ConnOwner::Basp(BaspConn {
                established: false,
                peer: NodeId::default(),
                reply: None,
                published: Some(p.clone()),
            }),
            None => {
                stream.shutdown();
                return;
            }
        };
        let handle = self.shared.next_handle();
        if let Err(e) = self
            .poll
            .registry()
            .register(&mut stream, Token(handle as usize), Interest::READABLE)
        {
            log::warn!("cannot watch connection {handle}: {e}");
            return;
        }
        let announce = match &owner {
            ConnOwner::Broker(o) => Some(o.clone()),
            ConnOwner::Basp(_) => None,
        };
        let published = match &owner {
            ConnOwner::Basp(b) => b.published.clone(),
            ConnOwner::Broker(_) => None,
        };
        self.conns.insert(handle, Conn::new(stream, owner));
        if let Some(o) = announce {
            o.enqueue(Envelope::new(
                BrokerEvent::NewConnection {
                    source: acceptor,
                    handle,
                }
                .to_message(),
                None,
                MessageId::ASYNC,
            ));
        }
        if let Some(p) = published {
            let hs = Handshake {
                node: self.node,
                actor: p.actor.addr().id,
                interface: p.iface,
            };
            let mut f = BaspFrame::new(Operation::ServerHandshake, self.node, NodeId::default());
            f.payload = hs.encode();
            self.send_frame(handle, &f);
        }
    }

    fn read(&mut self, h: u64) {
        let mut eof = false;
        {
            let Some(conn) = self.conns.get_mut(&h) else {
                return;
            };
            loop {
                match conn.stream.read(&mut self.scratch) {
                    Ok(0) => {
                        eof = true;
                        break;
                    }
                    Ok(n) => conn.inbuf.extend_from_slice(&self.scratch[..n]),
                    Err(e) if e.kind() == io::ErrorKind::WouldBlock => break,
                    Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                    Err(_) => {
                        eof = true;
                        break;
                    }
                }
            }
        }
        match self.conns.get(&h).map(|c| &c.owner) {
            Some(ConnOwner::Broker(_)) => self.deliver_data(h),
            Some(ConnOwner::Basp(_)) => self.basp_input(h),
            None => return,
        }
        if eof {
            self.close_conn(h, true);
        }
    }

    /// Hands buffered bytes to the owning broker as the read policy allows.
    fn deliver_data(&mut self, h: u64) {
        loop {
            let Some(conn) = self.conns.get_mut(&h) else {
                return;
            };
            let ConnOwner::Broker(owner) = &conn.owner else {
                return;
            };
            let Some(n) = conn.policy.and_then(|p| p.next_chunk(conn.inbuf.len())) else {
                return;
            };
            let mut msg = match conn.reuse.take() {
                Some(m) if m.ref_count() == 1 => m,
                _ => Message::new(vec![Value::Atom(NEW_DATA_ATOM), Value::U64(h), Value::Bytes(Vec::new())])
                    .expect("builtin values only"),
            };
            {
                let buf = msg.get_mut::<Vec<u8>>(2).expect("new_data carries bytes");
                buf.clear();
                buf.extend(conn.inbuf.drain(..n));
            }
            conn.reuse = Some(msg.clone());
            owner.enqueue(Envelope::new(msg, None, MessageId::ASYNC));
        }
    }

    fn flush(&mut self, h: u64) {
        let mut failed = false;
        {
            let Some(conn) = self.conns.get_mut(&h) else {
                return;
            };
            while !conn.outbuf.is_empty() {
                match conn.stream.write(&conn.outbuf) {
                    Ok(0) => {
                        failed = true;
                        break;
                    }
                    Ok(n) => {
                        conn.outbuf.drain(..n);
                    }
                    Err(e) if e.kind() == io::ErrorKind::WouldBlock => break,
                    Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                    Err(_) => {
                        failed = true;
                        break;
                    }
                }
            }
            let want = !conn.outbuf.is_empty() && !failed;
            if want != conn.writable {
                conn.writable = want;
                let interest = if want {
                    Interest::READABLE | Interest::WRITABLE
                } else {
                    Interest::READABLE
                };
                let _ = self
                    .poll
                    .registry()
                    .reregister(&mut conn.stream, Token(h as usize), interest);
            }
        }
        if failed {
            self.close_conn(h, true);
        }
    }

    fn close_conn(&mut self, h: u64, notify: bool) {
        let Some(mut conn) = self.conns.remove(&h) else {
            return;
        };
        let _ = self.poll.registry().deregister(&mut conn.stream);
        conn.stream.shutdown();
        match conn.owner {
            ConnOwner::Broker(owner) => {
                if notify {
                    owner.enqueue(Envelope::new(
                        BrokerEvent::ConnectionClosed { handle: h }.to_message(),
                        None,
                        MessageId::ASYNC,
                    ));
                }
            }
            ConnOwner::Basp(b) => self.connection_lost(h, b),
        }
    }

    fn close_acceptor(&mut self, h: u64, notify: bool) {
        let Some(mut acc) = self.acceptors.remove(&h) else {
            return;
        };
        match &mut acc.listener {
            Listener::Tcp(l) => {
                let _ = self.poll.registry().deregister(l);
            }
            Listener::Pipe(p) => transport::release_pipe(*p),
        }
        if let (true, AcceptorKind::Broker(owner)) = (notify, &acc.kind) {
            owner.enqueue(Envelope::new(
                BrokerEvent::AcceptorClosed { handle: h }.to_message(),
                None,
                MessageId::ASYNC,
            ));
        }
    }

    // --- node-to-node transport -----------------------------------------

    fn peer_of(&self, conn: u64) -> Option<NodeId> {
        match self.conns.get(&conn).map(|c| &c.owner) {
            Some(ConnOwner::Basp(b)) if b.established => Some(b.peer),
            _ => None,
        }
    }

    fn send_frame(&mut self, conn: u64, f: &BaspFrame) {
        match self.conns.get_mut(&conn) {
            Some(c) => f.encode_into(&mut c.outbuf),
            None => return,
        }
        self.flush(conn);
    }

    fn send_kill(&mut self, conn: u64, actor: u32, reason: &ExitReason) {
        let Some(peer) = self.peer_of(conn) else {
            return;
        };
        let mut f = BaspFrame::new(Operation::KillProxy, self.node, peer);
        f.source_actor = actor;
        f.payload = reason.code().to_be_bytes().to_vec();
        self.send_frame(conn, &f);
    }

    fn basp_input(&mut self, h: u64) {
        loop {
            let Some(conn) = self.conns.get_mut(&h) else {
                return;
            };
            match BaspFrame::decode_prefix(&conn.inbuf) {
                Ok(Some((frame, used))) => {
                    conn.inbuf.drain(..used);
                    self.basp_frame(h, frame);
                }
                Ok(None) => return,
                Err(e) => {
                    log::warn!("closing connection {h}: {e}");
                    self.close_conn(h, true);
                    return;
                }
            }
        }
    }

    fn basp_frame(&mut self, h: u64, f: BaspFrame) {
        let Some(Conn {
            owner: ConnOwner::Basp(b),
            ..
        }) = self.conns.get_mut(&h)
        else {
            return;
        };
        match f.operation {
            Operation::ServerHandshake | Operation::ClientHandshake => {
                let expected = if b.published.is_some() {
                    Operation::ClientHandshake
                } else {
                    Operation::ServerHandshake
                };
                if b.established || f.operation != expected {
                    return self.close_conn(h, true);
                }
                if f.version != VERSION {
                    if let Some(tx) = b.reply.take() {
                        let _ = tx.send(Err(MiddlemanError::Handshake(format!(
                            "protocol version {} is not supported",
                            f.version
                        ))));
                    }
                    return self.close_conn(h, true);
                }
                let hs = match Handshake::decode(&f.payload) {
                    Ok(hs) => hs,
                    Err(e) => {
                        if let Some(tx) = b.reply.take() {
                            let _ = tx.send(Err(MiddlemanError::Handshake(e.to_string())));
                        }
                        return self.close_conn(h, true);
                    }
                };
                b.established = true;
                b.peer = hs.node;
                if let Some(tx) = b.reply.take() {
                    let _ = tx.send(Ok(hs.clone()));
                    let mut reply = BaspFrame::new(Operation::ClientHandshake, self.node, hs.node);
                    reply.payload = Handshake {
                        node: self.node,
                        actor: 0,
                        interface: None,
                    }
                    .encode();
                    self.send_frame(h, &reply);
                }
            }
            _ if !b.established => self.close_conn(h, true),
            Operation::Dispatch => self.basp_dispatch(h, f),
            Operation::Monitor => self.basp_monitor(h, f.dest_actor),
            Operation::KillProxy => {
                let Ok(code) = <[u8; 4]>::try_from(f.payload.as_slice()) else {
                    return self.close_conn(h, true);
                };
                let addr = ActorAddr::new(f.source_node, f.source_actor);
                let proxy = self.shared.proxies.lock().remove(&addr);
                if let Some((p, _)) = proxy {
                    p.terminate(ExitReason::from_code(u32::from_be_bytes(code)), Vec::new());
                }
            }
        }
    }

    fn basp_dispatch(&mut self, h: u64, f: BaspFrame) {
        let msg = match deserialize(&f.payload, TypeRegistry::global()) {
            Ok(m) => m,
            Err(e) => {
                log::warn!("closing connection {h}: undecodable message: {e}");
                return self.close_conn(h, true);
            }
        };
        let id = MessageId(f.message_id);
        let source = ActorAddr::new(f.source_node, f.source_actor);
        let target = self.shared.system.upgrade().and_then(|s| s.lookup(f.dest_actor));
        let Some(target) = target else {
            self.send_kill(h, f.dest_actor, &ExitReason::UnknownActor);
            if id.is_request() && f.source_actor != 0 {
                if let (Some(peer), Ok(payload)) = (
                    self.peer_of(h),
                    serialize(&req_failed_message(&ExitReason::UnknownActor), TypeRegistry::global()),
                ) {
                    let mut back = BaspFrame::new(Operation::Dispatch, self.node, peer);
                    back.source_actor = f.dest_actor;
                    back.dest_actor = f.source_actor;
                    back.message_id = id.response_id().0;
                    back.payload = payload;
                    self.send_frame(h, &back);
                }
            }
            return;
        };
        let sender = if f.source_actor != 0 {
            self.shared.proxy(source, h)
        } else {
            None
        };
        let kind = if f.flags & FLAG_EXIT != 0 {
            let code = msg.get_as::<u32>(2).unwrap_or(ExitReason::UnhandledError.code());
            EnvelopeKind::Exit {
                source,
                reason: ExitReason::from_code(code),
            }
        } else {
            EnvelopeKind::Ordinary
        };
        target.enqueue(Envelope {
            content: msg,
            sender,
            id,
            kind,
        });
    }

    fn basp_monitor(&mut self, h: u64, actor: u32) {
        let cell = self.shared.system.upgrade().and_then(|s| s.lookup(actor));
        let (Some(cell), Some(relay)) = (cell, self.relay.clone()) else {
            return self.send_kill(h, actor, &ExitReason::UnknownActor);
        };
        let watchers = self.monitored.entry(actor).or_default();
        let first = watchers.is_empty();
        if !watchers.contains(&h) {
            watchers.push(h);
        }
        if first {
            cell.add_monitor(&relay);
        }
    }

    fn forward(&mut self, conn: u64, dst: ActorAddr, env: Envelope) {
        if matches!(env.kind, EnvelopeKind::Timeout(_)) {
            return;
        }
        let Some(peer) = self.peer_of(conn) else {
            return bounce(env, &ExitReason::RemoteUnreachable);
        };
        let payload = match serialize(&env.content, TypeRegistry::global()) {
            Ok(p) => p,
            Err(e) => {
                log::warn!("cannot send {:?} to {dst}: {e}", env.content);
                return bounce(env, &ExitReason::UnhandledError);
            }
        };
        let mut f = BaspFrame::new(Operation::Dispatch, self.node, peer);
        if matches!(env.kind, EnvelopeKind::Exit { .. }) {
            f.flags |= FLAG_EXIT;
        }
        f.source_actor = env
            .sender
            .as_ref()
            .map(|s| s.addr())
            .filter(|a| a.node == self.node)
            .map_or(0, |a| a.id);
        f.dest_actor = dst.id;
        f.message_id = env.id.0;
        f.payload = payload;
        self.send_frame(conn, &f);
    }

    /// Kills every proxy that used a lost connection.
    fn connection_lost(&mut self, h: u64, b: BaspConn) {
        if let Some(tx) = b.reply {
            let _ = tx.send(Err(MiddlemanError::Handshake("connection closed".into())));
        }
        let dead: Vec<ActorRef> = {
            let mut map = self.shared.proxies.lock();
            let addrs: Vec<ActorAddr> = map.iter().filter(|(_, (_, c))| *c == h).map(|(a, _)| *a).collect();
            addrs.iter().filter_map(|a| map.remove(a)).map(|(p, _)| p).collect()
        };
        for p in dead {
            p.terminate(ExitReason::RemoteUnreachable, Vec::new());
        }
        for watchers in self.monitored.values_mut() {
            watchers.retain(|c| *c != h);
        }
    }
}

fn owned_by(owner: &ConnOwner, addr: ActorAddr) -> bool {
    matches!(owner, ConnOwner::Broker(o) if o.addr() == addr)
}

fn bounce(env: Envelope, reason: &ExitReason) {
    if !env.id.is_request() {
        return;
    }
    if let Some(sender) = env.sender {
        sender.enqueue(Envelope::new(req_failed_message(reason), None, env.id.response_id()));
    }
}
