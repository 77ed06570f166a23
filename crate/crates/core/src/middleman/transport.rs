use std::collections::HashMap;
use std::io::{self, Read, Write};
use std::net::{SocketAddr, ToSocketAddrs};
use std::sync::{Arc, OnceLock, Weak};

use mio::event::Source;
use mio::net::{TcpListener, TcpStream, UnixStream};
use mio::{Interest, Registry, Token};
use parking_lot::Mutex;

use super::{Command, Shared};

/// Where a server listens or a client connects.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Endpoint {
    Tcp { host: String, port: u16 },
    /// In-process transport; port 0 picks a free pipe port when listening.
    Pipe(u16),
}

impl Endpoint {
    pub fn tcp(host: impl Into<String>, port: u16) -> Endpoint {
        Endpoint::Tcp {
            host: host.into(),
            port,
        }
    }

    pub fn localhost(port: u16) -> Endpoint {
        Endpoint::tcp("127.0.0.1", port)
    }

    /// The same endpoint with another port.
    pub fn with_port(&self, port: u16) -> Endpoint {
        match self {
            Endpoint::Tcp { host, .. } => Endpoint::Tcp {
                host: host.clone(),
                port,
            },
            Endpoint::Pipe(_) => Endpoint::Pipe(port),
        }
    }
}

pub(crate) enum Stream {
    Tcp(TcpStream),
    Unix(UnixStream),
}

impl Read for Stream {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        match self {
            Stream::Tcp(s) => s.read(buf),
            Stream::Unix(s) => s.read(buf),
        }
    }
}

impl Write for Stream {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        match self {
            Stream::Tcp(s) => s.write(buf),
            Stream::Unix(s) => s.write(buf),
        }
    }

    fn flush(&mut self) -> io::Result<()> {
        match self {
            Stream::Tcp(s) => s.flush(),
            Stream::Unix(s) => s.flush(),
        }
    }
}

impl Stream {
    pub(crate) fn shutdown(&self) {
        let _ = match self {
            Stream::Tcp(s) => s.shutdown(std::net::Shutdown::Both),
            Stream::Unix(s) => s.shutdown(std::net::Shutdown::Both),
        };
    }
}

impl Source for Stream {
    fn register(&mut self, r: &Registry, t: Token, i: Interest) -> io::Result<()> {
        match self {
            Stream::Tcp(s) => s.register(r, t, i),
            Stream::Unix(s) => s.register(r, t, i),
        }
    }

    fn reregister(&mut self, r: &Registry, t: Token, i: Interest) -> io::Result<()> {
        match self {
            Stream::Tcp(s) => s.reregister(r, t, i),
            Stream::Unix(s) => s.reregister(r, t, i),
        }
    }

    fn deregister(&mut self, r: &Registry) -> io::Result<()> {
        match self {
            Stream::Tcp(s) => s.deregister(r),
            Stream::Unix(s) => s.deregister(r),
        }
    }
}

pub(crate) enum Listener {
    Tcp(TcpListener),
    Pipe(u16),
}

fn resolve(host: &str, port: u16) -> io::Result<SocketAddr> {
    (host, port)
        .to_socket_addrs()?
        .next()
        .ok_or_else(|| io::Error::new(io::ErrorKind::NotFound, format!("cannot resolve {host}")))
}

/// Binds `endpoint`. Returns the listener and the actual port. Pipe
/// listeners are announced separately with [`register_pipe`].
pub(crate) fn bind(endpoint: &Endpoint) -> io::Result<(Listener, u16)> {
    match endpoint {
        Endpoint::Tcp { host, port } => {
            let std = std::net::TcpListener::bind(resolve(host, *port)?)?;
            std.set_nonblocking(true)?;
            let port = std.local_addr()?.port();
            Ok((Listener::Tcp(TcpListener::from_std(std)), port))
        }
        Endpoint::Pipe(port) => {
            let p = reserve_pipe(*port)?;
            Ok((Listener::Pipe(p), p))
        }
    }
}

/// Opens a connection. Blocks until connected.
pub(crate) fn connect(endpoint: &Endpoint) -> io::Result<Stream> {
    match endpoint {
        Endpoint::Tcp { host, port } => {
            let std = std::net::TcpStream::connect(resolve(host, *port)?)?;
            std.set_nodelay(true)?;
            std.set_nonblocking(true)?;
            Ok(Stream::Tcp(TcpStream::from_std(std)))
        }
        Endpoint::Pipe(port) => connect_pipe(*port).map(Stream::Unix),
    }
}

struct PipeEntry {
    shared: Weak<Shared>,
    acceptor: u64,
}

struct PipeTable {
    entries: HashMap<u16, Option<PipeEntry>>,
    next: u16,
}

fn pipes() -> &'static Mutex<PipeTable> {
    static PIPES: OnceLock<Mutex<PipeTable>> = OnceLock::new();
    PIPES.get_or_init(|| {
        Mutex::new(PipeTable {
            entries: HashMap::new(),
            next: 1,
        })
    })
}

fn reserve_pipe(port: u16) -> io::Result<u16> {
    let mut t = pipes().lock();
    let port = if port == 0 {
        let mut p = t.next;
        while p == 0 || t.entries.contains_key(&p) {
            p = p.wrapping_add(1);
        }
        t.next = p.wrapping_add(1);
        p
    } else {
        port
    };
    if t.entries.contains_key(&port) {
        return Err(io::Error::new(io::ErrorKind::AddrInUse, format!("pipe port {port} in use")));
    }
    t.entries.insert(port, None);
    Ok(port)
}

/// Makes a reserved pipe port accept connections.
pub(crate) fn register_pipe(port: u16, shared: &Arc<Shared>, acceptor: u64) {
    pipes().lock().entries.insert(
        port,
        Some(PipeEntry {
            shared: Arc::downgrade(shared),
            acceptor,
        }),
    );
}

pub(crate) fn release_pipe(port: u16) {
    pipes().lock().entries.remove(&port);
}

fn connect_pipe(port: u16) -> io::Result<UnixStream> {
    let (shared, acceptor) = {
        let t = pipes().lock();
        match t.entries.get(&port) {
            Some(Some(e)) => (e.shared.upgrade(), e.acceptor),
            _ => (None, 0),
        }
    };
    let shared = shared.ok_or_else(|| {
        io::Error::new(io::ErrorKind::ConnectionRefused, format!("no listener on pipe port {port}"))
    })?;
    let (server, client) = UnixStream::pair()?;
    shared.push(Command::PipeAccepted {
        acceptor,
        stream: Stream::Unix(server),
    });
    Ok(client)
}
