//! Actor lifecycle and messaging: spawning, asynchronous sends, requests
//! with response skipping, behavior replacement, links and monitors.

pub(crate) mod cell;
mod context;
mod scoped;
mod system;
mod timer;

use std::fmt;

use thiserror::Error;

use crate::atom::{atom, AtomValue};
use crate::interface::{ActorAddr, InterfaceError};
use crate::message::Message;

pub use cell::{ActorCell, ActorRef, Forwarder};
pub use context::{Context, RequestBuilder};
pub use scoped::ScopedActor;
pub use system::{default_max_msgs, default_workers, ConfigError, Runtime, SpawnOptions, System};

/// Atom heading a down message: `(down, ActorAddr, u32 reason)`.
pub const DOWN_ATOM: AtomValue = atom("down");
/// Atom heading a trapped exit signal: `(exit, ActorAddr, u32 reason)`.
pub const EXIT_ATOM: AtomValue = atom("exit");
/// Atom heading an error response: `(req_failed, u32 reason)`.
pub const REQ_FAILED_ATOM: AtomValue = atom("req_failed");

const RESPONSE_BIT: u64 = 1 << 63;

/// Identifies requests and their responses. 0 marks asynchronous messages.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct MessageId(pub u64);

impl MessageId {
    pub const ASYNC: MessageId = MessageId(0);

    pub fn request(n: u64) -> MessageId {
        debug_assert!(n != 0 && n & RESPONSE_BIT == 0);
        MessageId(n)
    }

    pub fn is_async(self) -> bool {
        self.0 == 0
    }

    pub fn is_request(self) -> bool {
        self.0 != 0 && self.0 & RESPONSE_BIT == 0
    }

    pub fn is_response(self) -> bool {
        self.0 & RESPONSE_BIT != 0
    }

    pub fn response_id(self) -> MessageId {
        MessageId(self.0 | RESPONSE_BIT)
    }

    pub fn request_id(self) -> MessageId {
        MessageId(self.0 & !RESPONSE_BIT)
    }
}

impl fmt::Debug for MessageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_async() {
            f.write_str("async")
        } else if self.is_response() {
            write!(f, "resp#{}", self.request_id().0)
        } else {
            write!(f, "req#{}", self.0)
        }
    }
}

/// Why an actor terminated.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum ExitReason {
    Normal,
    UnhandledError,
    RemoteUnreachable,
    UnhandledRequestError,
    UnknownActor,
    /// Application-defined, code ≥ 16.
    User(u32),
    /// Received through a link; never nested.
    LinkPropagated(Box<ExitReason>),
}

const LINK_BIT: u32 = 0x8000_0000;

impl ExitReason {
    pub fn user(code: u32) -> ExitReason {
        assert!(code >= 16 && code & LINK_BIT == 0, "user exit codes start at 16");
        ExitReason::User(code)
    }

    pub fn linked(inner: ExitReason) -> ExitReason {
        match inner {
            ExitReason::LinkPropagated(r) => ExitReason::LinkPropagated(r),
            other => ExitReason::LinkPropagated(Box::new(other)),
        }
    }

    pub fn is_normal(&self) -> bool {
        *self == ExitReason::Normal
    }

    pub fn code(&self) -> u32 {
        match self {
            ExitReason::Normal => 1,
            ExitReason::UnhandledError => 2,
            ExitReason::RemoteUnreachable => 3,
            ExitReason::UnhandledRequestError => 4,
            ExitReason::UnknownActor => 5,
            ExitReason::User(c) => *c,
            ExitReason::LinkPropagated(inner) => LINK_BIT | inner.code(),
        }
    }

    pub fn from_code(code: u32) -> ExitReason {
        if code & LINK_BIT != 0 {
            return ExitReason::LinkPropagated(Box::new(ExitReason::from_code(code & !LINK_BIT)));
        }
        match code {
            1 => ExitReason::Normal,
            2 => ExitReason::UnhandledError,
            3 => ExitReason::RemoteUnreachable,
            4 => ExitReason::UnhandledRequestError,
            5 => ExitReason::UnknownActor,
            c if c >= 16 => ExitReason::User(c),
            _ => ExitReason::UnhandledError,
        }
    }

    /// The reason without link wrapping.
    pub fn root(&self) -> &ExitReason {
        match self {
            ExitReason::LinkPropagated(inner) => inner,
            other => other,
        }
    }
}

#[derive(Debug, Clone)]
pub enum EnvelopeKind {
    Ordinary,
    /// Link notification from a terminated actor.
    Exit { source: ActorAddr, reason: ExitReason },
    /// A request deadline expired.
    Timeout(MessageId),
}

/// A message in flight together with its routing metadata.
#[derive(Clone)]
pub struct Envelope {
    pub content: Message,
    pub sender: Option<ActorRef>,
    pub id: MessageId,
    pub kind: EnvelopeKind,
}

impl Envelope {
    pub fn new(content: Message, sender: Option<ActorRef>, id: MessageId) -> Envelope {
        Envelope {
            content,
            sender,
            id,
            kind: EnvelopeKind::Ordinary,
        }
    }

    pub fn sender_addr(&self) -> Option<ActorAddr> {
        self.sender.as_ref().map(|s| s.addr())
    }
}

impl fmt::Debug for Envelope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Envelope")
            .field("content", &self.content)
            .field("sender", &self.sender_addr())
            .field("id", &self.id)
            .field("kind", &self.kind)
            .finish()
    }
}

pub fn down_message(source: ActorAddr, reason: &ExitReason) -> Message {
    crate::message!(DOWN_ATOM, source, reason.code())
}

pub fn exit_message(source: ActorAddr, reason: &ExitReason) -> Message {
    crate::message!(EXIT_ATOM, source, reason.code())
}

pub fn req_failed_message(reason: &ExitReason) -> Message {
    crate::message!(REQ_FAILED_ATOM, reason.code())
}

/// Decodes a down message into its source and reason.
pub fn parse_down(msg: &Message) -> Option<(ActorAddr, ExitReason)> {
    if msg.len() != 3 || msg.atom_at(0) != Some(DOWN_ATOM) {
        return None;
    }
    Some((msg.get_as(1).ok()?, ExitReason::from_code(msg.get_as(2).ok()?)))
}

pub fn parse_req_failed(msg: &Message) -> Option<ExitReason> {
    if msg.len() != 2 || msg.atom_at(0) != Some(REQ_FAILED_ATOM) {
        return None;
    }
    Some(ExitReason::from_code(msg.get_as(1).ok()?))
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RequestError {
    #[error("request timed out")]
    Timeout,
    #[error("receiver is down: {0:?}")]
    Down(ExitReason),
    #[error("response did not match the installed handler")]
    UnexpectedResponse,
    #[error(transparent)]
    Interface(#[from] InterfaceError),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SendError {
    #[error("message does not match any rule of the receiver's interface")]
    TypeMismatch,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn message_id_pairing() {
        let req = MessageId::request(42);
        assert!(req.is_request() && !req.is_response());
        let resp = req.response_id();
        assert!(resp.is_response() && !resp.is_request());
        assert_eq!(resp.request_id(), req);
        assert_eq!(resp.0, 42 | (1 << 63));
        assert!(MessageId::ASYNC.is_async());
    }

    #[test]
    fn exit_codes_round_trip() {
        for r in [
            ExitReason::Normal,
            ExitReason::UnhandledError,
            ExitReason::RemoteUnreachable,
            ExitReason::UnhandledRequestError,
            ExitReason::UnknownActor,
            ExitReason::user(16),
            ExitReason::linked(ExitReason::user(99)),
        ] {
            assert_eq!(ExitReason::from_code(r.code()), r);
        }
        let twice = ExitReason::linked(ExitReason::linked(ExitReason::user(16)));
        assert_eq!(twice, ExitReason::linked(ExitReason::user(16)));
        assert_eq!(twice.root(), &ExitReason::User(16));
    }

    #[test]
    fn system_messages_parse() {
        let addr = ActorAddr::new(crate::interface::NodeId::from_bytes([1; 16]), 9);
        let m = down_message(addr, &ExitReason::user(16));
        assert_eq!(parse_down(&m), Some((addr, ExitReason::User(16))));
        assert_eq!(parse_req_failed(&req_failed_message(&ExitReason::Normal)), Some(ExitReason::Normal));
        assert_eq!(parse_down(&crate::message!(1i32)), None);
    }
}
