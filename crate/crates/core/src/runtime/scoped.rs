use std::cell::RefCell;
use std::collections::VecDeque;
use std::marker::PhantomData;
use std::sync::Arc;
use std::time::{Duration, Instant};

use super::cell::{ActorCell, ActorRef, Exec, Signal};
use super::system::System;
use super::{parse_req_failed, Envelope, EnvelopeKind, ExitReason, MessageId, RequestError, SendError};
use crate::interface::{ActorAddr, ActorHandle, Handle};
use crate::message::Message;

/// An actor owned by a regular thread. Receiving blocks the thread.
///
/// ```
/// use cafx::{behavior, behavior::case, message, runtime::{Context, Runtime}};
/// use std::time::Duration;
///
/// let rt = Runtime::new();
/// let doubler = rt.spawn(|_| behavior![case(|_: &mut Context, i: i32| i * 2)]);
/// let mut me = rt.scoped();
/// let reply = me.request(&doubler, message!(21i32), Duration::from_secs(5)).unwrap();
/// assert_eq!(reply.get_as::<i32>(0), Ok(42));
/// ```
pub struct ScopedActor {
    cell: ActorRef,
    signal: Arc<Signal>,
    system: Arc<System>,
    retained: RefCell<VecDeque<Envelope>>,
    _not_sync: PhantomData<*const ()>,
}

impl ScopedActor {
    pub(crate) fn new(system: Arc<System>) -> ScopedActor {
        let signal = Arc::new(Signal::new());
        let cell = system.new_cell(None, Exec::Scoped(signal.clone()), false, true);
        ScopedActor {
            cell,
            signal,
            system,
            retained: RefCell::new(VecDeque::new()),
            _not_sync: PhantomData,
        }
    }

    pub fn addr(&self) -> ActorAddr {
        self.cell.addr()
    }

    pub fn handle(&self) -> ActorHandle {
        ActorHandle::new(self.cell.clone())
    }

    pub fn send(&self, target: &impl Handle, msg: Message) -> Result<(), SendError> {
        if let Some(iface) = target.interface() {
            if !iface.accepts(&msg) {
                return Err(SendError::TypeMismatch);
            }
        }
        target
            .actor_ref()
            .enqueue(Envelope::new(msg, Some(self.cell.clone()), MessageId::ASYNC));
        Ok(())
    }

    /// Sends a request and blocks for the response. Other messages that
    /// arrive meanwhile are kept for [`ScopedActor::receive`].
    pub fn request(&mut self, target: &impl Handle, msg: Message, timeout: Duration) -> Result<Message, RequestError> {
        if let Some(iface) = target.interface() {
            if !iface.accepts(&msg) {
                return Err(crate::interface::InterfaceError::Mismatch(
                    "request matches no rule of the receiver".into(),
                )
                .into());
            }
        }
        let id = self.system.next_request_id();
        target
            .actor_ref()
            .enqueue(Envelope::new(msg, Some(self.cell.clone()), id));
        let deadline = Instant::now() + timeout;
        loop {
            let Some(env) = self.next_from_mailbox(deadline) else {
                return Err(RequestError::Timeout);
            };
            if env.id == id.response_id() {
                return match parse_req_failed(&env.content) {
                    Some(reason) => Err(RequestError::Down(reason)),
                    None => Ok(env.content),
                };
            }
            if !env.id.is_response() {
                self.retained.borrow_mut().push_back(env);
            }
        }
    }

    /// Next envelope, waiting up to `timeout`. Stale responses are dropped.
    pub fn receive(&mut self, timeout: Duration) -> Option<Envelope> {
        if let Some(env) = self.retained.borrow_mut().pop_front() {
            return Some(env);
        }
        let deadline = Instant::now() + timeout;
        loop {
            let env = self.next_from_mailbox(deadline)?;
            if !env.id.is_response() && !matches!(env.kind, EnvelopeKind::Timeout(_)) {
                return Some(env);
            }
        }
    }

    pub fn receive_message(&mut self, timeout: Duration) -> Option<Message> {
        self.receive(timeout).map(|e| e.content)
    }

    fn next_from_mailbox(&self, deadline: Instant) -> Option<Envelope> {
        loop {
            if let Some(env) = self.cell.mailbox.dequeue() {
                return Some(env);
            }
            if self.cell.mailbox.try_block() {
                let now = Instant::now();
                if now >= deadline {
                    return None;
                }
                self.signal.wait_timeout(deadline - now);
            }
        }
    }

    pub fn monitor(&self, target: &impl Handle) {
        target.actor_ref().add_monitor(&self.cell);
    }

    pub fn demonitor(&self, target: &impl Handle) {
        target.actor_ref().remove_monitor(&self.cell);
    }

    pub fn link(&self, target: &impl Handle) {
        ActorCell::link(&self.cell, target.actor_ref());
    }
}

impl Drop for ScopedActor {
    fn drop(&mut self) {
        let retained: Vec<Envelope> = self.retained.borrow_mut().drain(..).collect();
        self.cell.terminate(ExitReason::Normal, retained);
    }
}
