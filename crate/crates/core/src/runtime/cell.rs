use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Weak};
use std::time::Duration;

use parking_lot::{Condvar, Mutex};

use super::context::Context;
use super::system::System;
use super::{down_message, exit_message, req_failed_message, Envelope, EnvelopeKind, ExitReason, MessageId};
use crate::interface::ActorAddr;
use crate::mailbox::{CachedStackMailbox, EnqueueResult};
use crate::scheduler::{Resumable, ResumeResult};

/// Shared pointer to an actor.
pub type ActorRef = Arc<ActorCell>;

/// Receives envelopes for cells that live elsewhere (remote proxies, relays).
pub trait Forwarder: Send + Sync {
    fn forward(&self, cell: &ActorRef, env: Envelope);
}

/// One-shot wakeup flag for actors that own a thread.
pub(crate) struct Signal {
    state: Mutex<(bool, bool)>,
    cv: Condvar,
}

impl Signal {
    pub(crate) fn new() -> Signal {
        Signal {
            state: Mutex::new((false, false)),
            cv: Condvar::new(),
        }
    }

    pub(crate) fn notify(&self) {
        self.state.lock().0 = true;
        self.cv.notify_one();
    }

    /// Makes every current and future wait return `false`.
    pub(crate) fn close(&self) {
        self.state.lock().1 = true;
        self.cv.notify_all();
    }

    /// Waits for a notification. Returns `false` once closed.
    pub(crate) fn wait(&self) -> bool {
        let mut s = self.state.lock();
        while !s.0 && !s.1 {
            self.cv.wait(&mut s);
        }
        s.0 = false;
        !s.1
    }

    /// Waits up to `timeout`. Returns whether a notification arrived.
    pub(crate) fn wait_timeout(&self, timeout: Duration) -> bool {
        let mut s = self.state.lock();
        if !s.0 && !s.1 {
            self.cv.wait_for(&mut s, timeout);
        }
        let notified = s.0;
        s.0 = false;
        notified
    }
}

pub(crate) enum Exec {
    Scheduled,
    Detached(Arc<Signal>),
    Scoped(Arc<Signal>),
    Broker,
    Forward(Arc<dyn Forwarder>),
}

#[derive(Default)]
struct Control {
    exit_reason: Option<ExitReason>,
    links: Vec<Weak<ActorCell>>,
    monitors: Vec<Weak<ActorCell>>,
}

/// The runtime's representation of one actor.
pub struct ActorCell {
    addr: ActorAddr,
    pub(crate) mailbox: CachedStackMailbox<Envelope>,
    pub(crate) exec: Exec,
    pub(crate) system: Weak<System>,
    pub(crate) ctx: Mutex<Option<Box<Context>>>,
    control: Mutex<Control>,
    dead: AtomicBool,
    running: AtomicBool,
    counted: bool,
}

impl ActorCell {
    pub(crate) fn new(addr: ActorAddr, exec: Exec, system: Weak<System>, counted: bool) -> ActorCell {
        ActorCell {
            addr,
            mailbox: CachedStackMailbox::new(),
            exec,
            system,
            ctx: Mutex::new(None),
            control: Mutex::new(Control::default()),
            dead: AtomicBool::new(false),
            running: AtomicBool::new(false),
            counted,
        }
    }

    pub fn addr(&self) -> ActorAddr {
        self.addr
    }

    pub fn is_alive(&self) -> bool {
        !self.dead.load(Ordering::Acquire)
    }

    pub fn exit_reason(&self) -> Option<ExitReason> {
        self.control.lock().exit_reason.clone()
    }

    pub(crate) fn is_counted(&self) -> bool {
        self.counted
    }

    pub(crate) fn signal(&self) -> Option<&Arc<Signal>> {
        match &self.exec {
            Exec::Detached(s) | Exec::Scoped(s) => Some(s),
            _ => None,
        }
    }

    /// Delivers an envelope, scheduling the actor if it was waiting.
    pub fn enqueue(self: &Arc<Self>, env: Envelope) {
        if let Exec::Forward(f) = &self.exec {
            if self.is_alive() {
                f.forward(self, env);
            } else {
                self.bounce(env);
            }
            return;
        }
        match self.mailbox.enqueue(env) {
            EnqueueResult::UnblockedReader => self.wake(),
            EnqueueResult::PlainSuccess => {}
            EnqueueResult::RejectedClosed(env) => self.bounce(env),
        }
    }

    fn wake(self: &Arc<Self>) {
        match &self.exec {
            Exec::Scheduled => {
                if let Some(sys) = self.system.upgrade() {
                    sys.schedule(self.clone());
                }
            }
            Exec::Detached(s) | Exec::Scoped(s) => s.notify(),
            Exec::Broker => {
                if let Some(sys) = self.system.upgrade() {
                    sys.middleman().resume_broker(self.clone());
                }
            }
            Exec::Forward(_) => {}
        }
    }

    /// Answers a request that can no longer be processed by this actor.
    pub(crate) fn bounce(self: &Arc<Self>, env: Envelope) {
        let reason = self.exit_reason().unwrap_or(ExitReason::UnknownActor);
        self.bounce_with(env, &reason);
    }

    pub(crate) fn bounce_with(self: &Arc<Self>, env: Envelope, reason: &ExitReason) {
        if !matches!(env.kind, EnvelopeKind::Ordinary) || !env.id.is_request() {
            return;
        }
        if let Some(sender) = env.sender {
            sender.enqueue(Envelope::new(
                req_failed_message(reason),
                Some(self.clone()),
                env.id.response_id(),
            ));
        }
    }

    /// Registers `observer` for a down message. Monitoring a terminated
    /// actor yields the down message immediately.
    pub(crate) fn add_monitor(self: &Arc<Self>, observer: &ActorRef) {
        let mut c = self.control.lock();
        if let Some(reason) = c.exit_reason.clone() {
            drop(c);
            observer.enqueue(Envelope::new(down_message(self.addr, &reason), Some(self.clone()), MessageId::ASYNC));
            return;
        }
        c.monitors.push(Arc::downgrade(observer));
    }

    pub(crate) fn remove_monitor(&self, observer: &ActorRef) {
        let mut c = self.control.lock();
        if let Some(pos) = c.monitors.iter().position(|w| w.as_ptr() == Arc::as_ptr(observer)) {
            c.monitors.remove(pos);
        }
    }

    /// Links two actors. Linking to a terminated actor delivers its exit
    /// signal right away.
    pub(crate) fn link(a: &ActorRef, b: &ActorRef) {
        if Arc::ptr_eq(a, b) {
            return;
        }
        let (first, second) = if a.addr <= b.addr { (a, b) } else { (b, a) };
        let mut c1 = first.control.lock();
        let mut c2 = second.control.lock();
        match (c1.exit_reason.clone(), c2.exit_reason.clone()) {
            (None, None) => {
                c1.links.push(Arc::downgrade(second));
                c2.links.push(Arc::downgrade(first));
            }
            (Some(reason), None) => {
                drop((c1, c2));
                send_exit(first, second, &reason);
            }
            (None, Some(reason)) => {
                drop((c1, c2));
                send_exit(second, first, &reason);
            }
            (Some(_), Some(_)) => {}
        }
    }

    pub(crate) fn unlink(a: &ActorRef, b: &ActorRef) {
        let (first, second) = if a.addr <= b.addr { (a, b) } else { (b, a) };
        let mut c1 = first.control.lock();
        let mut c2 = second.control.lock();
        c1.links.retain(|w| w.as_ptr() != Arc::as_ptr(second));
        c2.links.retain(|w| w.as_ptr() != Arc::as_ptr(first));
    }

    /// Marks the actor done and notifies everyone depending on it. `pending`
    /// holds envelopes the actor still owned (retained or drained); requests
    /// among them are answered with an error.
    pub(crate) fn terminate(self: &Arc<Self>, reason: ExitReason, mut pending: Vec<Envelope>) {
        let (links, monitors) = {
            let mut c = self.control.lock();
            if c.exit_reason.is_some() {
                return;
            }
            c.exit_reason = Some(reason.clone());
            (std::mem::take(&mut c.links), std::mem::take(&mut c.monitors))
        };
        self.dead.store(true, Ordering::Release);
        if !matches!(self.exec, Exec::Forward(_)) {
            pending.extend(self.mailbox.close());
        }
        for env in pending {
            self.bounce_with(env, &reason);
        }
        for observer in monitors.iter().filter_map(Weak::upgrade) {
            observer.enqueue(Envelope::new(down_message(self.addr, &reason), Some(self.clone()), MessageId::ASYNC));
        }
        for peer in links.iter().filter_map(Weak::upgrade) {
            peer.control.lock().links.retain(|w| w.as_ptr() != Arc::as_ptr(self));
            send_exit(self, &peer, &reason);
        }
        if let Some(s) = self.signal() {
            s.close();
        }
        if let Some(sys) = self.system.upgrade() {
            sys.unregister(self);
        }
    }

    /// Runs the actor loop on the calling thread until the actor blocks,
    /// uses up its budget or terminates.
    fn run(&self, max_msgs: usize) -> ResumeResult {
        assert!(
            !self.running.swap(true, Ordering::AcqRel),
            "actor {} resumed on two threads",
            self.addr
        );
        let Some(mut ctx) = self.ctx.lock().take() else {
            self.running.store(false, Ordering::Release);
            return ResumeResult::Finished;
        };
        let mut handled = 0usize;
        loop {
            if ctx.step_retained() {
                return self.finish(ctx);
            }
            if handled >= max_msgs {
                *self.ctx.lock() = Some(ctx);
                self.running.store(false, Ordering::Release);
                return ResumeResult::Yielded;
            }
            match self.mailbox.dequeue() {
                Some(env) => {
                    handled += 1;
                    if ctx.step(env) {
                        return self.finish(ctx);
                    }
                }
                None => {
                    *self.ctx.lock() = Some(ctx);
                    self.running.store(false, Ordering::Release);
                    if self.mailbox.try_block() {
                        return ResumeResult::Awaiting;
                    }
                    assert!(!self.running.swap(true, Ordering::AcqRel), "actor resumed on two threads");
                    ctx = self.ctx.lock().take().expect("context present while running");
                }
            }
        }
    }

    fn finish(&self, ctx: Box<Context>) -> ResumeResult {
        drop(ctx);
        self.running.store(false, Ordering::Release);
        ResumeResult::Finished
    }

    /// Drops the actor state of a cell that will never run again.
    pub(crate) fn discard_state(&self) {
        if !self.running.load(Ordering::Acquire) {
            let ctx = self.ctx.lock().take();
            drop(ctx);
        }
    }
}

fn send_exit(source: &ActorRef, target: &ActorRef, reason: &ExitReason) {
    target.enqueue(Envelope {
        content: exit_message(source.addr, reason),
        sender: Some(source.clone()),
        id: MessageId::ASYNC,
        kind: EnvelopeKind::Exit {
            source: source.addr,
            reason: reason.clone(),
        },
    });
}

impl Resumable for ActorCell {
    fn resume(&self, max_msgs: usize) -> ResumeResult {
        self.run(max_msgs)
    }
}

impl fmt::Debug for ActorCell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ActorCell({})", self.addr)
    }
}
