use std::ops::Deref;
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, Ordering};
use std::sync::{Arc, OnceLock, Weak};
use std::thread;
use std::time::{Duration, Instant};

use dashmap::DashMap;
use parking_lot::{Condvar, Mutex};
use thiserror::Error;

use super::cell::{ActorCell, ActorRef, Exec, Signal};
use super::context::Context;
use super::scoped::ScopedActor;
use super::timer::Timer;
use super::{Envelope, ExitReason, MessageId, SendError};
use crate::behavior::{derive_interface, Behavior};
use crate::interface::{ActorAddr, ActorHandle, Handle, InterfaceError, MessagingInterface, NodeId, TypedHandle};
use crate::message::Message;
use crate::middleman::Middleman;
use crate::scheduler::{Executor, Job, ResumeResult, Resumable, Scheduler, SchedulerPolicy, WorkStealing};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SpawnOptions {
    /// Runs on the shared worker pool.
    #[default]
    Scheduled,
    /// Gets a dedicated thread and may block.
    Detached,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("the scheduler is already running")]
    AlreadyStarted,
    #[error("invalid scheduler parameter: {0}")]
    Invalid(&'static str),
}

type ExecutorFactory = Box<dyn FnOnce() -> Arc<dyn Executor> + Send>;

/// Shared state of one actor runtime instance (one node).
pub struct System {
    node: NodeId,
    weak_self: Weak<System>,
    next_actor_id: AtomicU32,
    next_request_id: AtomicU64,
    registry: DashMap<u32, ActorRef>,
    live: Mutex<usize>,
    live_cv: Condvar,
    pending_executor: Mutex<Option<ExecutorFactory>>,
    executor: OnceLock<Arc<dyn Executor>>,
    timer: OnceLock<Timer>,
    middleman: OnceLock<Middleman>,
    stopped: AtomicBool,
}

fn env_usize(name: &str) -> Option<usize> {
    std::env::var(name).ok()?.trim().parse().ok().filter(|v| *v >= 1)
}

/// Worker count used when none is configured: `CAFX_WORKERS`, else the
/// number of available cores.
pub fn default_workers() -> usize {
    env_usize("CAFX_WORKERS").unwrap_or_else(|| thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Message budget per resume used when none is configured: `CAFX_MAX_MSGS`,
/// else unlimited.
pub fn default_max_msgs() -> usize {
    env_usize("CAFX_MAX_MSGS").unwrap_or(usize::MAX)
}

impl System {
    pub fn node(&self) -> NodeId {
        self.node
    }

    /// Configures the scheduler. Only possible before the first actor runs.
    pub fn set_scheduler<P: SchedulerPolicy>(&self, policy: P, workers: usize, max_msgs: usize) -> Result<(), ConfigError> {
        if workers == 0 {
            return Err(ConfigError::Invalid("workers must be at least 1"));
        }
        if max_msgs == 0 {
            return Err(ConfigError::Invalid("max_msgs must be at least 1"));
        }
        let mut pending = self.pending_executor.lock();
        if self.executor.get().is_some() {
            return Err(ConfigError::AlreadyStarted);
        }
        *pending = Some(Box::new(move || Scheduler::start(policy, workers, max_msgs) as Arc<dyn Executor>));
        Ok(())
    }

    pub(crate) fn executor(&self) -> &Arc<dyn Executor> {
        if let Some(e) = self.executor.get() {
            return e;
        }
        let mut pending = self.pending_executor.lock();
        self.executor.get_or_init(|| match pending.take() {
            Some(factory) => factory(),
            None => Scheduler::start(WorkStealing::new(), default_workers(), default_max_msgs()),
        })
    }

    pub fn num_workers(&self) -> usize {
        self.executor().num_workers()
    }

    pub fn max_msgs(&self) -> usize {
        self.executor().max_msgs()
    }

    pub(crate) fn schedule(&self, cell: ActorRef) {
        if self.stopped.load(Ordering::Acquire) {
            return;
        }
        self.executor().schedule(cell as Job);
    }

    pub(crate) fn timer(&self) -> &Timer {
        self.timer.get_or_init(Timer::start)
    }

    /// The IO multiplexer of this node, started on first use.
    pub fn middleman(&self) -> &Middleman {
        self.middleman
            .get_or_init(|| Middleman::start(self.weak_self.clone()).expect("cannot start the middleman"))
    }

    pub(crate) fn next_request_id(&self) -> MessageId {
        MessageId::request(self.next_request_id.fetch_add(1, Ordering::Relaxed))
    }

    fn next_addr(&self) -> ActorAddr {
        ActorAddr::new(self.node, self.next_actor_id.fetch_add(1, Ordering::Relaxed))
    }

    pub(crate) fn register(&self, cell: &ActorRef) {
        self.registry.insert(cell.addr().id, cell.clone());
        if cell.is_counted() {
            *self.live.lock() += 1;
        }
    }

    pub(crate) fn unregister(&self, cell: &ActorCell) {
        let removed = self
            .registry
            .remove_if(&cell.addr().id, |_, v| std::ptr::eq(Arc::as_ptr(v), cell))
            .is_some();
        if removed && cell.is_counted() {
            let mut live = self.live.lock();
            *live -= 1;
            if *live == 0 {
                self.live_cv.notify_all();
            }
        }
    }

    /// A fresh cell that is not backed by a behavior (proxies, relays,
    /// scoped actors).
    pub(crate) fn new_cell(&self, addr: Option<ActorAddr>, exec: Exec, counted: bool, register: bool) -> ActorRef {
        let addr = addr.unwrap_or_else(|| self.next_addr());
        let cell = Arc::new(ActorCell::new(addr, exec, self.weak_self.clone(), counted));
        if register {
            self.register(&cell);
        }
        cell
    }

    pub(crate) fn lookup(&self, id: u32) -> Option<ActorRef> {
        self.registry.get(&id).map(|c| c.clone())
    }

    /// Handle to a live local actor.
    pub fn resolve(&self, addr: ActorAddr) -> Option<ActorHandle> {
        if addr.node != self.node {
            return None;
        }
        self.lookup(addr.id).map(ActorHandle::new)
    }

    /// Number of running actors (scheduled, detached and brokers).
    pub fn live_actors(&self) -> usize {
        *self.live.lock()
    }

    pub fn spawn<F>(&self, f: F) -> ActorHandle
    where
        F: FnOnce(&mut Context) -> Behavior,
    {
        self.spawn_opts(SpawnOptions::Scheduled, f)
    }

    pub fn spawn_opts<F>(&self, opts: SpawnOptions, f: F) -> ActorHandle
    where
        F: FnOnce(&mut Context) -> Behavior,
    {
        let exec = match opts {
            SpawnOptions::Scheduled => Exec::Scheduled,
            SpawnOptions::Detached => Exec::Detached(Arc::new(Signal::new())),
        };
        let cell = self.spawn_cell(exec, None, |ctx| Ok(f(ctx))).expect("dynamic spawn cannot fail");
        ActorHandle::new(cell)
    }

    /// Spawns an actor that must implement exactly `iface`.
    pub fn spawn_typed<F>(&self, iface: MessagingInterface, f: F) -> Result<TypedHandle, InterfaceError>
    where
        F: FnOnce(&mut Context) -> Behavior,
    {
        let iface = Arc::new(iface);
        let cell = self.spawn_cell(Exec::Scheduled, Some(iface.clone()), |ctx| Ok(f(ctx)))?;
        Ok(TypedHandle::new(cell, iface))
    }

    pub(crate) fn spawn_cell<F>(
        &self,
        exec: Exec,
        declared: Option<Arc<MessagingInterface>>,
        f: F,
    ) -> Result<ActorRef, InterfaceError>
    where
        F: FnOnce(&mut Context) -> Result<Behavior, InterfaceError>,
    {
        let cell = self.new_cell(None, exec, true, true);
        let mut ctx = Box::new(Context::new(cell.clone(), self.weak_self.clone(), declared.clone()));
        let behavior = match f(&mut ctx) {
            Ok(b) => b,
            Err(e) => {
                ctx.finish(ExitReason::UnhandledError);
                return Err(e);
            }
        };
        if let Some(iface) = &declared {
            let derived = derive_interface(&behavior);
            if derived.as_ref() != Some(iface.as_ref()) {
                ctx.finish(ExitReason::UnhandledError);
                return Err(InterfaceError::Mismatch(format!(
                    "behavior implements {derived:?}, actor declares {iface:?}"
                )));
            }
        }
        ctx.set_behavior(behavior);
        if let Some(reason) = ctx.take_quit() {
            ctx.finish(reason);
            return Ok(cell);
        }
        *cell.ctx.lock() = Some(ctx);
        self.launch(&cell);
        Ok(cell)
    }

    fn launch(&self, cell: &ActorRef) {
        match &cell.exec {
            Exec::Scheduled => {
                if !cell.mailbox.try_block() {
                    self.schedule(cell.clone());
                }
            }
            Exec::Broker => {
                if !cell.mailbox.try_block() {
                    self.middleman().resume_broker(cell.clone());
                }
            }
            Exec::Detached(signal) => {
                let cell = cell.clone();
                let signal = signal.clone();
                thread::Builder::new()
                    .name(format!("cafx-detached-{}", cell.addr().id))
                    .spawn(move || loop {
                        match cell.resume(usize::MAX) {
                            ResumeResult::Finished => break,
                            ResumeResult::Yielded => continue,
                            ResumeResult::Awaiting => {
                                if !signal.wait() {
                                    break;
                                }
                            }
                        }
                    })
                    .expect("cannot spawn a detached actor thread");
            }
            Exec::Scoped(_) | Exec::Forward(_) => {}
        }
    }

    /// Sends from outside any actor.
    pub fn send(&self, target: &impl Handle, msg: Message) -> Result<(), SendError> {
        if let Some(iface) = target.interface() {
            if !iface.accepts(&msg) {
                return Err(SendError::TypeMismatch);
            }
        }
        target.actor_ref().enqueue(Envelope::new(msg, None, MessageId::ASYNC));
        Ok(())
    }

    /// An actor bound to the calling thread, for blocking interaction.
    pub fn scoped(&self) -> ScopedActor {
        ScopedActor::new(self.weak_self.upgrade().expect("system alive"))
    }

    /// Blocks until every spawned actor has terminated.
    pub fn await_all_actors_done(&self) {
        let mut live = self.live.lock();
        while *live > 0 {
            self.live_cv.wait(&mut live);
        }
    }

    /// Like [`System::await_all_actors_done`] with a deadline. Returns
    /// whether all actors finished.
    pub fn await_all_actors_done_timeout(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut live = self.live.lock();
        while *live > 0 {
            if self.live_cv.wait_until(&mut live, deadline).timed_out() {
                return *live == 0;
            }
        }
        true
    }

    /// Stops all threads. Actors that are still alive are discarded without
    /// running their termination protocol.
    pub fn shutdown(&self) {
        if self.stopped.swap(true, Ordering::AcqRel) {
            return;
        }
        if let Some(mm) = self.middleman.get() {
            mm.stop();
        }
        if let Some(e) = self.executor.get() {
            e.shutdown();
        }
        if let Some(t) = self.timer.get() {
            t.stop();
        }
        let cells: Vec<ActorRef> = self.registry.iter().map(|e| e.value().clone()).collect();
        self.registry.clear();
        for cell in cells {
            if let Some(s) = cell.signal() {
                s.close();
            }
            cell.discard_state();
        }
        *self.live.lock() = 0;
        self.live_cv.notify_all();
    }

    pub fn is_stopped(&self) -> bool {
        self.stopped.load(Ordering::Acquire)
    }
}

/// Owner of an actor runtime. Dropping it shuts the runtime down.
pub struct Runtime {
    system: Arc<System>,
}

impl Runtime {
    pub fn new() -> Runtime {
        let node = NodeId::random();
        let system = Arc::new_cyclic(|weak| System {
            node,
            weak_self: weak.clone(),
            next_actor_id: AtomicU32::new(1),
            next_request_id: AtomicU64::new(1),
            registry: DashMap::new(),
            live: Mutex::new(0),
            live_cv: Condvar::new(),
            pending_executor: Mutex::new(None),
            executor: OnceLock::new(),
            timer: OnceLock::new(),
            middleman: OnceLock::new(),
            stopped: AtomicBool::new(false),
        });
        Runtime { system }
    }

    /// Runtime with a configured scheduler.
    pub fn with_scheduler<P: SchedulerPolicy>(policy: P, workers: usize, max_msgs: usize) -> Result<Runtime, ConfigError> {
        let rt = Runtime::new();
        rt.set_scheduler(policy, workers, max_msgs)?;
        Ok(rt)
    }

    pub fn system(&self) -> &Arc<System> {
        &self.system
    }
}

impl Default for Runtime {
    fn default() -> Self {
        Runtime::new()
    }
}

impl Deref for Runtime {
    type Target = System;

    fn deref(&self) -> &System {
        &self.system
    }
}

impl Drop for Runtime {
    fn drop(&mut self) {
        self.system.shutdown();
    }
}
