use std::any::Any;
use std::collections::VecDeque;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{Arc, Weak};
use std::time::{Duration, Instant};

use super::cell::ActorRef;
use super::system::{SpawnOptions, System};
use super::{
    parse_down, parse_req_failed, Envelope, EnvelopeKind, ExitReason, MessageId, RequestError, SendError,
};
use crate::behavior::{case, derive_interface, Behavior, Handler, MatchCase, MatchOutcome};
use crate::interface::{ActorAddr, ActorHandle, Handle, InterfaceError, MessagingInterface, TypeTag, TypedHandle};
use crate::message::Message;
use crate::middleman::{BrokerIo, ReceivePolicy};

type ErrorHandler = Box<dyn FnOnce(&mut Context, RequestError) + Send>;

struct Pending {
    id: MessageId,
    target: ActorAddr,
    handler: Behavior,
    on_error: Option<ErrorHandler>,
}

/// State of a running actor, passed to every callback.
pub struct Context {
    self_cell: Option<ActorRef>,
    system: Weak<System>,
    behavior: Behavior,
    declared: Option<Arc<MessagingInterface>>,
    retained: VecDeque<Envelope>,
    scan: VecDeque<Envelope>,
    rescan: bool,
    pending: Vec<Pending>,
    state: Option<Box<dyn Any + Send>>,
    trap_exit: bool,
    quit: Option<ExitReason>,
    current_sender: Option<ActorRef>,
    current_id: MessageId,
    replied: bool,
    pub(crate) broker: Option<BrokerIo>,
}

impl Context {
    pub(crate) fn new(cell: ActorRef, system: Weak<System>, declared: Option<Arc<MessagingInterface>>) -> Context {
        Context {
            self_cell: Some(cell),
            system,
            behavior: Behavior::default(),
            declared,
            retained: VecDeque::new(),
            scan: VecDeque::new(),
            rescan: false,
            pending: Vec::new(),
            state: None,
            trap_exit: false,
            quit: None,
            current_sender: None,
            current_id: MessageId::ASYNC,
            replied: false,
            broker: None,
        }
    }

    /// A context that belongs to no actor. Sends from it are anonymous.
    pub fn standalone() -> Context {
        Context {
            self_cell: None,
            system: Weak::new(),
            behavior: Behavior::default(),
            declared: None,
            retained: VecDeque::new(),
            scan: VecDeque::new(),
            rescan: false,
            pending: Vec::new(),
            state: None,
            trap_exit: false,
            quit: None,
            current_sender: None,
            current_id: MessageId::ASYNC,
            replied: false,
            broker: None,
        }
    }

    pub(crate) fn set_behavior(&mut self, b: Behavior) {
        self.behavior = b;
    }

    pub(crate) fn take_quit(&mut self) -> Option<ExitReason> {
        self.quit.take()
    }

    /// Address of this actor (the default address for standalone contexts).
    pub fn addr(&self) -> ActorAddr {
        self.self_cell.as_ref().map(|c| c.addr()).unwrap_or_default()
    }

    pub fn handle(&self) -> ActorHandle {
        ActorHandle::new(self.self_cell.clone().expect("standalone context has no handle"))
    }

    /// Typed handle to this actor, for typed actors.
    pub fn typed_handle(&self) -> Option<TypedHandle> {
        let cell = self.self_cell.clone()?;
        Some(TypedHandle::new(cell, self.declared.clone()?))
    }

    pub fn system(&self) -> Option<Arc<System>> {
        self.system.upgrade()
    }

    /// Sender of the message being processed.
    pub fn sender(&self) -> Option<ActorHandle> {
        self.current_sender.clone().map(ActorHandle::new)
    }

    pub fn message_id(&self) -> MessageId {
        self.current_id
    }

    pub fn send(&self, target: &impl Handle, msg: Message) -> Result<(), SendError> {
        if let Some(iface) = target.interface() {
            if !iface.accepts(&msg) {
                return Err(SendError::TypeMismatch);
            }
        }
        target
            .actor_ref()
            .enqueue(Envelope::new(msg, self.self_cell.clone(), MessageId::ASYNC));
        Ok(())
    }

    fn system_or_panic(&self) -> Arc<System> {
        self.system.upgrade().expect("actor runtime is gone")
    }

    pub fn spawn<F>(&self, f: F) -> ActorHandle
    where
        F: FnOnce(&mut Context) -> Behavior,
    {
        self.system_or_panic().spawn(f)
    }

    pub fn spawn_opts<F>(&self, opts: SpawnOptions, f: F) -> ActorHandle
    where
        F: FnOnce(&mut Context) -> Behavior,
    {
        self.system_or_panic().spawn_opts(opts, f)
    }

    pub fn spawn_typed<F>(&self, iface: MessagingInterface, f: F) -> Result<TypedHandle, InterfaceError>
    where
        F: FnOnce(&mut Context) -> Behavior,
    {
        self.system_or_panic().spawn_typed(iface, f)
    }

    /// Sends a request. The response is handled by the callback installed
    /// with [`RequestBuilder::then`]; until it arrives (or fails) the regular
    /// behavior is suspended and other messages stay in the mailbox.
    pub fn request<'a>(&'a mut self, target: &impl Handle, msg: Message, timeout: Option<Duration>) -> RequestBuilder<'a> {
        let rule_outputs = target.interface().map(|iface| {
            iface
                .rule_for(&msg)
                .map(|r| (r.outputs().to_vec(), r.alt_outputs().map(<[TypeTag]>::to_vec)))
        });
        RequestBuilder {
            ctx: self,
            target: target.actor_ref().clone(),
            msg,
            timeout,
            rule_outputs,
            on_error: None,
        }
    }

    /// Replaces the behavior. Messages skipped so far are matched against
    /// the new behavior before any new arrival.
    pub fn become_(&mut self, behavior: Behavior) -> Result<(), InterfaceError> {
        if let Some(declared) = &self.declared {
            let derived = derive_interface(&behavior);
            if derived.as_ref() != Some(declared.as_ref()) {
                return Err(InterfaceError::Mismatch(format!(
                    "behavior implements {derived:?}, actor declares {declared:?}"
                )));
            }
        }
        self.behavior = behavior;
        self.rescan = true;
        Ok(())
    }

    /// Terminates the actor after the current callback returns.
    pub fn quit(&mut self, reason: ExitReason) {
        self.quit.get_or_insert(reason);
    }

    pub fn trap_exit(&mut self, enabled: bool) {
        self.trap_exit = enabled;
    }

    pub fn monitor(&self, target: &impl Handle) {
        if let Some(me) = &self.self_cell {
            target.actor_ref().add_monitor(me);
        }
    }

    pub fn demonitor(&self, target: &impl Handle) {
        if let Some(me) = &self.self_cell {
            target.actor_ref().remove_monitor(me);
        }
    }

    pub fn link(&self, target: &impl Handle) {
        if let Some(me) = &self.self_cell {
            super::cell::ActorCell::link(me, target.actor_ref());
        }
    }

    pub fn unlink(&self, target: &impl Handle) {
        if let Some(me) = &self.self_cell {
            super::cell::ActorCell::unlink(me, target.actor_ref());
        }
    }

    pub fn set_state<T: Any + Send>(&mut self, state: T) {
        self.state = Some(Box::new(state));
    }

    pub fn state<T: Any + Send>(&self) -> Option<&T> {
        self.state.as_ref()?.downcast_ref()
    }

    pub fn state_mut<T: Any + Send>(&mut self) -> Option<&mut T> {
        self.state.as_mut()?.downcast_mut()
    }

    /// Number of skipped messages waiting for a matching behavior.
    pub fn retained_len(&self) -> usize {
        self.retained.len()
    }

    pub fn is_awaiting(&self) -> bool {
        !self.pending.is_empty()
    }

    fn broker_io(&self) -> &BrokerIo {
        self.broker.as_ref().expect("IO operations are only available to brokers")
    }

    /// Sets how many bytes the middleman gathers before delivering data.
    pub fn configure_read(&self, conn: u64, policy: ReceivePolicy) {
        self.broker_io().configure_read(conn, policy);
    }

    /// Appends bytes to the output buffer of a connection.
    pub fn write(&self, conn: u64, bytes: &[u8]) {
        self.broker_io().write(conn, bytes.to_vec());
    }

    /// Closes a connection or acceptor owned by this broker.
    pub fn close_handle(&self, handle: u64) {
        self.broker_io().close(handle);
    }

    // --- dispatch ---------------------------------------------------------

    /// Processes one envelope from the mailbox. Returns `true` once the
    /// actor has terminated.
    pub(crate) fn step(&mut self, env: Envelope) -> bool {
        let outcome = catch_unwind(AssertUnwindSafe(|| self.dispatch(env)));
        if outcome.is_err() {
            self.quit = Some(ExitReason::UnhandledError);
        }
        self.check_quit()
    }

    /// Re-examines retained messages when the behavior or the awaited
    /// response changed. Returns `true` once the actor has terminated.
    pub(crate) fn step_retained(&mut self) -> bool {
        while let Some(env) = self.next_scanned() {
            if self.step(env) {
                return true;
            }
        }
        false
    }

    /// Next envelope to re-examine. A new rescan request puts everything
    /// retained so far back in front of the remaining scan.
    fn next_scanned(&mut self) -> Option<Envelope> {
        if self.rescan {
            self.rescan = false;
            let mut retained = std::mem::take(&mut self.retained);
            retained.append(&mut self.scan);
            self.scan = retained;
        }
        self.scan.pop_front()
    }

    fn check_quit(&mut self) -> bool {
        match self.quit.take() {
            Some(reason) => {
                self.finish(reason);
                true
            }
            None => false,
        }
    }

    fn dispatch(&mut self, mut env: Envelope) {
        match std::mem::replace(&mut env.kind, EnvelopeKind::Ordinary) {
            EnvelopeKind::Exit { reason, .. } => {
                if !self.trap_exit {
                    if !reason.is_normal() {
                        self.quit = Some(ExitReason::linked(reason));
                    }
                    return;
                }
            }
            EnvelopeKind::Timeout(id) => {
                if let Some(pos) = self.pending.iter().position(|p| p.id == id) {
                    let p = self.pending.remove(pos);
                    self.rescan = true;
                    self.request_failed(p, RequestError::Timeout);
                }
                return;
            }
            EnvelopeKind::Ordinary => {}
        }
        if env.id.is_response() {
            let req = env.id.request_id();
            match self.pending.last() {
                Some(p) if p.id == req => {
                    let p = self.pending.pop().expect("checked");
                    self.rescan = true;
                    self.deliver_response(p, env);
                }
                _ => {
                    if self.pending.iter().any(|p| p.id == req) {
                        self.retained.push_back(env);
                    }
                }
            }
            return;
        }
        if let Some(top) = self.pending.last() {
            if let Some((source, reason)) = parse_down(&env.content) {
                if source == top.target {
                    let p = self.pending.pop().expect("checked");
                    self.rescan = true;
                    self.retained.push_back(env);
                    self.request_failed(p, RequestError::Down(reason));
                    return;
                }
            }
            self.retained.push_back(env);
            return;
        }
        self.invoke(env);
    }

    fn invoke(&mut self, env: Envelope) {
        let Envelope {
            mut content,
            sender,
            id,
            kind,
        } = env;
        self.current_sender = sender;
        self.current_id = id;
        self.replied = false;
        let behavior = self.behavior.clone();
        match behavior.apply(self, &mut content) {
            MatchOutcome::Matched(reply) => self.send_reply(reply),
            MatchOutcome::NoMatch => {
                let sender = self.current_sender.take();
                self.retained.push_back(Envelope {
                    content,
                    sender,
                    id,
                    kind,
                });
            }
        }
        self.current_sender = None;
        self.current_id = MessageId::ASYNC;
    }

    fn send_reply(&mut self, reply: Option<Message>) {
        let Some(sender) = self.current_sender.clone() else {
            return;
        };
        if self.current_id.is_request() {
            self.replied = true;
            sender.enqueue(Envelope::new(
                reply.unwrap_or_else(Message::empty),
                self.self_cell.clone(),
                self.current_id.response_id(),
            ));
        } else if let Some(reply) = reply {
            sender.enqueue(Envelope::new(reply, self.self_cell.clone(), MessageId::ASYNC));
        }
    }

    fn deliver_response(&mut self, p: Pending, env: Envelope) {
        if let Some(reason) = parse_req_failed(&env.content) {
            self.request_failed(p, RequestError::Down(reason));
            return;
        }
        self.current_sender = env.sender;
        self.current_id = env.id;
        let mut content = env.content;
        let outcome = p.handler.apply(self, &mut content);
        self.current_sender = None;
        self.current_id = MessageId::ASYNC;
        if outcome == MatchOutcome::NoMatch {
            self.request_failed(p, RequestError::UnexpectedResponse);
        }
    }

    fn request_failed(&mut self, p: Pending, err: RequestError) {
        match p.on_error {
            Some(f) => f(self, err),
            None => self.quit(ExitReason::UnhandledRequestError),
        }
    }

    /// Runs the termination protocol for this actor.
    pub(crate) fn finish(&mut self, reason: ExitReason) {
        let Some(cell) = self.self_cell.clone() else {
            return;
        };
        if self.current_id.is_request() && !self.replied {
            if let Some(sender) = self.current_sender.take() {
                sender.enqueue(Envelope::new(
                    super::req_failed_message(&reason),
                    Some(cell.clone()),
                    self.current_id.response_id(),
                ));
            }
        }
        if let Some(io) = &self.broker {
            io.terminated(cell.addr());
        }
        let retained: Vec<Envelope> = self.scan.drain(..).chain(self.retained.drain(..)).collect();
        self.pending.clear();
        cell.terminate(reason, retained);
        self.behavior = Behavior::default();
        self.state = None;
        self.current_sender = None;
        self.self_cell = None;
    }
}

/// Pending request, completed by [`RequestBuilder::then`].
pub struct RequestBuilder<'a> {
    ctx: &'a mut Context,
    target: ActorRef,
    msg: Message,
    timeout: Option<Duration>,
    /// For typed targets: the outputs of the rule the request matches.
    rule_outputs: Option<Option<RuleOutputs>>,
    on_error: Option<ErrorHandler>,
}

/// Reply outputs and error outputs of a typed rule.
type RuleOutputs = (Vec<TypeTag>, Option<Vec<TypeTag>>);

fn tags_fit(handler: &[TypeTag], outputs: &[TypeTag]) -> bool {
    handler.len() == outputs.len()
        && handler
            .iter()
            .zip(outputs)
            .all(|(h, o)| h == o || *h == TypeTag::Type(o.type_id()))
}

impl<'a> RequestBuilder<'a> {
    /// Handles failures instead of terminating the requester.
    pub fn on_error<F>(mut self, f: F) -> Self
    where
        F: FnOnce(&mut Context, RequestError) + Send + 'static,
    {
        self.on_error = Some(Box::new(f));
        self
    }

    /// Installs the response handler and sends the request.
    pub fn then<M, H: Handler<M>>(self, handler: H) -> Result<MessageId, RequestError> {
        self.then_case(case(handler))
    }

    pub fn then_case(self, response: MatchCase) -> Result<MessageId, RequestError> {
        if let Some(rule) = &self.rule_outputs {
            let Some((outputs, alt)) = rule else {
                return Err(InterfaceError::Mismatch("request matches no rule of the receiver".into()).into());
            };
            let tags = response.input_tags();
            let fits = tags_fit(&tags, outputs) || alt.as_ref().is_some_and(|a| tags_fit(&tags, a));
            if response.kind() != crate::behavior::CaseKind::CatchAll && !fits {
                return Err(InterfaceError::Mismatch(format!(
                    "response handler expects {tags:?}, receiver replies with {outputs:?}"
                ))
                .into());
            }
        }
        let Some(me) = self.ctx.self_cell.clone() else {
            panic!("requests need an actor context");
        };
        let sys = self.ctx.system_or_panic();
        let id = sys.next_request_id();
        self.ctx.pending.push(Pending {
            id,
            target: self.target.addr(),
            handler: Behavior::new(vec![response]),
            on_error: self.on_error,
        });
        if let Some(t) = self.timeout {
            sys.timer().schedule(Instant::now() + t, &me, id);
        }
        self.target.enqueue(Envelope::new(self.msg, Some(me), id));
        Ok(id)
    }
}
