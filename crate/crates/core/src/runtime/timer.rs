use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::sync::{Arc, Weak};
use std::thread::{self, JoinHandle};
use std::time::Instant;

use parking_lot::{Condvar, Mutex};

use super::cell::{ActorCell, ActorRef};
use super::{Envelope, EnvelopeKind, MessageId};
use crate::message::Message;

#[derive(Default)]
struct State {
    queue: BinaryHeap<Reverse<(Instant, u64)>>,
    entries: HashMap<u64, (Weak<ActorCell>, MessageId)>,
    seq: u64,
    stop: bool,
}

struct Shared {
    state: Mutex<State>,
    cv: Condvar,
}

/// Delivers request timeouts as envelopes.
pub(crate) struct Timer {
    shared: Arc<Shared>,
    thread: Mutex<Option<JoinHandle<()>>>,
}

impl Timer {
    pub(crate) fn start() -> Timer {
        let shared = Arc::new(Shared {
            state: Mutex::new(State::default()),
            cv: Condvar::new(),
        });
        let s = shared.clone();
        let thread = thread::Builder::new()
            .name("cafx-timer".into())
            .spawn(move || run(&s))
            .expect("cannot spawn the timer thread");
        Timer {
            shared,
            thread: Mutex::new(Some(thread)),
        }
    }

    pub(crate) fn schedule(&self, deadline: Instant, cell: &ActorRef, id: MessageId) {
        let mut s = self.shared.state.lock();
        let seq = s.seq;
        s.seq += 1;
        s.queue.push(Reverse((deadline, seq)));
        s.entries.insert(seq, (Arc::downgrade(cell), id));
        self.shared.cv.notify_one();
    }

    pub(crate) fn stop(&self) {
        self.shared.state.lock().stop = true;
        self.shared.cv.notify_one();
        if let Some(t) = self.thread.lock().take() {
            if t.thread().id() != thread::current().id() {
                let _ = t.join();
            }
        }
    }
}

fn run(shared: &Shared) {
    let mut due = Vec::new();
    loop {
        {
            let mut s = shared.state.lock();
            loop {
                if s.stop {
                    return;
                }
                let now = Instant::now();
                match s.queue.peek() {
                    Some(Reverse((deadline, _))) if *deadline <= now => {
                        let Reverse((_, seq)) = s.queue.pop().expect("peeked");
                        if let Some(entry) = s.entries.remove(&seq) {
                            due.push(entry);
                        }
                    }
                    Some(Reverse((deadline, _))) => {
                        if !due.is_empty() {
                            break;
                        }
                        let deadline = *deadline;
                        shared.cv.wait_until(&mut s, deadline);
                    }
                    None => {
                        if !due.is_empty() {
                            break;
                        }
                        shared.cv.wait(&mut s);
                    }
                }
            }
        }
        for (cell, id) in due.drain(..) {
            if let Some(cell) = cell.upgrade() {
                cell.enqueue(Envelope {
                    content: Message::empty(),
                    sender: None,
                    id: MessageId::ASYNC,
                    kind: EnvelopeKind::Timeout(id),
                });
            }
        }
    }
}
