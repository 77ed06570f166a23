//! Single-reader, many-writer mailbox.
//!
//! Writers push onto a lock-free stack with one CAS. The reader keeps a
//! private FIFO cache: when the cache runs dry it takes the whole stack with
//! a single CAS and moves the nodes into the cache in reverse order, which
//! restores arrival order.
//!
//! The stack tail doubles as the mailbox state. Besides null (empty) and real
//! nodes it can hold two sentinels: `BLOCKED` (empty, reader parked) and
//! `CLOSED`. Only the reader swings the tail back to null, so writers never
//! observe a recycled node address in a way that matters and no tagging is
//! needed.

use std::cell::UnsafeCell;
use std::collections::VecDeque;
use std::ptr;
use std::sync::atomic::{AtomicBool, AtomicPtr, AtomicU64, Ordering};

struct Node<T> {
    value: T,
    next: *mut Node<T>,
}

/// Outcome of [`CachedStackMailbox::enqueue`].
#[derive(Debug, PartialEq, Eq)]
pub enum EnqueueResult<T> {
    /// The mailbox was empty with its reader parked; the caller must wake or
    /// schedule the reader.
    UnblockedReader,
    PlainSuccess,
    /// The mailbox is closed. The value is handed back for disposal.
    RejectedClosed(T),
}

impl<T> EnqueueResult<T> {
    pub fn is_accepted(&self) -> bool {
        !matches!(self, EnqueueResult::RejectedClosed(_))
    }
}

fn blocked<T>() -> *mut Node<T> {
    ptr::without_provenance_mut(1)
}

fn closed<T>() -> *mut Node<T> {
    ptr::without_provenance_mut(2)
}

fn is_sentinel<T>(p: *mut Node<T>) -> bool {
    p == blocked() || p == closed()
}

/// Mailbox backing every actor.
///
/// `enqueue` may be called from any thread. `dequeue`, `try_block` and
/// `close` belong to the single reader; calling them from two threads at
/// once panics.
pub struct CachedStackMailbox<T> {
    tail: AtomicPtr<Node<T>>,
    cache: UnsafeCell<VecDeque<T>>,
    reader_active: AtomicBool,
    reader_cas: AtomicU64,
}

// SAFETY: the stack only moves owned `T`s between threads; the cache is only
// touched while `reader_active` is held, which excludes concurrent readers.
unsafe impl<T: Send> Send for CachedStackMailbox<T> {}
unsafe impl<T: Send> Sync for CachedStackMailbox<T> {}

impl<T> Default for CachedStackMailbox<T> {
    fn default() -> Self {
        Self::new()
    }
}

struct ReaderGuard<'a>(&'a AtomicBool);

impl Drop for ReaderGuard<'_> {
    fn drop(&mut self) {
        self.0.store(false, Ordering::Release);
    }
}

impl<T> CachedStackMailbox<T> {
    /// An open, empty mailbox whose reader is not parked.
    pub fn new() -> Self {
        CachedStackMailbox {
            tail: AtomicPtr::new(ptr::null_mut()),
            cache: UnsafeCell::new(VecDeque::new()),
            reader_active: AtomicBool::new(false),
            reader_cas: AtomicU64::new(0),
        }
    }

    /// An empty mailbox whose reader starts out parked; the first enqueue
    /// reports [`EnqueueResult::UnblockedReader`].
    pub fn new_blocked() -> Self {
        let mb = Self::new();
        mb.tail.store(blocked(), Ordering::Relaxed);
        mb
    }

    pub fn enqueue(&self, value: T) -> EnqueueResult<T> {
        let node = Box::into_raw(Box::new(Node {
            value,
            next: ptr::null_mut(),
        }));
        let mut current = self.tail.load(Ordering::Acquire);
        loop {
            if current == closed() {
                // SAFETY: the node was never published.
                let node = unsafe { Box::from_raw(node) };
                return EnqueueResult::RejectedClosed(node.value);
            }
            let next = if current == blocked() { ptr::null_mut() } else { current };
            // SAFETY: the node is still private to this thread.
            unsafe { (*node).next = next };
            match self
                .tail
                .compare_exchange_weak(current, node, Ordering::AcqRel, Ordering::Acquire)
            {
                Ok(_) if current == blocked() => return EnqueueResult::UnblockedReader,
                Ok(_) => return EnqueueResult::PlainSuccess,
                Err(actual) => current = actual,
            }
        }
    }

    fn reader(&self) -> ReaderGuard<'_> {
        if self.reader_active.swap(true, Ordering::Acquire) {
            panic!("concurrent readers on a single-reader mailbox");
        }
        ReaderGuard(&self.reader_active)
    }

    /// Moves the stack into the cache. Returns the number of nodes taken.
    fn fetch_stack(&self, cache: &mut VecDeque<T>) -> usize {
        let mut head = self.tail.load(Ordering::Acquire);
        loop {
            if head.is_null() || is_sentinel(head) {
                return 0;
            }
            match self
                .tail
                .compare_exchange_weak(head, ptr::null_mut(), Ordering::AcqRel, Ordering::Acquire)
            {
                Ok(_) => break,
                Err(actual) => head = actual,
            }
        }
        self.reader_cas.fetch_add(1, Ordering::Relaxed);
        // The chain is newest-first; collect then append in reverse.
        let mut taken = Vec::new();
        while !head.is_null() {
            // SAFETY: the successful CAS transferred ownership of the chain.
            let node = unsafe { Box::from_raw(head) };
            head = node.next;
            taken.push(node.value);
        }
        let n = taken.len();
        cache.extend(taken.into_iter().rev());
        n
    }

    /// Pops the oldest message, or `None` if the mailbox is empty.
    pub fn dequeue(&self) -> Option<T> {
        let _guard = self.reader();
        // SAFETY: the guard grants exclusive access to the cache.
        let cache = unsafe { &mut *self.cache.get() };
        if let Some(v) = cache.pop_front() {
            return Some(v);
        }
        self.fetch_stack(cache);
        cache.pop_front()
    }

    /// Parks the reader if the mailbox is empty. Returns `false` when
    /// messages are pending (or the mailbox is closed), in which case the
    /// reader must keep going.
    pub fn try_block(&self) -> bool {
        {
            let _guard = self.reader();
            // SAFETY: exclusive reader access.
            let cache = unsafe { &*self.cache.get() };
            if !cache.is_empty() {
                return false;
            }
        }
        // Once the tail is parked another thread may become the reader, so
        // the guard is released before the CAS.
        match self
            .tail
            .compare_exchange(ptr::null_mut(), blocked(), Ordering::AcqRel, Ordering::Acquire)
        {
            Ok(_) => true,
            Err(current) => current == blocked(),
        }
    }

    /// Whether no message is pending. Reader-side snapshot.
    pub fn is_empty(&self) -> bool {
        let _guard = self.reader();
        // SAFETY: exclusive reader access.
        let cache = unsafe { &*self.cache.get() };
        let tail = self.tail.load(Ordering::Acquire);
        cache.is_empty() && (tail.is_null() || is_sentinel(tail))
    }

    pub fn is_blocked(&self) -> bool {
        self.tail.load(Ordering::Acquire) == blocked()
    }

    pub fn is_closed(&self) -> bool {
        self.tail.load(Ordering::Acquire) == closed()
    }

    /// Closes the mailbox and returns every pending message in FIFO order.
    /// Later enqueues are rejected. Closing twice returns an empty list.
    pub fn close(&self) -> Vec<T> {
        let _guard = self.reader();
        // SAFETY: exclusive reader access.
        let cache = unsafe { &mut *self.cache.get() };
        let mut head = self.tail.swap(closed(), Ordering::AcqRel);
        if is_sentinel(head) {
            head = ptr::null_mut();
        }
        let mut taken = Vec::new();
        while !head.is_null() {
            // SAFETY: the swap transferred ownership of the chain.
            let node = unsafe { Box::from_raw(head) };
            head = node.next;
            taken.push(node.value);
        }
        let mut drained: Vec<T> = cache.drain(..).collect();
        drained.extend(taken.into_iter().rev());
        drained
    }

    /// Number of successful reader-side CAS operations so far; each stack
    /// drain costs exactly one, independent of how many nodes it moves.
    pub fn reader_cas_count(&self) -> u64 {
        self.reader_cas.load(Ordering::Relaxed)
    }
}

impl<T> Drop for CachedStackMailbox<T> {
    fn drop(&mut self) {
        let mut head = *self.tail.get_mut();
        while !head.is_null() && !is_sentinel(head) {
            // SAFETY: `&mut self` means no writer can still hold the chain.
            let node = unsafe { Box::from_raw(head) };
            head = node.next;
        }
    }
}
