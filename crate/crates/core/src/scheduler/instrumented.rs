use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::{Coord, Job, SchedulerPolicy, Work};

/// Per-hook call counters.
#[derive(Debug, Default)]
pub struct HookCounts {
    pub central_enqueue: AtomicU64,
    pub external_enqueue: AtomicU64,
    pub internal_enqueue: AtomicU64,
    pub resume_job_later: AtomicU64,
    pub before_resume: AtomicU64,
    pub after_resume: AtomicU64,
    pub after_completion: AtomicU64,
}

fn bump(c: &AtomicU64) {
    c.fetch_add(1, Ordering::Relaxed);
}

fn read(c: &AtomicU64) -> u64 {
    c.load(Ordering::Relaxed)
}

impl HookCounts {
    pub fn central(&self) -> u64 {
        read(&self.central_enqueue)
    }
    pub fn external(&self) -> u64 {
        read(&self.external_enqueue)
    }
    pub fn internal(&self) -> u64 {
        read(&self.internal_enqueue)
    }
    pub fn resumed_later(&self) -> u64 {
        read(&self.resume_job_later)
    }
    pub fn before(&self) -> u64 {
        read(&self.before_resume)
    }
    pub fn after(&self) -> u64 {
        read(&self.after_resume)
    }
    pub fn completions(&self) -> u64 {
        read(&self.after_completion)
    }
}

/// Wraps a policy and counts every hook invocation.
pub struct Instrumented<P> {
    inner: P,
    counts: Arc<HookCounts>,
}

impl<P: SchedulerPolicy> Instrumented<P> {
    pub fn new(inner: P) -> Instrumented<P> {
        Instrumented {
            inner,
            counts: Arc::new(HookCounts::default()),
        }
    }

    pub fn counts(&self) -> Arc<HookCounts> {
        self.counts.clone()
    }

    pub fn inner(&self) -> &P {
        &self.inner
    }
}

impl<P: SchedulerPolicy> SchedulerPolicy for Instrumented<P> {
    type CoordinatorData = P::CoordinatorData;
    type WorkerData = P::WorkerData;

    fn init_coordinator(&self, n: usize) -> Self::CoordinatorData {
        self.inner.init_coordinator(n)
    }

    fn init_worker(&self, i: usize, n: usize) -> Self::WorkerData {
        self.inner.init_worker(i, n)
    }

    fn central_enqueue(&self, coord: &Coord<Self>, job: Job) {
        bump(&self.counts.central_enqueue);
        self.inner.central_enqueue(coord, job)
    }

    fn external_enqueue(&self, coord: &Coord<Self>, worker: &Work<Self>, job: Job) {
        bump(&self.counts.external_enqueue);
        self.inner.external_enqueue(coord, worker, job)
    }

    fn internal_enqueue(&self, coord: &Coord<Self>, worker: &Work<Self>, job: Job) {
        bump(&self.counts.internal_enqueue);
        self.inner.internal_enqueue(coord, worker, job)
    }

    fn resume_job_later(&self, coord: &Coord<Self>, worker: &Work<Self>, job: Job) {
        bump(&self.counts.resume_job_later);
        self.inner.resume_job_later(coord, worker, job)
    }

    fn dequeue(&self, coord: &Coord<Self>, worker: &Work<Self>) -> Option<Job> {
        self.inner.dequeue(coord, worker)
    }

    fn before_resume(&self, coord: &Coord<Self>, worker: &Work<Self>, job: &Job) {
        bump(&self.counts.before_resume);
        self.inner.before_resume(coord, worker, job)
    }

    fn after_resume(&self, coord: &Coord<Self>, worker: &Work<Self>, job: &Job) {
        bump(&self.counts.after_resume);
        self.inner.after_resume(coord, worker, job)
    }

    fn after_completion(&self, coord: &Coord<Self>, worker: &Work<Self>, job: &Job) {
        bump(&self.counts.after_completion);
        self.inner.after_completion(coord, worker, job)
    }
}
