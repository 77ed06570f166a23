//! Cooperative scheduling of actors onto worker threads.
//!
//! The scheduler is generic over a [`SchedulerPolicy`] that owns all queues
//! and decides where jobs go. The default policy is [`WorkStealing`].

mod instrumented;
mod work_stealing;

use std::cell::Cell;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};

use parking_lot::Mutex;

pub use instrumented::{HookCounts, Instrumented};
pub use work_stealing::{Backoff, WorkStealing, WorkStealingCoordinator, WorkStealingWorker};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResumeResult {
    /// Nothing left to do; the job waits for new input.
    Awaiting,
    /// Budget exhausted with work left; the job must be rescheduled.
    Yielded,
    /// The job is done.
    Finished,
}

/// A unit of work the scheduler can run.
pub trait Resumable: Send + Sync {
    fn resume(&self, max_msgs: usize) -> ResumeResult;
}

pub type Job = Arc<dyn Resumable>;

/// Scheduling algorithm. Holds its data in the coordinator and per-worker
/// structures; every hook runs on the thread named by its arguments, except
/// `external_enqueue` and stealing inside `dequeue`, which may touch another
/// worker's data.
pub trait SchedulerPolicy: Send + Sync + Sized + 'static {
    type CoordinatorData: Send + Sync;
    type WorkerData: Send + Sync;

    fn init_coordinator(&self, num_workers: usize) -> Self::CoordinatorData;
    fn init_worker(&self, index: usize, num_workers: usize) -> Self::WorkerData;

    /// Work submitted from outside the worker threads.
    fn central_enqueue(&self, coord: &Coord<Self>, job: Job);
    /// Transfers a job to `worker`.
    fn external_enqueue(&self, coord: &Coord<Self>, worker: &Work<Self>, job: Job);
    /// Work created by an actor running on `worker`.
    fn internal_enqueue(&self, coord: &Coord<Self>, worker: &Work<Self>, job: Job);
    /// A job that used up its budget.
    fn resume_job_later(&self, coord: &Coord<Self>, worker: &Work<Self>, job: Job);
    /// Next job for `worker`; `None` once the scheduler shuts down.
    fn dequeue(&self, coord: &Coord<Self>, worker: &Work<Self>) -> Option<Job>;

    fn before_resume(&self, _coord: &Coord<Self>, _worker: &Work<Self>, _job: &Job) {}
    fn after_resume(&self, _coord: &Coord<Self>, _worker: &Work<Self>, _job: &Job) {}
    fn after_completion(&self, _coord: &Coord<Self>, _worker: &Work<Self>, _job: &Job) {}
}

/// Coordinator type of policy `P`.
pub type Coord<P> = Coordinator<<P as SchedulerPolicy>::CoordinatorData, <P as SchedulerPolicy>::WorkerData>;
/// Worker type of policy `P`.
pub type Work<P> = Worker<<P as SchedulerPolicy>::WorkerData>;

pub struct Worker<W> {
    index: usize,
    pub data: W,
}

impl<W> Worker<W> {
    pub fn index(&self) -> usize {
        self.index
    }
}

pub struct Coordinator<C, W> {
    pub data: C,
    workers: Vec<Worker<W>>,
    shutdown: AtomicBool,
}

impl<C, W> Coordinator<C, W> {
    pub fn workers(&self) -> &[Worker<W>] {
        &self.workers
    }

    pub fn worker(&self, index: usize) -> &Worker<W> {
        &self.workers[index]
    }

    pub fn num_workers(&self) -> usize {
        self.workers.len()
    }

    pub fn is_shutting_down(&self) -> bool {
        self.shutdown.load(Ordering::Acquire)
    }
}

/// Type-erased scheduler, as used by the runtime.
pub trait Executor: Send + Sync {
    fn schedule(&self, job: Job);
    fn shutdown(&self);
    fn num_workers(&self) -> usize;
    fn max_msgs(&self) -> usize;
}

static NEXT_SCHEDULER_ID: AtomicUsize = AtomicUsize::new(1);

thread_local! {
    /// (scheduler id, worker index) of the current worker thread.
    static CURRENT_WORKER: Cell<(usize, usize)> = const { Cell::new((0, 0)) };
}

pub struct Scheduler<P: SchedulerPolicy> {
    id: usize,
    policy: P,
    coord: Coord<P>,
    max_msgs: usize,
    threads: Mutex<Vec<JoinHandle<()>>>,
}

impl<P: SchedulerPolicy> Scheduler<P> {
    /// Builds the scheduler without starting worker threads.
    pub fn new(policy: P, num_workers: usize, max_msgs: usize) -> Arc<Self> {
        assert!(num_workers >= 1 && max_msgs >= 1);
        let coord = Coordinator {
            data: policy.init_coordinator(num_workers),
            workers: (0..num_workers)
                .map(|i| Worker {
                    index: i,
                    data: policy.init_worker(i, num_workers),
                })
                .collect(),
            shutdown: AtomicBool::new(false),
        };
        Arc::new(Scheduler {
            id: NEXT_SCHEDULER_ID.fetch_add(1, Ordering::Relaxed),
            policy,
            coord,
            max_msgs,
            threads: Mutex::new(Vec::new()),
        })
    }

    /// Builds the scheduler and starts one thread per worker.
    pub fn start(policy: P, num_workers: usize, max_msgs: usize) -> Arc<Self> {
        let s = Self::new(policy, num_workers, max_msgs);
        s.spawn_workers();
        s
    }

    pub fn spawn_workers(self: &Arc<Self>) {
        let mut threads = self.threads.lock();
        for i in 0..self.coord.num_workers() {
            let s = self.clone();
            threads.push(
                thread::Builder::new()
                    .name(format!("cafx-worker-{i}"))
                    .spawn(move || s.worker_loop(i))
                    .expect("cannot spawn a worker thread"),
            );
        }
    }

    pub fn policy(&self) -> &P {
        &self.policy
    }

    pub fn coordinator(&self) -> &Coord<P> {
        &self.coord
    }

    /// Worker index of the calling thread if it belongs to this scheduler.
    pub fn current_worker(&self) -> Option<usize> {
        let (id, idx) = CURRENT_WORKER.with(Cell::get);
        (id == self.id).then_some(idx)
    }

    /// Routes a ready job: internal enqueue on worker threads of this
    /// scheduler, central enqueue everywhere else.
    pub fn enqueue(&self, job: Job) {
        match self.current_worker() {
            Some(idx) => self.policy.internal_enqueue(&self.coord, &self.coord.workers[idx], job),
            None => self.policy.central_enqueue(&self.coord, job),
        }
    }

    /// Runs one dequeued job on `worker` with all hooks. Returns `false` on
    /// shutdown.
    pub fn run_once(&self, worker: usize) -> bool {
        let w = &self.coord.workers[worker];
        let Some(job) = self.policy.dequeue(&self.coord, w) else {
            return false;
        };
        self.policy.before_resume(&self.coord, w, &job);
        let result = job.resume(self.max_msgs);
        self.policy.after_resume(&self.coord, w, &job);
        match result {
            ResumeResult::Awaiting => {}
            ResumeResult::Yielded => self.policy.resume_job_later(&self.coord, w, job),
            ResumeResult::Finished => self.policy.after_completion(&self.coord, w, &job),
        }
        true
    }

    fn worker_loop(&self, index: usize) {
        CURRENT_WORKER.with(|c| c.set((self.id, index)));
        while self.run_once(index) {}
        CURRENT_WORKER.with(|c| c.set((0, 0)));
    }

    pub fn stop(&self) {
        self.coord.shutdown.store(true, Ordering::Release);
        let threads: Vec<JoinHandle<()>> = self.threads.lock().drain(..).collect();
        let me = thread::current().id();
        for t in threads {
            if t.thread().id() != me {
                let _ = t.join();
            }
        }
    }
}

impl<P: SchedulerPolicy> Executor for Scheduler<P> {
    fn schedule(&self, job: Job) {
        self.enqueue(job);
    }

    fn shutdown(&self) {
        self.stop();
    }

    fn num_workers(&self) -> usize {
        self.coord.num_workers()
    }

    fn max_msgs(&self) -> usize {
        self.max_msgs
    }
}
