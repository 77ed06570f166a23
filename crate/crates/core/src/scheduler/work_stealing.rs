use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::thread;
use std::time::Duration;

use parking_lot::Mutex;
use rand::rngs::SmallRng;
use rand::{Rng, SeedableRng};

use super::{Coord, Job, SchedulerPolicy, Work};

/// Idle schedule of a worker that found nothing to steal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Backoff {
    /// Failed attempts answered with a spin hint.
    pub spins: u32,
    /// Failed attempts after the spin phase answered with `yield_now`.
    pub yields: u32,
    /// Sleep per failed attempt afterwards.
    pub sleep: Duration,
}

impl Default for Backoff {
    fn default() -> Self {
        Backoff {
            spins: 100,
            yields: 100,
            sleep: Duration::from_millis(1),
        }
    }
}

/// Randomized work stealing over per-worker deques. The owner takes from
/// the front, thieves from the back.
#[derive(Debug, Clone, Default)]
pub struct WorkStealing {
    pub backoff: Backoff,
}

impl WorkStealing {
    pub fn new() -> WorkStealing {
        WorkStealing::default()
    }

    pub fn with_backoff(backoff: Backoff) -> WorkStealing {
        WorkStealing { backoff }
    }
}

#[derive(Debug, Default)]
pub struct WorkStealingCoordinator {
    next: AtomicUsize,
}

pub struct WorkStealingWorker {
    queue: Mutex<VecDeque<Job>>,
    steals: AtomicU64,
    rng: Mutex<SmallRng>,
}

impl WorkStealingWorker {
    pub fn len(&self) -> usize {
        self.queue.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.lock().is_empty()
    }

    /// Jobs this worker took from other workers.
    pub fn steals(&self) -> u64 {
        self.steals.load(Ordering::Relaxed)
    }

    /// Index of `job` counted from the front.
    pub fn position_of(&self, job: &Job) -> Option<usize> {
        self.queue.lock().iter().position(|j| std::sync::Arc::ptr_eq(j, job))
    }

    fn pop_front(&self) -> Option<Job> {
        self.queue.lock().pop_front()
    }

    fn pop_back(&self) -> Option<Job> {
        self.queue.lock().pop_back()
    }
}

impl SchedulerPolicy for WorkStealing {
    type CoordinatorData = WorkStealingCoordinator;
    type WorkerData = WorkStealingWorker;

    fn init_coordinator(&self, _num_workers: usize) -> WorkStealingCoordinator {
        WorkStealingCoordinator::default()
    }

    fn init_worker(&self, index: usize, _num_workers: usize) -> WorkStealingWorker {
        WorkStealingWorker {
            queue: Mutex::new(VecDeque::new()),
            steals: AtomicU64::new(0),
            rng: Mutex::new(SmallRng::seed_from_u64(rand::random::<u64>() ^ index as u64)),
        }
    }

    fn central_enqueue(&self, coord: &Coord<Self>, job: Job) {
        let i = coord.data.next.fetch_add(1, Ordering::Relaxed) % coord.num_workers();
        self.external_enqueue(coord, coord.worker(i), job);
    }

    fn external_enqueue(&self, _coord: &Coord<Self>, worker: &Work<Self>, job: Job) {
        worker.data.queue.lock().push_back(job);
    }

    fn internal_enqueue(&self, _coord: &Coord<Self>, worker: &Work<Self>, job: Job) {
        worker.data.queue.lock().push_front(job);
    }

    fn resume_job_later(&self, coord: &Coord<Self>, worker: &Work<Self>, job: Job) {
        self.external_enqueue(coord, worker, job);
    }

    fn dequeue(&self, coord: &Coord<Self>, worker: &Work<Self>) -> Option<Job> {
        let n = coord.num_workers();
        let me = worker.index();
        let mut attempts: u64 = 0;
        loop {
            if let Some(job) = worker.data.pop_front() {
                return Some(job);
            }
            if coord.is_shutting_down() {
                return None;
            }
            if n > 1 {
                let victim = {
                    let mut rng = worker.data.rng.lock();
                    let v = rng.gen_range(0..n - 1);
                    if v >= me {
                        v + 1
                    } else {
                        v
                    }
                };
                if let Some(job) = coord.worker(victim).data.pop_back() {
                    worker.data.steals.fetch_add(1, Ordering::Relaxed);
                    return Some(job);
                }
            }
            attempts += 1;
            let b = &self.backoff;
            if attempts <= b.spins as u64 {
                std::hint::spin_loop();
            } else if attempts <= (b.spins + b.yields) as u64 {
                thread::yield_now();
            } else {
                thread::sleep(b.sleep);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use std::sync::atomic::AtomicUsize;
    use std::sync::Arc;
    use std::time::Instant;

    use super::super::{Resumable, ResumeResult, Scheduler};
    use super::*;

    struct Noop;
    impl Resumable for Noop {
        fn resume(&self, _: usize) -> ResumeResult {
            ResumeResult::Finished
        }
    }

    struct Counting(Arc<AtomicUsize>);
    impl Resumable for Counting {
        fn resume(&self, _: usize) -> ResumeResult {
            self.0.fetch_add(1, Ordering::SeqCst);
            ResumeResult::Finished
        }
    }

    fn job() -> Job {
        Arc::new(Noop)
    }

    #[test]
    fn central_enqueue_round_robins() {
        let s = Scheduler::new(WorkStealing::new(), 4, 1);
        for _ in 0..8 {
            s.enqueue(job());
        }
        let lens: Vec<usize> = s.coordinator().workers().iter().map(|w| w.data.len()).collect();
        assert_eq!(lens, vec![2, 2, 2, 2]);
    }

    #[test]
    fn placement_front_and_back() {
        let s = Scheduler::new(WorkStealing::new(), 2, 1);
        let c = s.coordinator();
        let w = c.worker(0);
        let (a, b, x, y) = (job(), job(), job(), job());
        s.policy().external_enqueue(c, w, a.clone());
        s.policy().external_enqueue(c, w, b.clone());
        s.policy().internal_enqueue(c, w, x.clone());
        assert_eq!(w.data.position_of(&x), Some(0));
        s.policy().resume_job_later(c, w, y.clone());
        assert_eq!(w.data.position_of(&y), Some(3));
        let first = s.policy().dequeue(c, w).unwrap();
        assert!(Arc::ptr_eq(&first, &x));
        let second = s.policy().dequeue(c, w).unwrap();
        assert!(Arc::ptr_eq(&second, &a));
    }

    #[test]
    fn idle_worker_steals_from_back() {
        let s = Scheduler::new(WorkStealing::new(), 2, 1);
        let c = s.coordinator();
        let (x, y) = (job(), job());
        s.policy().external_enqueue(c, c.worker(0), x.clone());
        s.policy().external_enqueue(c, c.worker(0), y.clone());
        let stolen = s.policy().dequeue(c, c.worker(1)).unwrap();
        assert!(Arc::ptr_eq(&stolen, &y));
        assert_eq!(c.worker(1).data.steals(), 1);
        assert_eq!(c.worker(0).data.len(), 1);
    }

    #[test]
    fn shutdown_ends_dequeue() {
        let s = Scheduler::start(WorkStealing::new(), 3, 1);
        s.stop();
        assert!(s.policy().dequeue(s.coordinator(), s.coordinator().worker(0)).is_none());
    }

    #[test]
    fn ten_thousand_jobs_complete() {
        let done = Arc::new(AtomicUsize::new(0));
        let s = Scheduler::start(WorkStealing::new(), 4, 1);
        for _ in 0..10_000 {
            s.enqueue(Arc::new(Counting(done.clone())));
        }
        let deadline = Instant::now() + Duration::from_secs(30);
        while done.load(Ordering::SeqCst) < 10_000 && Instant::now() < deadline {
            thread::sleep(Duration::from_millis(1));
        }
        s.stop();
        assert_eq!(done.load(Ordering::SeqCst), 10_000);
    }
}
