#![allow(dead_code)]

use std::hint::black_box;
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};

use cafx::scheduler::{Instrumented, Job, ResumeResult, Resumable, Scheduler, SchedulerPolicy, WorkStealing};
use cafx::Runtime;

/// Counts down once per finished job.
#[derive(Default)]
pub struct Latch {
    left: Mutex<usize>,
    cv: Condvar,
}

impl Latch {
    pub fn new(n: usize) -> Arc<Latch> {
        Arc::new(Latch {
            left: Mutex::new(n),
            cv: Condvar::new(),
        })
    }

    pub fn count_down(&self) {
        let mut l = self.left.lock();
        *l -= 1;
        if *l == 0 {
            self.cv.notify_all();
        }
    }

    pub fn wait(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut l = self.left.lock();
        while *l > 0 {
            if self.cv.wait_until(&mut l, deadline).timed_out() {
                return *l == 0;
            }
        }
        true
    }
}

/// CPU-bound job that finishes after one resume.
pub struct Spin {
    pub iters: u64,
    pub latch: Arc<Latch>,
}

impl Resumable for Spin {
    fn resume(&self, _max_msgs: usize) -> ResumeResult {
        let mut x = 0x9e37_79b9_7f4a_7c15u64;
        for i in 0..self.iters {
            x = black_box(x.rotate_left(7) ^ i).wrapping_mul(0x2545_f491_4f6c_dd1d);
        }
        black_box(x);
        self.latch.count_down();
        ResumeResult::Finished
    }
}

pub fn spin_jobs(n: usize, iters: u64) -> (Vec<Job>, Arc<Latch>) {
    let latch = Latch::new(n);
    let jobs = (0..n)
        .map(|_| {
            Arc::new(Spin {
                iters,
                latch: latch.clone(),
            }) as Job
        })
        .collect();
    (jobs, latch)
}

/// Places 8 jobs through central enqueue on a 4-worker scheduler without
/// running anything. Returns the queue length of every worker.
pub fn placement_of_eight() -> (Vec<usize>, u64) {
    let s = Scheduler::new(WorkStealing::new(), 4, usize::MAX);
    let (jobs, _latch) = spin_jobs(8, 1);
    for j in jobs {
        s.enqueue(j);
    }
    let c = s.coordinator();
    let lens = c.workers().iter().map(|w| w.data.len()).collect();
    let steals = c.workers().iter().map(|w| w.data.steals()).sum();
    (lens, steals)
}

pub struct ImbalanceRun {
    pub elapsed: Duration,
    pub steals: u64,
    pub finished: bool,
}

/// Puts every job on worker 0, then starts `workers` threads.
pub fn imbalanced(workers: usize, jobs: usize, iters: u64) -> ImbalanceRun {
    let s = Scheduler::new(WorkStealing::new(), workers, usize::MAX);
    let (js, latch) = spin_jobs(jobs, iters);
    {
        let c = s.coordinator();
        for j in js {
            s.policy().external_enqueue(c, c.worker(0), j);
        }
    }
    let start = Instant::now();
    s.spawn_workers();
    let finished = latch.wait(Duration::from_secs(120));
    let elapsed = start.elapsed();
    let steals = s.coordinator().workers().iter().map(|w| w.data.steals()).sum();
    s.stop();
    ImbalanceRun {
        elapsed,
        steals,
        finished,
    }
}

pub struct HookBalance {
    pub before: u64,
    pub after: u64,
    pub completions: u64,
    pub resumed_later: u64,
    /// Scheduled actors the workloads are known to terminate.
    pub terminated: u64,
}

/// Runs an actor tree and a mailbox flood on an instrumented scheduler with
/// a small message budget.
pub fn hook_balance(workers: usize, depth: u32) -> HookBalance {
    let policy = Instrumented::new(WorkStealing::new());
    let counts = policy.counts();
    let rt = Runtime::with_scheduler(policy, workers, 2).unwrap();
    assert_eq!(cafx::bench::creation(&rt, depth), 1 << depth);
    assert_eq!(cafx::bench::mailbox(&rt, 4, 100), 400);
    let terminated = (1u64 << (depth + 1)) - 1 + 4 + 1;
    rt.await_all_actors_done_timeout(Duration::from_secs(30));
    let deadline = Instant::now() + Duration::from_secs(10);
    while (counts.completions() < terminated || counts.before() != counts.after()) && Instant::now() < deadline {
        std::thread::sleep(Duration::from_millis(1));
    }
    HookBalance {
        before: counts.before(),
        after: counts.after(),
        completions: counts.completions(),
        resumed_later: counts.resumed_later(),
        terminated,
    }
}
