//! Benchmark workloads with wall-clock timing, resident-memory sampling and
//! CSV reports.

mod workloads;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crate::runtime::{ConfigError, Runtime};
use crate::scheduler::WorkStealing;

pub use workloads::{
    creation, escape_time, factorize, mailbox, mandelbrot, mandelbrot_row, mixed, sequential_mandelbrot, Area, Decrement,
    MixedParams, MixedResult, DEFAULT_FACTOR_P, DEFAULT_FACTOR_Q, DEFAULT_FACTOR_TARGET,
};

pub const SAMPLE_INTERVAL: Duration = Duration::from_millis(50);

/// Scheduler settings for one benchmark run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchConfig {
    pub workers: usize,
    pub max_msgs: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            workers: crate::runtime::default_workers(),
            max_msgs: crate::runtime::default_max_msgs(),
        }
    }
}

impl BenchConfig {
    pub fn with_workers(workers: usize) -> BenchConfig {
        BenchConfig {
            workers,
            ..BenchConfig::default()
        }
    }

    pub fn runtime(&self) -> Result<Runtime, ConfigError> {
        Runtime::with_scheduler(WorkStealing::new(), self.workers, self.max_msgs)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub benchmark: String,
    pub params: String,
    pub workers: usize,
    pub run_index: usize,
    pub wall_clock_ms: f64,
    /// `(t_ms, resident_bytes)` pairs, roughly every 50 ms.
    pub memory_samples: Vec<(u64, u64)>,
    pub checksum: u64,
}

impl BenchReport {
    pub fn peak_rss(&self) -> u64 {
        self.memory_samples.iter().map(|s| s.1).max().unwrap_or(0)
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.3},{},{}",
            self.benchmark,
            self.params.replace(',', ";"),
            self.workers,
            self.run_index,
            self.wall_clock_ms,
            self.peak_rss(),
            self.checksum
        )
    }
}

pub const CSV_HEADER: &str = "benchmark,param_string,workers,run_index,wall_clock_ms,peak_rss_bytes,checksum";

/// Resident set size of this process, where the platform exposes it.
pub fn resident_bytes() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmRSS:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

/// Background thread recording resident memory at a fixed interval.
pub struct RssSampler {
    stop: Arc<AtomicBool>,
    thread: JoinHandle<Vec<(u64, u64)>>,
}

impl RssSampler {
    pub fn start(interval: Duration) -> RssSampler {
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let thread = thread::Builder::new()
            .name("cafx-rss".into())
            .spawn(move || {
                let t0 = Instant::now();
                let mut samples = Vec::new();
                loop {
                    if let Some(rss) = resident_bytes() {
                        samples.push((t0.elapsed().as_millis() as u64, rss));
                    }
                    if flag.load(Ordering::Acquire) {
                        break;
                    }
                    thread::park_timeout(interval);
                }
                samples
            })
            .expect("cannot spawn the sampler thread");
        RssSampler { stop, thread }
    }

    /// Stops sampling, taking one final sample.
    pub fn finish(self) -> Vec<(u64, u64)> {
        self.stop.store(true, Ordering::Release);
        self.thread.thread().unpark();
        self.thread.join().unwrap_or_default()
    }
}

/// Runs `f` on a fresh runtime while sampling memory.
pub fn measure<F>(benchmark: &str, params: String, cfg: BenchConfig, f: F) -> Result<BenchReport, ConfigError>
where
    F: FnOnce(&Runtime) -> u64,
{
    let rt = cfg.runtime()?;
    let sampler = RssSampler::start(SAMPLE_INTERVAL);
    let start = Instant::now();
    let checksum = f(&rt);
    let wall = start.elapsed();
    drop(rt);
    let memory_samples = sampler.finish();
    Ok(BenchReport {
        benchmark: benchmark.to_string(),
        params,
        workers: cfg.workers,
        run_index: 0,
        wall_clock_ms: wall.as_secs_f64() * 1000.0,
        memory_samples,
        checksum,
    })
}

/// Computes 2^k by recursively spawning a binary tree of actors.
pub fn run_creation(cfg: BenchConfig, k: u32) -> Result<BenchReport, ConfigError> {
    measure("creation", format!("exp={k}"), cfg, |rt| creation(rt, k))
}

/// `senders` actors each send `msgs` messages to one receiver.
pub fn run_mailbox(cfg: BenchConfig, senders: u64, msgs: u64) -> Result<BenchReport, ConfigError> {
    measure("mailbox", format!("senders={senders} msgs={msgs}"), cfg, |rt| {
        mailbox(rt, senders, msgs)
    })
}

/// Token rings with a factorization worker per ring.
pub fn run_mixed(cfg: BenchConfig, p: MixedParams) -> Result<BenchReport, ConfigError> {
    let params = format!(
        "rings={} ring_size={} token={} reps={} target={} decrement={:?}",
        p.rings, p.ring_size, p.token, p.repetitions, p.factor_target, p.decrement
    );
    measure("mixed", params, cfg, |rt| mixed(rt, &p).checksum())
}

/// One actor per row of an `n`×`n` Mandelbrot image.
pub fn run_mandelbrot(cfg: BenchConfig, n: u32, max_iter: u32) -> Result<BenchReport, ConfigError> {
    measure("mandelbrot", format!("size={n} iter={max_iter}"), cfg, |rt| {
        mandelbrot(rt, n, max_iter, Area::default())
    })
}

/// Writes one CSV row per report and a `<benchmark>.mem.csv` sidecar with
/// the memory samples of all runs, in run order, next to `path`.
pub fn write_csv(path: &Path, reports: &[BenchReport]) -> io::Result<Vec<PathBuf>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut written = vec![path.to_path_buf()];
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "{CSV_HEADER}")?;
    for r in reports {
        writeln!(out, "{}", r.csv_row())?;
    }
    out.flush()?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut names: Vec<&str> = reports.iter().map(|r| r.benchmark.as_str()).collect();
    names.dedup();
    for name in names {
        let side = dir.join(format!("{name}.mem.csv"));
        let mut out = BufWriter::new(File::create(&side)?);
        writeln!(out, "t_ms,rss_bytes")?;
        for r in reports.iter().filter(|r| r.benchmark == name) {
            for (t, rss) in &r.memory_samples {
                writeln!(out, "{t},{rss}")?;
            }
        }
        out.flush()?;
        written.push(side);
    }
    Ok(written)
}

/// Mean wall clock over reports, in milliseconds.
pub fn mean_wall_clock(reports: &[BenchReport]) -> f64 {
    if reports.is_empty() {
        return 0.0;
    }
    reports.iter().map(|r| r.wall_clock_ms).sum::<f64>() / reports.len() as f64
}
