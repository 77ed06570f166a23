//! `bench`: runs the actor benchmarks and reports wall clock, peak memory
//! and checksums.

use std::path::PathBuf;
use std::process::ExitCode;

use cafx::bench::{self, BenchConfig, BenchReport, Decrement, MixedParams};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "bench", version, about = "Actor runtime benchmarks")]
struct Cli {
    /// Worker threads [default: CAFX_WORKERS or the number of cores]
    #[arg(long, global = true, value_parser = clap::value_parser!(u32).range(1..))]
    workers: Option<u32>,

    /// Messages an actor may handle per scheduling turn [default: CAFX_MAX_MSGS or unlimited]
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(1..))]
    max_msgs: Option<u64>,

    /// Independent runs to average
    #[arg(long, global = true, default_value_t = 10, value_parser = clap::value_parser!(u32).range(1..))]
    runs: u32,

    /// Write one row per run here, plus a `<benchmark>.mem.csv` memory series next to it
    #[arg(long, global = true)]
    csv: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Computes 2^K by recursively spawning a binary tree of actors
    Creation {
        #[arg(long, value_parser = clap::value_parser!(u32).range(0..=24))]
        exp: u32,
    },
    /// Many senders flood one receiver
    Mailbox {
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        senders: u64,
        #[arg(long)]
        msgs: u64,
    },
    /// Token rings plus prime factorization
    Mixed {
        #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
        rings: u32,
        #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
        ring_size: u32,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        token: u64,
        #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
        reps: u32,
        /// Number each ring's worker factorizes per incarnation
        #[arg(long, default_value_t = bench::DEFAULT_FACTOR_TARGET, value_parser = clap::value_parser!(u64).range(2..))]
        factor: u64,
        #[arg(long, value_enum, default_value_t = DecrementArg::Round)]
        decrement: DecrementArg,
    },
    /// One actor per row of an N×N Mandelbrot image
    Mandelbrot {
        #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
        size: u32,
        #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
        iter: u32,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum DecrementArg {
    /// Once per trip around the ring
    Round,
    /// On every hop
    Hop,
}

impl From<DecrementArg> for Decrement {
    fn from(d: DecrementArg) -> Decrement {
        match d {
            DecrementArg::Round => Decrement::Round,
            DecrementArg::Hop => Decrement::Hop,
        }
    }
}

fn run_one(cfg: BenchConfig, cmd: &Command) -> Result<BenchReport, cafx::runtime::ConfigError> {
    match *cmd {
        Command::Creation { exp } => bench::run_creation(cfg, exp),
        Command::Mailbox { senders, msgs } => bench::run_mailbox(cfg, senders, msgs),
        Command::Mixed {
            rings,
            ring_size,
            token,
            reps,
            factor,
            decrement,
        } => {
            let mut p = MixedParams::new(rings, ring_size, token, reps);
            p.factor_target = factor;
            p.decrement = decrement.into();
            bench::run_mixed(cfg, p)
        }
        Command::Mandelbrot { size, iter } => bench::run_mandelbrot(cfg, size, iter),
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    let mut cfg = BenchConfig::default();
    if let Some(w) = cli.workers {
        cfg.workers = w as usize;
    }
    if let Some(m) = cli.max_msgs {
        cfg.max_msgs = usize::try_from(m).unwrap_or(usize::MAX);
    }

    let mut reports = Vec::with_capacity(cli.runs as usize);
    for i in 0..cli.runs as usize {
        let mut r = match run_one(cfg, &cli.command) {
            Ok(r) => r,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::FAILURE;
            }
        };
        r.run_index = i;
        println!(
            "{} [{}] run {}/{}: {:.3} ms, peak rss {} bytes, checksum {}",
            r.benchmark,
            r.params,
            i + 1,
            cli.runs,
            r.wall_clock_ms,
            r.peak_rss(),
            r.checksum
        );
        reports.push(r);
    }

    let first = reports[0].checksum;
    if reports.iter().any(|r| r.checksum != first) {
        eprintln!("error: checksums differ between runs");
        return ExitCode::FAILURE;
    }
    println!(
        "mean {:.3} ms over {} runs with {} workers, checksum {}",
        bench::mean_wall_clock(&reports),
        reports.len(),
        cfg.workers,
        first
    );

    if let Some(path) = &cli.csv {
        match bench::write_csv(path, &reports) {
            Ok(files) => {
                for f in files {
                    println!("wrote {}", f.display());
                }
            }
            Err(e) => {
                eprintln!("error: cannot write {}: {e}", path.display());
                return ExitCode::FAILURE;
            }
        }
    }
    ExitCode::SUCCESS
}
