//! Filebench-style micro and macro workloads.
//!
//! Every run formats a fresh file system, performs untimed setup, then times
//! the workload itself. Operation counts depend only on the configuration,
//! so they match across runs.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Barrier;
use std::thread;
use std::time::{Duration, Instant};

use anyhow::{ensure, Result};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use bentoframe_core::bentofs::{MkfsOptions, MountOptions, Variant};
use bentoframe_core::fsapi::{Connection, O_RDONLY, O_RDWR, O_WRONLY};
use bentoframe_core::Errno;

use crate::fsops::{pattern, Ops, ROOT};
use crate::mount::{fresh_device, Mounted};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    SeqRead,
    RandRead,
    SeqWrite,
    RandWrite,
    Create,
    Delete,
    VarmailLite,
    FileserverLite,
}

impl Suite {
    pub const ALL: [Suite; 8] = [
        Suite::SeqRead,
        Suite::RandRead,
        Suite::SeqWrite,
        Suite::RandWrite,
        Suite::Create,
        Suite::Delete,
        Suite::VarmailLite,
        Suite::FileserverLite,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::SeqRead => "seqread",
            Suite::RandRead => "randread",
            Suite::SeqWrite => "seqwrite",
            Suite::RandWrite => "randwrite",
            Suite::Create => "create",
            Suite::Delete => "delete",
            Suite::VarmailLite => "varmail-lite",
            Suite::FileserverLite => "fileserver-lite",
        }
    }

    /// Throughput in MB/s for the data suites, ops/s for the rest.
    pub fn unit(self) -> &'static str {
        match self {
            Suite::SeqRead | Suite::RandRead | Suite::SeqWrite | Suite::RandWrite => "MB/s",
            _ => "ops/s",
        }
    }

    pub fn default_opsize(self) -> usize {
        match self {
            Suite::Create | Suite::Delete | Suite::VarmailLite | Suite::FileserverLite => 16 << 10,
            _ => 4096,
        }
    }
}

impl FromStr for Suite {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| format!("unknown suite {s:?}"))
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub suite: Suite,
    pub threads: usize,
    pub opsize: usize,
    pub runs: usize,
    pub seed: u64,
    /// Total file size for the read/write suites.
    pub file_size: u64,
    /// Files for create/delete, iterations for the macro suites.
    pub files: usize,
    /// Image file to reformat for each run; memory when absent.
    pub image: Option<PathBuf>,
}

impl BenchConfig {
    pub fn new(suite: Suite) -> Self {
        BenchConfig {
            suite,
            threads: 1,
            opsize: suite.default_opsize(),
            runs: 3,
            seed: 0,
            file_size: 64 << 20,
            files: 10_000,
            image: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSample {
    pub ops: u64,
    pub bytes: u64,
    pub failures: u64,
    pub elapsed: Duration,
}

impl RunSample {
    pub fn throughput(&self, suite: Suite) -> f64 {
        let secs = self.elapsed.as_secs_f64().max(1e-9);
        match suite.unit() {
            "MB/s" => self.bytes as f64 / 1e6 / secs,
            _ => self.ops as f64 / secs,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BenchResult {
    pub suite: Suite,
    pub threads: usize,
    pub opsize: usize,
    pub samples: Vec<RunSample>,
    pub mean: f64,
    /// Sample standard deviation; absent below three runs.
    pub stddev: Option<f64>,
}

impl BenchResult {
    pub fn failures(&self) -> u64 {
        self.samples.iter().map(|s| s.failures).sum()
    }

    /// One machine-readable line.
    pub fn machine_line(&self) -> String {
        let ops: Vec<String> = self.samples.iter().map(|s| s.ops.to_string()).collect();
        format!(
            "bench suite={} threads={} size={} runs={} mean={:.3} stddev={} unit={} ops={} failures={}",
            self.suite,
            self.threads,
            self.opsize,
            self.samples.len(),
            self.mean,
            self.stddev.map_or("na".to_string(), |s| format!("{s:.3}")),
            self.suite.unit(),
            ops.join(","),
            self.failures()
        )
    }

    pub fn header() -> String {
        format!("{:<16} {:>7} {:>8} {:>24}", "workload", "threads", "size", "throughput")
    }
}

impl fmt::Display for BenchResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let value = match self.stddev {
            Some(sd) => format!("{:.2} ± {:.2} {}", self.mean, sd, self.suite.unit()),
            None => format!("{:.2} {}", self.mean, self.suite.unit()),
        };
        write!(f, "{:<16} {:>7} {:>8} {:>24}", self.suite, self.threads, human_size(self.opsize), value)
    }
}

fn human_size(n: usize) -> String {
    match n {
        n if n >= 1 << 20 && n % (1 << 20) == 0 => format!("{}m", n >> 20),
        n if n >= 1 << 10 && n % (1 << 10) == 0 => format!("{}k", n >> 10),
        n => n.to_string(),
    }
}

/// Mean and sample standard deviation (the latter only for three or more
/// values).
pub fn mean_stddev(xs: &[f64]) -> (f64, Option<f64>) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 3 {
        return (mean, None);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some(var.sqrt()))
}

#[derive(Default)]
struct Counters {
    ops: AtomicU64,
    bytes: AtomicU64,
    failures: AtomicU64,
}

impl Counters {
    fn op<T>(&self, r: Result<T, Errno>) -> Option<T> {
        self.ops.fetch_add(1, Ordering::Relaxed);
        match r {
            Ok(v) => Some(v),
            Err(e) => {
                log::debug!("bench op failed: {e}");
                self.failures.fetch_add(1, Ordering::Relaxed);
                None
            }
        }
    }

    fn io(&self, r: Result<usize, Errno>) {
        if let Some(n) = self.op(r) {
            self.bytes.fetch_add(n as u64, Ordering::Relaxed);
        }
    }
}

/// Device size for a run, with room to spare.
fn geometry(cfg: &BenchConfig) -> (u64, MkfsOptions) {
    let data = match cfg.suite {
        Suite::SeqRead | Suite::SeqWrite | Suite::RandRead | Suite::RandWrite => cfg.file_size,
        Suite::VarmailLite | Suite::FileserverLite => (cfg.threads as u64 * 64) * (cfg.opsize as u64 * 10),
        _ => cfg.files as u64 * cfg.opsize.max(4096) as u64,
    };
    let files = match cfg.suite {
        Suite::Create | Suite::Delete => cfg.files as u64,
        _ => cfg.threads as u64 * 64,
    };
    let blocks = (data / 4096) * 5 / 4 + files * 2 + 8192;
    let opts = MkfsOptions {
        inode_count: Some(files + 1024),
        ..MkfsOptions::default()
    };
    (blocks, opts)
}

/// Runs the suite `cfg.runs` times.
pub fn run(cfg: &BenchConfig) -> Result<BenchResult> {
    ensure!(cfg.threads >= 1, "at least one thread is needed");
    ensure!(cfg.opsize >= 1, "op size must be positive");
    ensure!(cfg.runs >= 1, "at least one run is needed");
    if cfg.runs < 3 {
        log::warn!("{} runs: standard deviation needs at least 3, omitting it", cfg.runs);
    }
    let mut samples = Vec::with_capacity(cfg.runs);
    for i in 0..cfg.runs {
        let s = run_once(cfg)?;
        log::info!("{} run {}: {:.2} {} ({} ops)", cfg.suite, i + 1, s.throughput(cfg.suite), cfg.suite.unit(), s.ops);
        if s.failures > 0 {
            log::warn!("{} run {}: {} operations failed", cfg.suite, i + 1, s.failures);
        }
        samples.push(s);
    }
    let xs: Vec<f64> = samples.iter().map(|s| s.throughput(cfg.suite)).collect();
    let (mean, stddev) = mean_stddev(&xs);
    Ok(BenchResult {
        suite: cfg.suite,
        threads: cfg.threads,
        opsize: cfg.opsize,
        samples,
        mean,
        stddev,
    })
}

/// One formatted, timed run.
pub fn run_once(cfg: &BenchConfig) -> Result<RunSample> {
    let (blocks, mkfs_opts) = geometry(cfg);
    let dev = fresh_device(cfg.image.as_deref(), blocks, &mkfs_opts)?;
    let m = Mounted::new("bench", Variant::Plain, &dev, MountOptions::default())?;
    let setup = setup(cfg, &m.conn)?;
    let c = Counters::default();
    let barrier = Barrier::new(cfg.threads + 1);
    let elapsed = thread::scope(|s| {
        for t in 0..cfg.threads {
            let (c, barrier, setup, conn) = (&c, &barrier, &setup, &m.conn);
            s.spawn(move || {
                barrier.wait();
                worker(cfg, conn, setup, t, c);
            });
        }
        barrier.wait();
        let start = Instant::now();
        // The scope joins every worker before returning.
        start
    })
    .elapsed();
    m.finish()?;
    Ok(RunSample {
        ops: c.ops.into_inner(),
        bytes: c.bytes.into_inner(),
        failures: c.failures.into_inner(),
        elapsed,
    })
}

struct Setup {
    /// Per-thread directory.
    dirs: Vec<u64>,
    /// Per-thread file for the sequential suites; one shared file at index 0
    /// for the random ones.
    files: Vec<u64>,
}

fn per_thread(total: u64, threads: usize, t: usize) -> u64 {
    total / threads as u64 + u64::from((t as u64) < total % threads as u64)
}

fn fill(ops: &Ops<'_, Connection>, ino: u64, len: u64, seed: u64) -> Result<(), Errno> {
    let o = ops.open(ino, O_WRONLY)?;
    let chunk = pattern(1 << 20, seed);
    let mut off = 0;
    while off < len {
        let n = (len - off).min(chunk.len() as u64) as usize;
        ops.write_all(ino, o.fh, off, &chunk[..n])?;
        off += n as u64;
    }
    ops.fsync(ino, o.fh)?;
    ops.release(ino, o.fh)
}

fn setup(cfg: &BenchConfig, conn: &Connection) -> Result<Setup> {
    let ops = Ops::new(conn, 1);
    let mut dirs = Vec::new();
    for t in 0..cfg.threads {
        dirs.push(ops.mkdir(ROOT, &format!("t{t}"))?.ino());
    }
    let mut files = Vec::new();
    match cfg.suite {
        Suite::SeqRead | Suite::SeqWrite => {
            for (t, &d) in dirs.iter().enumerate() {
                let (e, o) = ops.create(d, "seq", O_RDWR)?;
                ops.release(e.ino(), o.fh)?;
                if cfg.suite == Suite::SeqRead {
                    fill(&ops, e.ino(), per_thread(cfg.file_size, cfg.threads, t), cfg.seed + t as u64)?;
                }
                files.push(e.ino());
            }
        }
        Suite::RandRead | Suite::RandWrite => {
            let (e, o) = ops.create(ROOT, "rand", O_RDWR)?;
            ops.release(e.ino(), o.fh)?;
            fill(&ops, e.ino(), cfg.file_size, cfg.seed)?;
            files.push(e.ino());
        }
        Suite::Delete => {
            let data = pattern(cfg.opsize, cfg.seed);
            for (t, &d) in dirs.iter().enumerate() {
                for i in 0..per_thread(cfg.files as u64, cfg.threads, t) {
                    let (e, o) = ops.create(d, &format!("f{i}"), O_RDWR)?;
                    ops.write_all(e.ino(), o.fh, 0, &data)?;
                    ops.release(e.ino(), o.fh)?;
                }
            }
        }
        Suite::VarmailLite | Suite::FileserverLite => {
            // A small pre-populated fileset per thread.
            let data = pattern(cfg.opsize, cfg.seed);
            for &d in &dirs {
                for i in 0..16 {
                    let (e, o) = ops.create(d, &format!("f{i}"), O_RDWR)?;
                    ops.write_all(e.ino(), o.fh, 0, &data)?;
                    ops.release(e.ino(), o.fh)?;
                }
            }
        }
        Suite::Create => {}
    }
    ops.sync()?;
    Ok(Setup { dirs, files })
}

/// Random accesses in the random suites, in total across threads.
fn random_ops(cfg: &BenchConfig) -> u64 {
    (cfg.file_size / cfg.opsize as u64).clamp(1, 65_536)
}

fn worker(cfg: &BenchConfig, conn: &Connection, setup: &Setup, t: usize, c: &Counters) {
    let ops = Ops::new(conn, 1000 + t as u32);
    let mut rng = StdRng::seed_from_u64(cfg.seed ^ (t as u64).wrapping_mul(0x9E37_79B9));
    let buf = pattern(cfg.opsize, cfg.seed.wrapping_add(t as u64));
    let dir = setup.dirs[t];
    match cfg.suite {
        Suite::SeqRead | Suite::SeqWrite => {
            let ino = setup.files[t];
            let len = per_thread(cfg.file_size, cfg.threads, t);
            let flags = if cfg.suite == Suite::SeqRead { O_RDONLY } else { O_WRONLY };
            let Some(o) = c.op(ops.open(ino, flags)) else { return };
            let mut off = 0;
            while off < len {
                let n = (len - off).min(cfg.opsize as u64) as usize;
                if cfg.suite == Suite::SeqRead {
                    c.io(ops.read(ino, o.fh, off, n as u32).map(|d| d.len()));
                } else {
                    c.io(ops.write(ino, o.fh, off, &buf[..n]).map(|w| w as usize));
                }
                off += n as u64;
            }
            if cfg.suite == Suite::SeqWrite {
                c.op(ops.fsync(ino, o.fh));
            }
            c.op(ops.release(ino, o.fh));
        }
        Suite::RandRead | Suite::RandWrite => {
            let ino = setup.files[0];
            let slots = (cfg.file_size / cfg.opsize as u64).max(1);
            let write = cfg.suite == Suite::RandWrite;
            let Some(o) = c.op(ops.open(ino, if write { O_WRONLY } else { O_RDONLY })) else { return };
            for _ in 0..per_thread(random_ops(cfg), cfg.threads, t) {
                let off = rng.gen_range(0..slots) * cfg.opsize as u64;
                if write {
                    c.io(ops.write(ino, o.fh, off, &buf).map(|w| w as usize));
                } else {
                    c.io(ops.read(ino, o.fh, off, cfg.opsize as u32).map(|d| d.len()));
                }
            }
            if write {
                c.op(ops.fsync(ino, o.fh));
            }
            c.op(ops.release(ino, o.fh));
        }
        Suite::Create => {
            for i in 0..per_thread(cfg.files as u64, cfg.threads, t) {
                if let Some((e, o)) = c.op(ops.create(dir, &format!("f{i}"), O_RDWR)) {
                    c.io(ops.write_all(e.ino(), o.fh, 0, &buf).map(|_| buf.len()));
                    c.op(ops.release(e.ino(), o.fh));
                }
            }
        }
        Suite::Delete => {
            for i in 0..per_thread(cfg.files as u64, cfg.threads, t) {
                c.op(ops.unlink(dir, &format!("f{i}")));
            }
            c.op(ops.sync());
        }
        Suite::VarmailLite => {
            // delete; create, append, fsync; open, read, append, fsync; open, read.
            for _ in 0..per_thread(cfg.files as u64, cfg.threads, t) {
                let name = format!("f{}", rng.gen_range(0..16));
                c.op(ops.unlink(dir, &name));
                if let Some((e, o)) = c.op(ops.create(dir, &name, O_RDWR)) {
                    let ino = e.ino();
                    c.io(ops.write(ino, o.fh, 0, &buf).map(|w| w as usize));
                    c.op(ops.fsync(ino, o.fh));
                    c.op(ops.release(ino, o.fh));
                    if let Some(o) = c.op(ops.open(ino, O_RDWR)) {
                        c.io(ops.read_to_end(ino, o.fh, 0).map(|d| d.len()));
                        c.io(ops.write(ino, o.fh, buf.len() as u64, &buf).map(|w| w as usize));
                        c.op(ops.fsync(ino, o.fh));
                        c.op(ops.release(ino, o.fh));
                    }
                    if let Some(o) = c.op(ops.open(ino, O_RDONLY)) {
                        c.io(ops.read_to_end(ino, o.fh, 0).map(|d| d.len()));
                        c.op(ops.release(ino, o.fh));
                    }
                }
            }
        }
        Suite::FileserverLite => {
            // create, write whole file; open, append; open, read; delete; stat.
            // No fsync anywhere, so data of deleted files never reaches disk.
            for i in 0..per_thread(cfg.files as u64, cfg.threads, t) {
                let name = format!("n{i}");
                if let Some((e, o)) = c.op(ops.create(dir, &name, O_RDWR)) {
                    let ino = e.ino();
                    c.io(ops.write(ino, o.fh, 0, &buf).map(|w| w as usize));
                    c.op(ops.release(ino, o.fh));
                    if let Some(o) = c.op(ops.open(ino, O_WRONLY)) {
                        c.io(ops.write(ino, o.fh, buf.len() as u64, &buf[..buf.len() / 2]).map(|w| w as usize));
                        c.op(ops.release(ino, o.fh));
                    }
                    if let Some(o) = c.op(ops.open(ino, O_RDONLY)) {
                        c.io(ops.read_to_end(ino, o.fh, 0).map(|d| d.len()));
                        c.op(ops.release(ino, o.fh));
                    }
                    c.op(ops.unlink(dir, &name));
                }
                let victim = format!("f{}", rng.gen_range(0..16));
                c.op(ops.lookup(dir, &victim).and_then(|e| ops.getattr(e.ino())));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stddev_needs_three_samples() {
        assert_eq!(mean_stddev(&[2.0, 4.0]), (3.0, None));
        let (m, sd) = mean_stddev(&[2.0, 4.0, 6.0]);
        assert_eq!(m, 4.0);
        assert_eq!(sd, Some(2.0));
    }

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(s.name().parse::<Suite>(), Ok(s));
        }
        assert!("nope".parse::<Suite>().is_err());
    }

    #[test]
    fn op_counts_are_deterministic() {
        for suite in Suite::ALL {
            let cfg = BenchConfig {
                threads: 2,
                runs: 2,
                file_size: 1 << 20,
                files: 40,
                ..BenchConfig::new(suite)
            };
            let r = run(&cfg).unwrap();
            assert_eq!(r.samples[0].ops, r.samples[1].ops, "{suite}");
            assert_eq!(r.failures(), 0, "{suite}");
            assert!(r.stddev.is_none());
            assert!(r.mean > 0.0, "{suite}");
        }
    }
}
