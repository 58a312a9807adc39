//! Live upgrade under load: Bento-fs is swapped for Bento-prov while
//! worker threads keep issuing operations, and completions are counted in
//! 5 ms buckets.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Barrier;
use std::thread;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use bentoframe_core::bentofs::fsck::fsck;
use bentoframe_core::bentofs::{BentoFs, MkfsOptions, MountOptions, Variant};
use bentoframe_core::fsapi::{Connection, FsRegistration, O_RDWR, O_WRONLY};
use bentoframe_core::upgrade::{upgrade, UpgradeReport};
use bentoframe_core::Errno;

use crate::fsops::{pattern, Ops, ROOT};
use crate::mount::{fresh_device, Mounted};

pub const BUCKET: Duration = Duration::from_millis(5);
const FS_NAME: &str = "bentofs";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Load {
    /// One thread creating and deleting files.
    CreateDelete1t,
    /// Ten threads writing 64 KiB to random files and syncing.
    SyncWrite10t,
}

impl Load {
    pub fn name(self) -> &'static str {
        match self {
            Load::CreateDelete1t => "createdelete-1t",
            Load::SyncWrite10t => "syncwrite-10t",
        }
    }

    pub fn threads(self) -> usize {
        match self {
            Load::CreateDelete1t => 1,
            Load::SyncWrite10t => 10,
        }
    }
}

impl FromStr for Load {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "createdelete-1t" => Ok(Load::CreateDelete1t),
            "syncwrite-10t" => Ok(Load::SyncWrite10t),
            _ => Err(format!("unknown load {s:?}, expected createdelete-1t or syncwrite-10t")),
        }
    }
}

impl fmt::Display for Load {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug)]
pub struct DemoConfig {
    pub load: Load,
    pub duration: Duration,
    pub at: Duration,
    /// Files placed in the working directory before the run.
    pub prepopulate: usize,
    pub seed: u64,
    pub image: Option<PathBuf>,
}

impl DemoConfig {
    pub fn new(load: Load) -> Self {
        DemoConfig {
            load,
            duration: Duration::from_millis(1000),
            at: Duration::from_millis(500),
            prepopulate: 10_000,
            seed: 0,
            image: None,
        }
    }
}

/// A maximal run of low-throughput buckets, as bucket indices `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Gap {
    pub start: usize,
    pub end: usize,
}

impl Gap {
    pub fn contains(&self, t: Duration) -> bool {
        let b = (t.as_micros() / BUCKET.as_micros()) as usize;
        (self.start..self.end).contains(&b)
    }
}

#[derive(Debug)]
pub struct DemoReport {
    pub load: Load,
    pub threads: usize,
    /// Completed operations per 5 ms bucket.
    pub buckets: Vec<u64>,
    pub issued: u64,
    pub completed: u64,
    pub failed: u64,
    /// `None` when the trigger time lies beyond the run.
    pub upgrade: Option<UpgradeReport>,
    /// Gate acquire and release relative to the start of the load.
    pub upgrade_window: Option<(Duration, Duration)>,
    pub gaps: Vec<Gap>,
    /// Journal commits and checkpoints during the load.
    pub commits: u64,
    pub checkpoints: u64,
    pub fsck_clean: bool,
}

impl DemoReport {
    pub fn lost(&self) -> u64 {
        self.issued - self.completed
    }

    /// Mean ops/s over the buckets entirely before and after the upgrade.
    pub fn throughput_around_upgrade(&self) -> Option<(f64, f64)> {
        let (a, r) = self.upgrade_window?;
        let b = BUCKET.as_micros();
        let first_after = (r.as_micros().div_ceil(b)) as usize;
        let last_before = (a.as_micros() / b) as usize;
        let rate = |s: &[u64]| {
            (!s.is_empty()).then(|| s.iter().sum::<u64>() as f64 / (s.len() as f64 * BUCKET.as_secs_f64()))
        };
        Some((rate(&self.buckets[..last_before.min(self.buckets.len())])?, rate(self.buckets.get(first_after..)?)?))
    }

    /// True when exactly one gap exists and it contains the upgrade instant.
    pub fn single_gap_at_upgrade(&self) -> bool {
        match (self.gaps.as_slice(), self.upgrade_window) {
            ([g], Some((a, _))) => g.contains(a),
            _ => false,
        }
    }

    /// Line-based rendering: buckets, upgrade, summary.
    pub fn machine_lines(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .buckets
            .iter()
            .enumerate()
            .map(|(i, n)| format!("bucket start_ms={} ops={}", i * BUCKET.as_millis() as usize, n))
            .collect();
        match (&self.upgrade, self.upgrade_window) {
            (Some(u), Some((a, r))) => out.push(format!(
                "upgrade at_us={} released_us={} pause_us={} wait_us={} ops_blocked={} generation={}->{} state_transferred={}",
                a.as_micros(),
                r.as_micros(),
                u.pause.as_micros(),
                u.wait.as_micros(),
                u.ops_blocked,
                u.old_generation,
                u.new_generation,
                u.state_transferred
            )),
            _ => out.push("upgrade none reason=at_ms_beyond_run".to_string()),
        }
        for g in &self.gaps {
            out.push(format!(
                "gap start_ms={} end_ms={}",
                g.start * BUCKET.as_millis() as usize,
                g.end * BUCKET.as_millis() as usize
            ));
        }
        let (pre, post) = self.throughput_around_upgrade().unwrap_or((f64::NAN, f64::NAN));
        out.push(format!(
            "demo load={} threads={} issued={} completed={} failed={} lost={} gaps={} single_gap_at_upgrade={} pre_ops_s={:.0} post_ops_s={:.0} commits={} checkpoints={} fsck_clean={}",
            self.load,
            self.threads,
            self.issued,
            self.completed,
            self.failed,
            self.lost(),
            self.gaps.len(),
            self.single_gap_at_upgrade(),
            pre,
            post,
            self.commits,
            self.checkpoints,
            self.fsck_clean
        ));
        out
    }
}

/// Buckets whose count is below half the median form gaps. The first bucket
/// (no operation can have completed before one latency has passed) and the
/// final, partially covered bucket are not considered.
pub fn find_gaps(buckets: &[u64]) -> Vec<Gap> {
    if buckets.len() < 3 {
        return Vec::new();
    }
    let full = &buckets[1..buckets.len() - 1];
    let mut sorted = full.to_vec();
    sorted.sort_unstable();
    let median = sorted[sorted.len() / 2];
    let mut gaps = Vec::new();
    let mut start = None;
    for (i, &n) in full.iter().enumerate() {
        let low = 2 * n < median;
        match (low, start) {
            (true, None) => start = Some(i + 1),
            (false, Some(s)) => {
                gaps.push(Gap { start: s, end: i + 1 });
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        gaps.push(Gap { start: s, end: full.len() + 1 });
    }
    gaps
}

#[derive(Default)]
struct Tally {
    issued: AtomicU64,
    completed: AtomicU64,
    failed: AtomicU64,
}

impl Tally {
    /// Runs one logical operation and records its completion time.
    fn op(&self, t0: Instant, stamps: &mut Vec<Duration>, f: impl FnOnce() -> Result<(), Errno>) {
        self.issued.fetch_add(1, Ordering::SeqCst);
        let r = f();
        stamps.push(t0.elapsed());
        self.completed.fetch_add(1, Ordering::SeqCst);
        if let Err(e) = r {
            log::warn!("operation failed during demo: {e}");
            self.failed.fetch_add(1, Ordering::SeqCst);
        }
    }
}

fn prepopulate(conn: &Connection, cfg: &DemoConfig) -> Result<u64> {
    let ops = Ops::new(conn, 1);
    let dir = ops.mkdir(ROOT, "work")?.ino();
    for i in 0..cfg.prepopulate {
        let (e, o) = ops.create(dir, &format!("p{i}"), O_RDWR)?;
        ops.release(e.ino(), o.fh)?;
    }
    ops.sync()?;
    Ok(dir)
}

fn worker(cfg: &DemoConfig, conn: &Connection, dir: u64, t: usize, t0: Instant, stop: &AtomicBool, tally: &Tally) -> Vec<Duration> {
    let ops = Ops::new(conn, 100 + t as u32);
    let mut stamps = Vec::new();
    match cfg.load {
        Load::CreateDelete1t => {
            let mut i = 0u64;
            while !stop.load(Ordering::Relaxed) {
                let name = format!("cd{t}-{i}");
                tally.op(t0, &mut stamps, || {
                    let (e, o) = ops.create(dir, &name, O_RDWR)?;
                    ops.release(e.ino(), o.fh)
                });
                tally.op(t0, &mut stamps, || ops.unlink(dir, &name));
                i += 1;
            }
        }
        Load::SyncWrite10t => {
            let mut rng = StdRng::seed_from_u64(cfg.seed.wrapping_add(t as u64));
            let data = pattern(64 << 10, cfg.seed + t as u64);
            while !stop.load(Ordering::Relaxed) {
                let name = format!("p{}", rng.gen_range(0..cfg.prepopulate.max(1)));
                tally.op(t0, &mut stamps, || {
                    let ino = ops.lookup(dir, &name)?.ino();
                    let o = ops.open(ino, O_WRONLY)?;
                    let r = ops.write_all(ino, o.fh, 0, &data).and_then(|_| ops.fsync(ino, o.fh));
                    ops.release(ino, o.fh)?;
                    r
                });
            }
        }
    }
    stamps
}

/// Runs the load and, unless `at` lies beyond the run, upgrades to
/// Bento-prov at `at`. An upgrade failure is an error.
pub fn run(cfg: &DemoConfig) -> Result<DemoReport> {
    if cfg.load == Load::SyncWrite10t && cfg.prepopulate == 0 {
        bail!("syncwrite-10t needs pre-populated files");
    }
    let files = cfg.prepopulate as u64 + 1024;
    let blocks = files * 2 + 16 * files.min(4096) + 32_768;
    let dev = fresh_device(
        cfg.image.as_deref(),
        blocks,
        &MkfsOptions {
            inode_count: Some(files + 4096),
            ..MkfsOptions::default()
        },
    )?;
    let m = Mounted::new(FS_NAME, Variant::Plain, &dev, MountOptions::default())?;
    let dir = prepopulate(&m.conn, cfg)?;
    let threads = cfg.load.threads();
    let do_upgrade = cfg.at < cfg.duration;
    if !do_upgrade {
        log::warn!("upgrade time {:?} lies beyond the {:?} run; no upgrade", cfg.at, cfg.duration);
    }

    let journal_stats = |conn: &Connection| {
        conn.with_instance(|fs| BentoFs::from_dyn(fs).and_then(|b| b.journal()).map(|j| j.stats()))
            .flatten()
            .unwrap_or_default()
    };
    let before = journal_stats(&m.conn);
    let tally = Tally::default();
    let stop = AtomicBool::new(false);
    let barrier = Barrier::new(threads + 1);
    let (stamps, upgrade_result) = thread::scope(|s| {
        let t0 = Instant::now();
        let workers: Vec<_> = (0..threads)
            .map(|t| {
                let (conn, stop, tally, barrier) = (&m.conn, &stop, &tally, &barrier);
                s.spawn(move || {
                    barrier.wait();
                    worker(cfg, conn, dir, t, t0, stop, tally)
                })
            })
            .collect();
        barrier.wait();
        let mut upgrade_result = None;
        if do_upgrade {
            thread::sleep(cfg.at.saturating_sub(t0.elapsed()));
            let next = BentoFs::new(Variant::Prov, MountOptions::default());
            let ticket = m
                .registry
                .register_filesystem(FsRegistration::new(FS_NAME, Box::new(next)).upgrade())
                .map_err(anyhow::Error::from)
                .and_then(|r| r.ticket().context("registration did not produce a ticket"));
            upgrade_result = Some(ticket.and_then(|t| upgrade(t).map_err(anyhow::Error::from)).map(|r| {
                let window = (r.gate_acquired - t0, r.gate_released - t0);
                (r, window)
            }));
        }
        thread::sleep(cfg.duration.saturating_sub(t0.elapsed()));
        stop.store(true, Ordering::SeqCst);
        let stamps: Vec<Duration> = workers
            .into_iter()
            .flat_map(|w| w.join().expect("demo worker panicked"))
            .collect();
        (stamps, upgrade_result)
    });
    let (upgrade, upgrade_window) = match upgrade_result {
        None => (None, None),
        Some(Ok((r, w))) => (Some(r), Some(w)),
        Some(Err(e)) => {
            let _ = m.finish();
            return Err(e.context("upgrade failed"));
        }
    };

    // The journal object moves across the upgrade, so its counters continue.
    let after = journal_stats(&m.conn);
    // Operations finishing after the deadline land in the last bucket.
    let n = (cfg.duration.as_micros().div_ceil(BUCKET.as_micros())) as usize + 1;
    let mut buckets = vec![0u64; n];
    for s in stamps {
        let b = ((s.as_micros() / BUCKET.as_micros()) as usize).min(n - 1);
        buckets[b] += 1;
    }
    m.finish()?;
    let fsck_clean = fsck(&dev).map(|r| r.is_clean()).unwrap_or(false);
    let gaps = find_gaps(&buckets);
    Ok(DemoReport {
        load: cfg.load,
        threads,
        buckets,
        issued: tally.issued.into_inner(),
        completed: tally.completed.into_inner(),
        failed: tally.failed.into_inner(),
        upgrade,
        upgrade_window,
        gaps,
        commits: after.commits - before.commits,
        checkpoints: after.checkpoints - before.checkpoints,
        fsck_clean,
    })
}
