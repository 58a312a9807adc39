//! Exhaustive two-operation crash-consistency tester.
//!
//! Each workload runs a fixed setup, then two operations, each optionally
//! followed by a sync. Every block write and flush the file system issues
//! is recorded. A crash state is the image as of a prefix of that trace
//! ending at a flush; in stress mode, every prefix plus random subsets of
//! the writes after the last flush. Each crash state is recovered by
//! mounting it, then checked:
//! - the offline checker finds no violation;
//! - the visible tree equals the tree before the first operation, after the
//!   first, or after the second (each operation is all-or-nothing);
//! - nothing a completed sync made durable is missing.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rayon::prelude::*;

use bentoframe_core::bentofs::fsck::fsck;
use bentoframe_core::bentofs::{mkfs, BentoFs, MkfsOptions, MountOptions, Variant};
use bentoframe_core::blockdev::{BlockDevice, DeviceOptions, MemImage, TraceMode, WriteTrace};
use bentoframe_core::fsapi::{SetAttr, O_RDWR, O_WRONLY};
use bentoframe_core::journal::JournalConfig;
use bentoframe_core::Errno;

use crate::fsops::{Direct, Ops};
use crate::model::{observe, Model, Tree};

const DIRS: [&str; 2] = ["A", "B"];
const FILES: [&str; 3] = ["A/foo", "A/bar", "B/baz"];
const SYMLINK_TARGET: &str = "foo";
const DEVICE_BLOCKS: u64 = 512;
const PID: u32 = 100;

/// Data written by a write operation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pat {
    P1,
    P2,
}

impl Pat {
    fn offset(self) -> u64 {
        match self {
            Pat::P1 => 0,
            Pat::P2 => 3000,
        }
    }

    fn data(self) -> Vec<u8> {
        match self {
            Pat::P1 => crate::fsops::pattern(6000, 1),
            Pat::P2 => crate::fsops::pattern(10_000, 2),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OpKind {
    Create,
    Mkdir,
    Rmdir,
    Unlink,
    Write,
    Truncate,
    Rename,
    Link,
    Symlink,
}

impl OpKind {
    pub const ALL: [OpKind; 9] = [
        OpKind::Create,
        OpKind::Mkdir,
        OpKind::Rmdir,
        OpKind::Unlink,
        OpKind::Write,
        OpKind::Truncate,
        OpKind::Rename,
        OpKind::Link,
        OpKind::Symlink,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Create => "create",
            OpKind::Mkdir => "mkdir",
            OpKind::Rmdir => "rmdir",
            OpKind::Unlink => "unlink",
            OpKind::Write => "write",
            OpKind::Truncate => "truncate",
            OpKind::Rename => "rename",
            OpKind::Link => "link",
            OpKind::Symlink => "symlink",
        }
    }

    pub fn parse(s: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == s)
    }
}

/// One operation of the universe.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum UOp {
    Create(&'static str),
    Mkdir(&'static str),
    Rmdir(&'static str),
    Unlink(&'static str),
    Write(&'static str, Pat),
    Truncate(&'static str, u64),
    Rename(&'static str, &'static str),
    Link(&'static str, &'static str),
    Symlink(&'static str),
}

impl UOp {
    pub fn kind(&self) -> OpKind {
        match self {
            UOp::Create(_) => OpKind::Create,
            UOp::Mkdir(_) => OpKind::Mkdir,
            UOp::Rmdir(_) => OpKind::Rmdir,
            UOp::Unlink(_) => OpKind::Unlink,
            UOp::Write(..) => OpKind::Write,
            UOp::Truncate(..) => OpKind::Truncate,
            UOp::Rename(..) => OpKind::Rename,
            UOp::Link(..) => OpKind::Link,
            UOp::Symlink(_) => OpKind::Symlink,
        }
    }

    fn apply_model(&self, m: &mut Model) -> Result<(), Errno> {
        match *self {
            UOp::Create(p) => m.create(p),
            UOp::Mkdir(p) => m.mkdir(p),
            UOp::Rmdir(p) => m.rmdir(p),
            UOp::Unlink(p) => m.unlink(p),
            UOp::Write(p, pat) => m.write(p, pat.offset(), &pat.data()),
            UOp::Truncate(p, s) => m.truncate(p, s),
            UOp::Rename(a, b) => m.rename(a, b),
            UOp::Link(a, b) => m.link(a, b),
            UOp::Symlink(p) => m.symlink(SYMLINK_TARGET, p),
        }
    }

    fn apply_fs(&self, ops: &Ops<'_, Direct<'_>>) -> Result<(), Errno> {
        match *self {
            UOp::Create(p) => {
                let (parent, name) = ops.resolve_parent(p)?;
                let (e, o) = ops.create(parent, name, O_RDWR | bentoframe_core::fsapi::O_EXCL)?;
                ops.release(e.ino(), o.fh)
            }
            UOp::Mkdir(p) => {
                let (parent, name) = ops.resolve_parent(p)?;
                ops.mkdir(parent, name).map(|_| ())
            }
            UOp::Rmdir(p) => {
                let (parent, name) = ops.resolve_parent(p)?;
                ops.rmdir(parent, name)
            }
            UOp::Unlink(p) => {
                let (parent, name) = ops.resolve_parent(p)?;
                ops.unlink(parent, name)
            }
            UOp::Write(p, pat) => {
                let ino = ops.resolve(p)?;
                let o = ops.open(ino, O_WRONLY)?;
                let r = ops.write_all(ino, o.fh, pat.offset(), &pat.data());
                ops.release(ino, o.fh)?;
                r
            }
            UOp::Truncate(p, size) => {
                let ino = ops.resolve(p)?;
                ops.setattr(
                    ino,
                    SetAttr {
                        size: Some(size),
                        ..Default::default()
                    },
                )
                .map(|_| ())
            }
            UOp::Rename(a, b) => {
                let (pa, na) = ops.resolve_parent(a)?;
                let (pb, nb) = ops.resolve_parent(b)?;
                ops.rename(pa, na, pb, nb)
            }
            UOp::Link(a, b) => {
                let ino = ops.resolve(a)?;
                let (pb, nb) = ops.resolve_parent(b)?;
                ops.link(ino, pb, nb).map(|_| ())
            }
            UOp::Symlink(p) => {
                let (parent, name) = ops.resolve_parent(p)?;
                ops.symlink(parent, name, SYMLINK_TARGET).map(|_| ())
            }
        }
    }

    /// The operation in script form.
    pub fn script(&self) -> String {
        match *self {
            UOp::Create(p) => format!("create {p} h\nclose h"),
            UOp::Mkdir(p) => format!("mkdir {p}"),
            UOp::Rmdir(p) => format!("rmdir {p}"),
            UOp::Unlink(p) => format!("unlink {p}"),
            UOp::Write(p, pat) => {
                let seed = if pat == Pat::P1 { 1 } else { 2 };
                let len = pat.data().len();
                format!("open {p} w h\nwrite h pattern:{seed}:{len} {}\nclose h", pat.offset())
            }
            UOp::Truncate(p, s) => format!("truncate {p} {s}"),
            UOp::Rename(a, b) => format!("rename {a} {b}"),
            UOp::Link(a, b) => format!("link {a} {b}"),
            UOp::Symlink(p) => format!("symlink {SYMLINK_TARGET} {p}"),
        }
    }
}

impl fmt::Display for UOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            UOp::Create(p) => write!(f, "create {p}"),
            UOp::Mkdir(p) => write!(f, "mkdir {p}"),
            UOp::Rmdir(p) => write!(f, "rmdir {p}"),
            UOp::Unlink(p) => write!(f, "unlink {p}"),
            UOp::Write(p, pat) => write!(f, "write {p} {pat:?}"),
            UOp::Truncate(p, s) => write!(f, "truncate {p} {s}"),
            UOp::Rename(a, b) => write!(f, "rename {a} {b}"),
            UOp::Link(a, b) => write!(f, "link {a} {b}"),
            UOp::Symlink(p) => write!(f, "symlink {p}"),
        }
    }
}

/// Every operation of the given kinds over the name universe.
pub fn single_ops(opset: &[OpKind]) -> Vec<UOp> {
    let mut out = Vec::new();
    let pairs = || {
        FILES
            .iter()
            .flat_map(|a| FILES.iter().filter(move |b| *b != a).map(move |b| (*a, *b)))
    };
    for &k in OpKind::ALL.iter().filter(|k| opset.contains(k)) {
        match k {
            OpKind::Create => out.extend(FILES.map(UOp::Create)),
            OpKind::Mkdir => out.extend(DIRS.map(UOp::Mkdir)),
            OpKind::Rmdir => out.extend(DIRS.map(UOp::Rmdir)),
            OpKind::Unlink => out.extend(FILES.map(UOp::Unlink)),
            OpKind::Write => {
                out.extend(FILES.iter().flat_map(|p| [UOp::Write(p, Pat::P1), UOp::Write(p, Pat::P2)]))
            }
            OpKind::Truncate => out.extend(FILES.iter().flat_map(|p| [UOp::Truncate(p, 0), UOp::Truncate(p, 3000)])),
            OpKind::Rename => {
                out.extend(pairs().map(|(a, b)| UOp::Rename(a, b)));
                out.extend([UOp::Rename("A", "B"), UOp::Rename("B", "A")]);
            }
            OpKind::Link => out.extend(pairs().map(|(a, b)| UOp::Link(a, b))),
            OpKind::Symlink => out.extend(FILES.map(UOp::Symlink)),
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Workload {
    pub ops: [UOp; 2],
    /// Sync after each operation.
    pub sync: bool,
}

impl Workload {
    /// The workload as a runnable script, setup included.
    pub fn script(&self) -> String {
        let mut s = String::from(SETUP_SCRIPT);
        for op in &self.ops {
            for line in op.script().lines() {
                s.push_str(&format!("{PID} {line}\n"));
            }
            if self.sync {
                s.push_str(&format!("{PID} sync\n"));
            }
        }
        s
    }
}

impl fmt::Display for Workload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}; {}; sync {}",
            self.ops[0],
            self.ops[1],
            if self.sync { "on" } else { "off" }
        )
    }
}

const SETUP_SCRIPT: &str = "\
1 mkdir A
1 mkdir B
1 create A/foo f
1 write f pattern:1:6000 0
1 close f
1 sync
";

/// All ordered pairs of operations, with and without syncs.
pub fn universe(opset: &[OpKind]) -> Vec<Workload> {
    let ops = single_ops(opset);
    let mut out = Vec::with_capacity(ops.len() * ops.len() * 2);
    for sync in [false, true] {
        for a in &ops {
            for b in &ops {
                out.push(Workload {
                    ops: [a.clone(), b.clone()],
                    sync,
                });
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct CrashConfig {
    pub opset: Vec<OpKind>,
    /// Maximum number of workloads; `None` runs the whole universe.
    pub budget: Option<usize>,
    /// Also crash after every single write, and sample reorderings.
    pub stress: bool,
    /// Reordered crash states sampled per flush window in stress mode.
    pub samples_per_window: usize,
    pub seed: u64,
    /// When false, the file system runs without its journal (tester self-check).
    pub journal: bool,
    /// Where failing cases are written; `None` keeps them in memory only.
    pub artifacts: Option<PathBuf>,
    pub max_artifacts: usize,
}

impl Default for CrashConfig {
    fn default() -> Self {
        CrashConfig {
            opset: OpKind::ALL.to_vec(),
            budget: None,
            stress: false,
            samples_per_window: 4,
            seed: 0,
            journal: true,
            artifacts: None,
            max_artifacts: 20,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FailureKind {
    /// The recovered image would not mount.
    Mount,
    /// The offline checker reported violations.
    Fsck,
    /// The tree matches none of the per-operation states.
    Atomicity,
    /// A state made durable by a completed sync was lost.
    Durability,
    /// An operation's reply disagreed with the reference model.
    Reply,
}

impl fmt::Display for FailureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FailureKind::Mount => "mount",
            FailureKind::Fsck => "fsck",
            FailureKind::Atomicity => "atomicity",
            FailureKind::Durability => "durability",
            FailureKind::Reply => "reply",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug)]
pub struct CaseFailure {
    pub workload: Workload,
    pub kind: FailureKind,
    /// Length of the trace prefix the crash state was built from.
    pub crash_point: usize,
    pub trace_len: usize,
    pub detail: String,
}

impl fmt::Display for CaseFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "FAIL {} [{}] at {}/{}: {}",
            self.kind, self.workload, self.crash_point, self.trace_len, self.detail
        )
    }
}

#[derive(Clone, Debug, Default)]
pub struct CrashSummary {
    pub workloads: usize,
    pub crash_states: usize,
    pub failures: Vec<CaseFailure>,
    pub failing_workloads: usize,
    pub elapsed: Duration,
    pub artifacts_written: usize,
}

impl CrashSummary {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn count(&self, kind: FailureKind) -> usize {
        self.failures.iter().filter(|f| f.kind == kind).count()
    }
}

impl fmt::Display for CrashSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "crashtest workloads={} crash_states={} failures={} failing_workloads={} mount={} fsck={} atomicity={} durability={} reply={} elapsed_s={:.1}",
            self.workloads,
            self.crash_states,
            self.failures.len(),
            self.failing_workloads,
            self.count(FailureKind::Mount),
            self.count(FailureKind::Fsck),
            self.count(FailureKind::Atomicity),
            self.count(FailureKind::Durability),
            self.count(FailureKind::Reply),
            self.elapsed.as_secs_f64()
        )
    }
}

fn mount_opts(journal: bool) -> MountOptions {
    MountOptions {
        journal: JournalConfig {
            commit_idle: None,
            enabled: journal,
        },
        cache_capacity: 256,
        ..Default::default()
    }
}

fn setup_model() -> Model {
    let mut m = Model::default();
    m.mkdir("A").unwrap();
    m.mkdir("B").unwrap();
    m.create("A/foo").unwrap();
    m.write("A/foo", 0, &Pat::P1.data()).unwrap();
    m
}

/// The formatted and populated image every workload starts from.
pub fn base_image() -> MemImage {
    let dev = BlockDevice::memory(MemImage::zeroed(4096, DEVICE_BLOCKS), DeviceOptions::default())
        .expect("memory device");
    mkfs(
        &dev,
        &MkfsOptions {
            inode_count: Some(128),
            journal_len: 64,
        },
    )
    .expect("mkfs of the base image");
    {
        let fs = BentoFs::mount(Variant::Plain, dev.clone(), mount_opts(true)).expect("mount base image");
        let d = Direct(&fs);
        let ops = Ops::new(&d, 1);
        ops.mkdir(1, "A").unwrap();
        ops.mkdir(1, "B").unwrap();
        let a = ops.resolve("A").unwrap();
        let (e, o) = ops.create(a, "foo", O_RDWR).unwrap();
        ops.write_all(e.ino(), o.fh, 0, &Pat::P1.data()).unwrap();
        ops.release(e.ino(), o.fh).unwrap();
        ops.sync().unwrap();
    }
    dev.snapshot().expect("snapshot of the base image")
}

struct Recorded {
    trace: WriteTrace,
    states: [Tree; 3],
    /// Trace length after which state k or later is required.
    marks: [usize; 2],
    reply_failures: Vec<String>,
}

fn record(base: &MemImage, w: &Workload, journal: bool) -> Result<Recorded, String> {
    let dev = BlockDevice::memory(base.clone(), DeviceOptions::default()).map_err(|e| e.to_string())?;
    dev.start_trace(TraceMode::Full);
    let mut model = setup_model();
    let mut states = [model.tree(), Tree::default(), Tree::default()];
    let mut marks = [usize::MAX; 2];
    let mut reply_failures = Vec::new();
    let mut fs = BentoFs::mount(Variant::Plain, dev.clone(), mount_opts(journal)).map_err(|e| e.to_string())?;
    {
        let d = Direct(&fs);
        let ops = Ops::new(&d, PID);
        for (i, op) in w.ops.iter().enumerate() {
            let want = op.apply_model(&mut model);
            let got = op.apply_fs(&ops);
            if want != got {
                reply_failures.push(format!("{op}: file system {got:?}, model {want:?}"));
            }
            states[i + 1] = model.tree();
            if w.sync {
                ops.sync().map_err(|e| format!("sync: {e}"))?;
                marks[i] = dev.trace_len();
            }
        }
    }
    fs.unmount().map_err(|e| format!("unmount: {e}"))?;
    drop(fs);
    let trace = dev.take_trace();
    // A clean unmount makes everything durable.
    marks[1] = marks[1].min(trace.len());
    Ok(Recorded {
        trace,
        states,
        marks,
        reply_failures,
    })
}

fn check_state(img: MemImage, rec: &Recorded, prefix: usize, journal: bool) -> Result<(), (FailureKind, String)> {
    let dev = BlockDevice::memory(img, DeviceOptions::default()).map_err(|e| (FailureKind::Mount, e.to_string()))?;
    let mut fs = BentoFs::mount(Variant::Plain, dev.clone(), mount_opts(journal))
        .map_err(|e| (FailureKind::Mount, e.to_string()))?;
    let tree = {
        let d = Direct(&fs);
        observe(&Ops::new(&d, 1)).map_err(|e| (FailureKind::Mount, format!("reading the tree: {e}")))?
    };
    fs.unmount().map_err(|e| (FailureKind::Mount, format!("unmount: {e}")))?;
    drop(fs);
    let report = fsck(&dev).map_err(|e| (FailureKind::Fsck, e.to_string()))?;
    if !report.is_clean() {
        let first: Vec<String> = report.violations.iter().take(3).map(|v| v.to_string()).collect();
        return Err((FailureKind::Fsck, first.join("; ")));
    }
    let required = rec.marks.iter().filter(|&&m| prefix >= m).count();
    match rec.states.iter().position(|s| *s == tree) {
        None => Err((FailureKind::Atomicity, format!("tree matches no state: {tree}"))),
        Some(_) if rec.states[required..].contains(&tree) => Ok(()),
        Some(k) => Err((
            FailureKind::Durability,
            format!("tree is state {k} but state {required} was made durable: {tree}"),
        )),
    }
}

/// Crash states of one trace: prefix length plus writes applied beyond it.
fn crash_points(trace: &WriteTrace, stress: bool, samples: usize, rng: &mut StdRng) -> Vec<(usize, Vec<usize>)> {
    let flushes = trace.flush_indices();
    let mut out: Vec<(usize, Vec<usize>)> = if stress {
        (0..=trace.len()).map(|n| (n, Vec::new())).collect()
    } else {
        flushes.iter().map(|&i| (i + 1, Vec::new())).collect()
    };
    if stress {
        let mut start = 0;
        for end in flushes.iter().copied().chain(std::iter::once(trace.len())) {
            let window: Vec<usize> = (start..end).filter(|&i| !trace.events[i].is_flush()).collect();
            if window.len() > 1 {
                for _ in 0..samples {
                    let subset: Vec<usize> = window.iter().copied().filter(|_| rng.gen_bool(0.5)).collect();
                    out.push((start, subset));
                }
            }
            start = end + 1;
        }
    }
    out
}

struct WorkloadResult {
    states: usize,
    failures: Vec<CaseFailure>,
}

fn run_workload(base: &MemImage, w: &Workload, cfg: &CrashConfig, index: usize) -> WorkloadResult {
    let fail = |kind, crash_point, trace_len, detail: String| CaseFailure {
        workload: w.clone(),
        kind,
        crash_point,
        trace_len,
        detail,
    };
    let rec = match record(base, w, cfg.journal) {
        Ok(r) => r,
        Err(e) => {
            return WorkloadResult {
                states: 0,
                failures: vec![fail(FailureKind::Mount, 0, 0, format!("recording failed: {e}"))],
            }
        }
    };
    let n = rec.trace.len();
    let mut failures: Vec<CaseFailure> = rec
        .reply_failures
        .iter()
        .map(|d| fail(FailureKind::Reply, n, n, d.clone()))
        .collect();
    let mut rng = StdRng::seed_from_u64(cfg.seed ^ (index as u64).wrapping_mul(0x9E37_79B9));
    let points = crash_points(&rec.trace, cfg.stress, cfg.samples_per_window, &mut rng);
    for (prefix, extra) in &points {
        let img = match rec.trace.apply_with_subset(base, *prefix, extra) {
            Ok(i) => i,
            Err(e) => {
                failures.push(fail(FailureKind::Mount, *prefix, n, e.to_string()));
                continue;
            }
        };
        if let Err((kind, detail)) = check_state(img, &rec, *prefix, cfg.journal) {
            let detail = if extra.is_empty() {
                detail
            } else {
                format!("{detail} (plus writes {extra:?})")
            };
            failures.push(fail(kind, *prefix, n, detail));
        }
    }
    WorkloadResult {
        states: points.len(),
        failures,
    }
}

fn write_artifact(dir: &Path, n: usize, f: &CaseFailure) -> std::io::Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(format!("case-{n:04}.txt"));
    let mut s = String::new();
    s.push_str(&format!("# {f}\n"));
    s.push_str(&format!("# crash point {} of {} trace events\n", f.crash_point, f.trace_len));
    s.push_str(&f.workload.script());
    fs::write(&path, s)?;
    Ok(path)
}

/// Runs the tester. Workloads run in parallel, each on its own image copy.
pub fn run(cfg: &CrashConfig) -> CrashSummary {
    let started = Instant::now();
    let mut workloads = universe(&cfg.opset);
    if let Some(b) = cfg.budget {
        workloads.truncate(b);
    }
    if workloads.is_empty() {
        log::warn!("crashtest: no workloads to run (budget 0 or empty opset)");
        return CrashSummary {
            elapsed: started.elapsed(),
            ..Default::default()
        };
    }
    let base = base_image();
    let progress = AtomicUsize::new(0);
    let total = workloads.len();
    let results: Vec<WorkloadResult> = workloads
        .par_iter()
        .enumerate()
        .map(|(i, w)| {
            let r = run_workload(&base, w, cfg, i);
            let done = progress.fetch_add(1, Ordering::Relaxed) + 1;
            if done % 500 == 0 {
                log::info!("crashtest: {done}/{total} workloads");
            }
            r
        })
        .collect();
    let mut summary = CrashSummary {
        workloads: total,
        ..Default::default()
    };
    for r in results {
        summary.crash_states += r.states;
        if !r.failures.is_empty() {
            summary.failing_workloads += 1;
        }
        summary.failures.extend(r.failures);
    }
    if let Some(dir) = &cfg.artifacts {
        for (n, f) in summary.failures.iter().take(cfg.max_artifacts).enumerate() {
            match write_artifact(dir, n, f) {
                Ok(_) => summary.artifacts_written += 1,
                Err(e) => log::error!("cannot write artifact to {}: {e}", dir.display()),
            }
        }
    }
    summary.elapsed = started.elapsed();
    summary
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn universe_size() {
        let singles = single_ops(&OpKind::ALL);
        assert_eq!(singles.len(), 39);
        assert_eq!(universe(&OpKind::ALL).len(), 39 * 39 * 2);
        assert_eq!(universe(&[OpKind::Create, OpKind::Unlink]).len(), 6 * 6 * 2);
    }

    #[test]
    fn crash_points_are_flush_prefixes() {
        let base = base_image();
        let w = Workload {
            ops: [UOp::Create("A/bar"), UOp::Unlink("A/foo")],
            sync: true,
        };
        let rec = record(&base, &w, true).unwrap();
        let mut rng = StdRng::seed_from_u64(0);
        let points = crash_points(&rec.trace, false, 0, &mut rng);
        assert_eq!(points.len(), rec.trace.flush_indices().len());
        assert!(points.iter().all(|(p, _)| rec.trace.events[p - 1].is_flush()));
        let stress = crash_points(&rec.trace, true, 0, &mut rng);
        assert_eq!(stress.len(), rec.trace.len() + 1);
    }

    #[test]
    fn small_opset_passes() {
        let cfg = CrashConfig {
            opset: vec![OpKind::Create, OpKind::Unlink],
            ..Default::default()
        };
        let s = run(&cfg);
        assert_eq!(s.workloads, 72);
        assert!(s.passed(), "{s}\n{}", s.failures.iter().map(|f| f.to_string()).collect::<Vec<_>>().join("\n"));
    }

    #[test]
    fn zero_budget_runs_nothing() {
        let s = run(&CrashConfig {
            budget: Some(0),
            ..Default::default()
        });
        assert_eq!(s.workloads, 0);
        assert!(s.passed());
    }
}
