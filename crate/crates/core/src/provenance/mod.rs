//! Provenance records, the on-disk log format, and dependency inference.
//!
//! The log is a sequence of length-prefixed little-endian records:
//!
//! ```text
//! u32 len | u64 seq | u8 kind | u32 pid | u32 uid | u32 gid | u32 flags
//! u8 rw_mode | u8 deleted | u64 fh | u32 ino | u32 parent | u32 newparent
//! u16 name_len | name | u16 newname_len | newname | u32 fnv1a32(all before)
//! ```
//!
//! `len` counts the whole record including itself and the checksum.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use thiserror::Error;

use crate::fsapi::{O_ACCMODE, O_RDONLY, O_RDWR, O_WRONLY};
use crate::hash::fnv1a32;

const FIXED_LEN: usize = 4 + 8 + 1 + 4 * 4 + 1 + 1 + 8 + 3 * 4 + 2 + 2 + 4;
/// Largest record: both names at the maximum name length.
pub const MAX_RECORD_LEN: usize = FIXED_LEN + 2 * 255;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ProvKind {
    Create,
    Rename,
    Symlink,
    Unlink,
    Open,
    Close,
}

impl ProvKind {
    fn code(self) -> u8 {
        match self {
            ProvKind::Create => 1,
            ProvKind::Rename => 2,
            ProvKind::Symlink => 3,
            ProvKind::Unlink => 4,
            ProvKind::Open => 5,
            ProvKind::Close => 6,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            1 => ProvKind::Create,
            2 => ProvKind::Rename,
            3 => ProvKind::Symlink,
            4 => ProvKind::Unlink,
            5 => ProvKind::Open,
            6 => ProvKind::Close,
            _ => return None,
        })
    }

    pub fn label(self) -> &'static str {
        match self {
            ProvKind::Create => "CREATE",
            ProvKind::Rename => "RENAME",
            ProvKind::Symlink => "SYMLINK",
            ProvKind::Unlink => "UNLINK",
            ProvKind::Open => "OPEN",
            ProvKind::Close => "CLOSE",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RwMode {
    Read,
    Write,
    ReadWrite,
}

impl RwMode {
    pub fn from_flags(flags: u32) -> RwMode {
        match flags & O_ACCMODE {
            O_RDONLY => RwMode::Read,
            O_WRONLY => RwMode::Write,
            O_RDWR => RwMode::ReadWrite,
            _ => RwMode::ReadWrite,
        }
    }

    pub fn readable(self) -> bool {
        matches!(self, RwMode::Read | RwMode::ReadWrite)
    }

    pub fn writable(self) -> bool {
        matches!(self, RwMode::Write | RwMode::ReadWrite)
    }

    fn code(m: Option<RwMode>) -> u8 {
        match m {
            None => 0,
            Some(RwMode::Read) => 1,
            Some(RwMode::Write) => 2,
            Some(RwMode::ReadWrite) => 3,
        }
    }

    fn from_code(c: u8) -> Option<Option<RwMode>> {
        Some(match c {
            0 => None,
            1 => Some(RwMode::Read),
            2 => Some(RwMode::Write),
            3 => Some(RwMode::ReadWrite),
            _ => return None,
        })
    }

    pub fn label(self) -> &'static str {
        match self {
            RwMode::Read => "R",
            RwMode::Write => "W",
            RwMode::ReadWrite => "RW",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProvRecord {
    pub seq: u64,
    pub kind: ProvKind,
    pub pid: u32,
    pub uid: u32,
    pub gid: u32,
    pub flags: u32,
    pub rw_mode: Option<RwMode>,
    pub deleted: bool,
    pub fh: u64,
    pub ino: u64,
    pub parent: u64,
    pub newparent: u64,
    pub name: String,
    pub newname: String,
}

impl ProvRecord {
    /// A record with everything but the kind, pid and target inode zeroed.
    pub fn new(kind: ProvKind, pid: u32, ino: u64) -> Self {
        ProvRecord {
            seq: 0,
            kind,
            pid,
            uid: 0,
            gid: 0,
            flags: 0,
            rw_mode: None,
            deleted: false,
            fh: 0,
            ino,
            parent: 0,
            newparent: 0,
            name: String::new(),
            newname: String::new(),
        }
    }

    pub fn encoded_len(&self) -> usize {
        FIXED_LEN + self.name.len() + self.newname.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(self.encoded_len());
        b.extend_from_slice(&(self.encoded_len() as u32).to_le_bytes());
        b.extend_from_slice(&self.seq.to_le_bytes());
        b.push(self.kind.code());
        for v in [self.pid, self.uid, self.gid, self.flags] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.push(RwMode::code(self.rw_mode));
        b.push(u8::from(self.deleted));
        b.extend_from_slice(&self.fh.to_le_bytes());
        for v in [self.ino, self.parent, self.newparent] {
            b.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for s in [&self.name, &self.newname] {
            b.extend_from_slice(&(s.len() as u16).to_le_bytes());
            b.extend_from_slice(s.as_bytes());
        }
        let sum = fnv1a32(&b);
        b.extend_from_slice(&sum.to_le_bytes());
        debug_assert_eq!(b.len(), self.encoded_len());
        b
    }
}

impl fmt::Display for ProvRecord {
    /// `SEQ KIND PID INO [PARENT NAME] [MODE] [DELETED]`
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} {}", self.seq, self.kind.label(), self.pid, self.ino)?;
        match self.kind {
            ProvKind::Create | ProvKind::Symlink => write!(f, " {} {}", self.parent, self.name),
            ProvKind::Rename => write!(
                f,
                " {} {} {} {}",
                self.parent, self.name, self.newparent, self.newname
            ),
            ProvKind::Unlink => write!(f, " {} {} {}", self.parent, self.name, u8::from(self.deleted)),
            ProvKind::Open => write!(f, " {}", self.rw_mode.map_or("-", RwMode::label)),
            ProvKind::Close => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum ProvError {
    #[error("corrupt provenance record at byte {offset}: {reason}")]
    CorruptRecord { offset: usize, reason: String },
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParsedLog {
    pub records: Vec<ProvRecord>,
    /// Incomplete records dropped from the end of the log.
    pub truncated: usize,
}

struct Cursor<'a> {
    b: &'a [u8],
    off: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> &[u8] {
        let s = &self.b[self.off..self.off + n];
        self.off += n;
        s
    }
    fn u8(&mut self) -> u8 {
        self.take(1)[0]
    }
    fn u16(&mut self) -> u16 {
        u16::from_le_bytes(self.take(2).try_into().unwrap())
    }
    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take(4).try_into().unwrap())
    }
    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.take(8).try_into().unwrap())
    }
}

/// Parses a whole log. A record cut short by the end of the log is dropped
/// and counted; damage anywhere else is an error.
pub fn prov_parse(log: &[u8]) -> Result<ParsedLog, ProvError> {
    let mut out = ParsedLog::default();
    let mut off = 0;
    let mut last_seq = None;
    while off < log.len() {
        let corrupt = |reason: &str| ProvError::CorruptRecord {
            offset: off,
            reason: reason.to_string(),
        };
        if log.len() - off < 4 {
            out.truncated += 1;
            log::warn!("dropping {} trailing bytes of provenance log", log.len() - off);
            break;
        }
        let len = u32::from_le_bytes(log[off..off + 4].try_into().unwrap()) as usize;
        if !(FIXED_LEN..=MAX_RECORD_LEN).contains(&len) {
            return Err(corrupt(&format!("bad record length {len}")));
        }
        if off + len > log.len() {
            out.truncated += 1;
            log::warn!("dropping truncated provenance record at byte {off}");
            break;
        }
        let rec = &log[off..off + len];
        let sum = u32::from_le_bytes(rec[len - 4..].try_into().unwrap());
        if fnv1a32(&rec[..len - 4]) != sum {
            return Err(corrupt("checksum mismatch"));
        }
        let mut c = Cursor { b: rec, off: 4 };
        let seq = c.u64();
        let kind = ProvKind::from_code(c.u8()).ok_or_else(|| corrupt("unknown kind"))?;
        let (pid, uid, gid, flags) = (c.u32(), c.u32(), c.u32(), c.u32());
        let rw_mode = RwMode::from_code(c.u8()).ok_or_else(|| corrupt("bad rw mode"))?;
        let deleted = c.u8() != 0;
        let fh = c.u64();
        let (ino, parent, newparent) = (u64::from(c.u32()), u64::from(c.u32()), u64::from(c.u32()));
        let mut names = Vec::new();
        for _ in 0..2 {
            let n = c.u16() as usize;
            if c.off + n > len - 4 {
                return Err(corrupt("name overruns record"));
            }
            let s = String::from_utf8(c.take(n).to_vec()).map_err(|_| corrupt("name is not UTF-8"))?;
            names.push(s);
        }
        if c.off != len - 4 {
            return Err(corrupt("record length does not match contents"));
        }
        if last_seq.is_some_and(|l| seq <= l) {
            return Err(corrupt("sequence numbers not increasing"));
        }
        last_seq = Some(seq);
        let newname = names.pop().unwrap();
        let name = names.pop().unwrap();
        out.records.push(ProvRecord {
            seq,
            kind,
            pid,
            uid,
            gid,
            flags,
            rw_mode,
            deleted,
            fh,
            ino,
            parent,
            newparent,
            name,
            newname,
        });
        off += len;
    }
    Ok(out)
}

/// Dependency of writer file `to` on reader file `from`, observed while
/// process `pid` held both open during sequence numbers `interval`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Edge {
    pub from: u64,
    pub to: u64,
    pub pid: u32,
    pub interval: (u64, u64),
}

impl fmt::Display for Edge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} -> {} ({})", self.from, self.to, self.pid)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DependencyGraph {
    pub nodes: BTreeSet<u64>,
    pub edges: Vec<Edge>,
    /// Sequence numbers of Close records with no matching Open.
    pub unmatched_closes: Vec<u64>,
}

impl DependencyGraph {
    pub fn edge_pairs(&self) -> BTreeSet<(u64, u64)> {
        self.edges.iter().map(|e| (e.from, e.to)).collect()
    }

    /// All pairs `(a, b)` with a path from `a` to `b`.
    pub fn transitive_closure(&self) -> BTreeSet<(u64, u64)> {
        let mut adj: BTreeMap<u64, BTreeSet<u64>> = BTreeMap::new();
        for (a, b) in self.edge_pairs() {
            adj.entry(a).or_default().insert(b);
        }
        let mut out = BTreeSet::new();
        for &start in adj.keys() {
            let mut stack = vec![start];
            let mut seen = BTreeSet::new();
            while let Some(n) = stack.pop() {
                for &m in adj.get(&n).into_iter().flatten() {
                    if seen.insert(m) {
                        out.insert((start, m));
                        stack.push(m);
                    }
                }
            }
        }
        out
    }
}

struct Interval {
    ino: u64,
    mode: RwMode,
    start: u64,
    end: u64,
}

/// Infers read-to-write dependencies: within one process, every file open
/// for reading while another file is open for writing becomes an edge.
pub fn prov_infer(records: &[ProvRecord]) -> DependencyGraph {
    let mut g = DependencyGraph::default();
    let last_seq = records.last().map_or(0, |r| r.seq);
    let mut open: HashMap<(u32, u64, u64), (u64, RwMode)> = HashMap::new();
    let mut closed: BTreeMap<u32, Vec<Interval>> = BTreeMap::new();
    for r in records {
        match r.kind {
            ProvKind::Open => {
                g.nodes.insert(r.ino);
                let mode = r.rw_mode.unwrap_or_else(|| RwMode::from_flags(r.flags));
                open.insert((r.pid, r.ino, r.fh), (r.seq, mode));
            }
            ProvKind::Close => match open.remove(&(r.pid, r.ino, r.fh)) {
                Some((start, mode)) => closed.entry(r.pid).or_default().push(Interval {
                    ino: r.ino,
                    mode,
                    start,
                    end: r.seq,
                }),
                None => {
                    log::warn!("close at seq {} (pid {}, ino {}) has no open", r.seq, r.pid, r.ino);
                    g.unmatched_closes.push(r.seq);
                }
            },
            ProvKind::Create | ProvKind::Symlink => {
                g.nodes.insert(r.ino);
            }
            ProvKind::Rename | ProvKind::Unlink => {}
        }
    }
    // Opens never closed last until the end of the log.
    let mut dangling: Vec<_> = open.into_iter().collect();
    dangling.sort_by_key(|((_, _, _), (start, _))| *start);
    for ((pid, ino, _), (start, mode)) in dangling {
        closed.entry(pid).or_default().push(Interval {
            ino,
            mode,
            start,
            end: last_seq,
        });
    }
    let mut seen = BTreeSet::new();
    for (pid, ivs) in &closed {
        for r in ivs.iter().filter(|i| i.mode.readable()) {
            for w in ivs.iter().filter(|i| i.mode.writable()) {
                if r.ino == w.ino || r.start > w.end || w.start > r.end {
                    continue;
                }
                if seen.insert((r.ino, w.ino, *pid)) {
                    g.edges.push(Edge {
                        from: r.ino,
                        to: w.ino,
                        pid: *pid,
                        interval: (r.start.max(w.start), r.end.min(w.end)),
                    });
                }
            }
        }
    }
    g.edges.sort_by_key(|e| (e.interval.0, e.from, e.to, e.pid));
    g
}
