//! Line-based workload scripts.
//!
//! One step per line: `[Tn] PID OP ARGS...`. `Tn` names the thread the step
//! runs on (default `T0`); steps of one thread run in order, threads run
//! concurrently. `#` starts a comment.
//!
//! | op | args |
//! |---|---|
//! | `mkdir`, `rmdir`, `unlink`, `stat`, `readdir` | PATH |
//! | `create` | PATH [HANDLE] |
//! | `open` | PATH r\|w\|rw [HANDLE] |
//! | `write` | HANDLE DATA [OFFSET] |
//! | `read` | HANDLE [LEN] [OFFSET] |
//! | `fsync`, `close` | HANDLE |
//! | `rename`, `link` | SRC DST |
//! | `symlink` | TARGET PATH |
//! | `truncate` | PATH SIZE |
//! | `sync` | |
//!
//! A handle defaults to the path it was opened with. DATA is a quoted
//! string (`\n`, `\t`, `\\`, `\"`, `\xHH` escapes) or `pattern:SEED:LEN`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::thread;

use thiserror::Error;

use bentoframe_core::fsapi::*;
use bentoframe_core::Errno;

use crate::fsops::{Driver, Ops};

#[derive(Debug, Error, PartialEq, Eq)]
#[error("line {line}: {msg}")]
pub struct ScriptError {
    pub line: usize,
    pub msg: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Action {
    Mkdir(String),
    Rmdir(String),
    Unlink(String),
    Stat(String),
    Readdir(String),
    Create { path: String, handle: String },
    Open { path: String, flags: u32, handle: String },
    Write { handle: String, data: Vec<u8>, offset: u64 },
    Read { handle: String, len: u32, offset: u64 },
    Fsync(String),
    Close(String),
    Rename(String, String),
    Link(String, String),
    Symlink { target: String, path: String },
    Truncate { path: String, size: u64 },
    Sync,
}

impl Action {
    pub fn name(&self) -> &'static str {
        match self {
            Action::Mkdir(_) => "mkdir",
            Action::Rmdir(_) => "rmdir",
            Action::Unlink(_) => "unlink",
            Action::Stat(_) => "stat",
            Action::Readdir(_) => "readdir",
            Action::Create { .. } => "create",
            Action::Open { .. } => "open",
            Action::Write { .. } => "write",
            Action::Read { .. } => "read",
            Action::Fsync(_) => "fsync",
            Action::Close(_) => "close",
            Action::Rename(..) => "rename",
            Action::Link(..) => "link",
            Action::Symlink { .. } => "symlink",
            Action::Truncate { .. } => "truncate",
            Action::Sync => "sync",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Step {
    pub line: usize,
    pub thread: u32,
    pub pid: u32,
    pub action: Action,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Script {
    pub steps: Vec<Step>,
}

fn tokenize(line: &str, lineno: usize) -> Result<Vec<String>, ScriptError> {
    let err = |msg: &str| ScriptError {
        line: lineno,
        msg: msg.to_string(),
    };
    let mut out = Vec::new();
    let mut chars = line.chars().peekable();
    while let Some(&c) = chars.peek() {
        if c.is_whitespace() {
            chars.next();
            continue;
        }
        if c == '#' {
            break;
        }
        let mut tok = String::new();
        if c == '"' {
            chars.next();
            // Keep quoted tokens distinguishable by their leading quote.
            tok.push('"');
            loop {
                match chars.next() {
                    None => return Err(err("unterminated string")),
                    Some('"') => break,
                    Some('\\') => match chars.next() {
                        Some('n') => tok.push('\n'),
                        Some('t') => tok.push('\t'),
                        Some('\\') => tok.push('\\'),
                        Some('"') => tok.push('"'),
                        Some('x') => {
                            let h: String = chars.by_ref().take(2).collect();
                            let v = u8::from_str_radix(&h, 16).map_err(|_| err("bad \\x escape"))?;
                            tok.push(char::from(v));
                        }
                        _ => return Err(err("bad escape")),
                    },
                    Some(c) => tok.push(c),
                }
            }
        } else {
            while let Some(&c) = chars.peek() {
                if c.is_whitespace() {
                    break;
                }
                tok.push(c);
                chars.next();
            }
        }
        out.push(tok);
    }
    Ok(out)
}

fn parse_data(tok: &str, line: usize) -> Result<Vec<u8>, ScriptError> {
    if let Some(s) = tok.strip_prefix('"') {
        // Escapes produced chars below 256; map them back to bytes.
        return Ok(s
            .chars()
            .flat_map(|c| {
                if (c as u32) < 256 {
                    vec![c as u32 as u8]
                } else {
                    c.to_string().into_bytes()
                }
            })
            .collect());
    }
    if let Some(rest) = tok.strip_prefix("pattern:") {
        let mut it = rest.split(':');
        if let (Some(seed), Some(len), None) = (it.next(), it.next(), it.next()) {
            if let (Ok(seed), Ok(len)) = (seed.parse::<u64>(), parse_size(len)) {
                return Ok(crate::fsops::pattern(len as usize, seed));
            }
        }
        return Err(ScriptError {
            line,
            msg: format!("bad pattern {tok:?}, expected pattern:SEED:LEN"),
        });
    }
    Err(ScriptError {
        line,
        msg: format!("data must be a quoted string or pattern:SEED:LEN, got {tok:?}"),
    })
}

/// Parses `4096`, `16K`, `5M`, `64MiB`, `1G` (binary units).
pub fn parse_size(s: &str) -> Result<u64, String> {
    let t = s.trim();
    let t = t.strip_suffix('B').unwrap_or(t);
    let t = t.strip_suffix('i').unwrap_or(t);
    let (num, mul) = match t.as_bytes().last() {
        Some(b'K' | b'k') => (&t[..t.len() - 1], 1u64 << 10),
        Some(b'M' | b'm') => (&t[..t.len() - 1], 1 << 20),
        Some(b'G' | b'g') => (&t[..t.len() - 1], 1 << 30),
        _ => (t, 1),
    };
    num.parse::<u64>()
        .ok()
        .and_then(|n| n.checked_mul(mul))
        .ok_or_else(|| format!("bad size {s:?}"))
}

fn num<T: std::str::FromStr>(tok: &str, line: usize, what: &str) -> Result<T, ScriptError> {
    tok.parse().map_err(|_| ScriptError {
        line,
        msg: format!("bad {what} {tok:?}"),
    })
}

impl Script {
    /// Parses and validates a script. Handles must be opened on the same
    /// thread before use and not reused while open.
    pub fn parse(text: &str) -> Result<Script, ScriptError> {
        let mut steps = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let toks = tokenize(raw, line)?;
            if toks.is_empty() {
                continue;
            }
            let err = |msg: String| ScriptError { line, msg };
            let mut t = toks.as_slice();
            let mut thread = 0;
            if let Some(n) = t[0].strip_prefix('T').and_then(|n| n.parse::<u32>().ok()) {
                thread = n;
                t = &t[1..];
            }
            let [pid, op, args @ ..] = t else {
                return Err(err("expected PID OP ARGS...".into()));
            };
            let pid: u32 = num(pid, line, "pid")?;
            let arity = |lo: usize, hi: usize| {
                if args.len() < lo || args.len() > hi {
                    Err(err(format!("{op} takes {lo}..={hi} arguments, got {}", args.len())))
                } else {
                    Ok(())
                }
            };
            let a = |i: usize| args[i].trim_start_matches('"').to_string();
            let action = match op.as_str() {
                "mkdir" | "rmdir" | "unlink" | "stat" | "readdir" => {
                    arity(1, 1)?;
                    match op.as_str() {
                        "mkdir" => Action::Mkdir(a(0)),
                        "rmdir" => Action::Rmdir(a(0)),
                        "unlink" => Action::Unlink(a(0)),
                        "stat" => Action::Stat(a(0)),
                        _ => Action::Readdir(a(0)),
                    }
                }
                "create" => {
                    arity(1, 2)?;
                    Action::Create {
                        path: a(0),
                        handle: if args.len() > 1 { a(1) } else { a(0) },
                    }
                }
                "open" => {
                    arity(2, 3)?;
                    let flags = match args[1].as_str() {
                        "r" => O_RDONLY,
                        "w" => O_WRONLY,
                        "rw" => O_RDWR,
                        m => return Err(err(format!("bad open mode {m:?}, expected r, w or rw"))),
                    };
                    Action::Open {
                        path: a(0),
                        flags,
                        handle: if args.len() > 2 { a(2) } else { a(0) },
                    }
                }
                "write" => {
                    arity(2, 3)?;
                    Action::Write {
                        handle: a(0),
                        data: parse_data(&args[1], line)?,
                        offset: if args.len() > 2 { num(&args[2], line, "offset")? } else { 0 },
                    }
                }
                "read" => {
                    arity(1, 3)?;
                    Action::Read {
                        handle: a(0),
                        len: if args.len() > 1 { parse_size(&args[1]).map_err(err)? as u32 } else { 4096 },
                        offset: if args.len() > 2 { num(&args[2], line, "offset")? } else { 0 },
                    }
                }
                "fsync" => {
                    arity(1, 1)?;
                    Action::Fsync(a(0))
                }
                "close" => {
                    arity(1, 1)?;
                    Action::Close(a(0))
                }
                "rename" => {
                    arity(2, 2)?;
                    Action::Rename(a(0), a(1))
                }
                "link" => {
                    arity(2, 2)?;
                    Action::Link(a(0), a(1))
                }
                "symlink" => {
                    arity(2, 2)?;
                    Action::Symlink {
                        target: a(0),
                        path: a(1),
                    }
                }
                "truncate" => {
                    arity(2, 2)?;
                    Action::Truncate {
                        path: a(0),
                        size: parse_size(&args[1]).map_err(err)?,
                    }
                }
                "sync" => {
                    arity(0, 0)?;
                    Action::Sync
                }
                other => return Err(err(format!("unknown operation {other:?}"))),
            };
            steps.push(Step {
                line,
                thread,
                pid,
                action,
            });
        }
        let s = Script { steps };
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<(), ScriptError> {
        let mut open: HashSet<(u32, String)> = HashSet::new();
        for st in &self.steps {
            let err = |msg: String| ScriptError { line: st.line, msg };
            match &st.action {
                Action::Create { handle, .. } | Action::Open { handle, .. } => {
                    if !open.insert((st.thread, handle.clone())) {
                        return Err(err(format!("handle {handle:?} is already open")));
                    }
                }
                Action::Write { handle, .. } | Action::Read { handle, .. } | Action::Fsync(handle) => {
                    if !open.contains(&(st.thread, handle.clone())) {
                        return Err(err(format!("undefined handle {handle:?}")));
                    }
                }
                Action::Close(handle) => {
                    if !open.remove(&(st.thread, handle.clone())) {
                        return Err(err(format!("undefined handle {handle:?}")));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn threads(&self) -> Vec<u32> {
        let mut t: Vec<u32> = self.steps.iter().map(|s| s.thread).collect();
        t.sort_unstable();
        t.dedup();
        t
    }
}

/// What a step produced.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Outcome {
    Ok,
    Ino(u64),
    Written(u32),
    Data(Vec<u8>),
    Attr { ino: u64, kind: FileKind, size: u64, nlink: u32 },
    Names(Vec<String>),
    Err(Errno),
}

fn escape(data: &[u8]) -> String {
    let mut s = String::new();
    for &b in data.iter().take(64) {
        match b {
            b'"' => s.push_str("\\\""),
            b'\\' => s.push_str("\\\\"),
            b'\n' => s.push_str("\\n"),
            0x20..=0x7e => s.push(b as char),
            _ => s.push_str(&format!("\\x{b:02x}")),
        }
    }
    if data.len() > 64 {
        s.push_str("...");
    }
    s
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Outcome::Ok => write!(f, "ok"),
            Outcome::Ino(i) => write!(f, "ino {i}"),
            Outcome::Written(n) => write!(f, "written {n}"),
            Outcome::Data(d) => write!(f, "data {} \"{}\"", d.len(), escape(d)),
            Outcome::Attr { ino, kind, size, nlink } => {
                write!(f, "attr ino {ino} kind {kind:?} size {size} nlink {nlink}")
            }
            Outcome::Names(n) => write!(f, "names {}", n.join(",")),
            Outcome::Err(e) => write!(f, "err {}", e.name()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepResult {
    pub line: usize,
    pub thread: u32,
    pub pid: u32,
    pub op: &'static str,
    pub outcome: Outcome,
}

impl fmt::Display for StepResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} T{} {} {} -> {}", self.line, self.thread, self.pid, self.op, self.outcome)
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunResult {
    /// In line order.
    pub steps: Vec<StepResult>,
    /// Set in strict mode when an error reply stopped the run.
    pub aborted: Option<(usize, Errno)>,
}

impl RunResult {
    pub fn errors(&self) -> usize {
        self.steps.iter().filter(|s| matches!(s.outcome, Outcome::Err(_))).count()
    }
}

fn exec_step<D: Driver + ?Sized>(d: &D, st: &Step, handles: &mut HashMap<String, (u64, u64)>) -> Outcome {
    let ops = Ops::new(d, st.pid);
    let r: Result<Outcome, Errno> = (|| match &st.action {
        Action::Mkdir(p) => {
            let (parent, name) = ops.resolve_parent(p)?;
            Ok(Outcome::Ino(ops.mkdir(parent, name)?.ino()))
        }
        Action::Rmdir(p) => {
            let (parent, name) = ops.resolve_parent(p)?;
            ops.rmdir(parent, name).map(|_| Outcome::Ok)
        }
        Action::Unlink(p) => {
            let (parent, name) = ops.resolve_parent(p)?;
            ops.unlink(parent, name).map(|_| Outcome::Ok)
        }
        Action::Stat(p) => {
            let a = ops.getattr(ops.resolve(p)?)?;
            Ok(Outcome::Attr {
                ino: a.ino,
                kind: a.kind,
                size: a.size,
                nlink: a.nlink,
            })
        }
        Action::Readdir(p) => {
            let mut names: Vec<String> = ops.list(ops.resolve(p)?)?.into_iter().map(|e| e.name).collect();
            names.sort();
            Ok(Outcome::Names(names))
        }
        Action::Create { path, handle } => {
            let (parent, name) = ops.resolve_parent(path)?;
            let (e, o) = ops.create(parent, name, O_RDWR | O_CREAT)?;
            handles.insert(handle.clone(), (e.ino(), o.fh));
            Ok(Outcome::Ino(e.ino()))
        }
        Action::Open { path, flags, handle } => {
            let ino = ops.resolve(path)?;
            let o = ops.open(ino, *flags)?;
            handles.insert(handle.clone(), (ino, o.fh));
            Ok(Outcome::Ino(ino))
        }
        Action::Write { handle, data, offset } => {
            let (ino, fh) = *handles.get(handle).ok_or(Errno::EBADF)?;
            Ok(Outcome::Written(ops.write(ino, fh, *offset, data)?))
        }
        Action::Read { handle, len, offset } => {
            let (ino, fh) = *handles.get(handle).ok_or(Errno::EBADF)?;
            Ok(Outcome::Data(ops.read(ino, fh, *offset, *len)?))
        }
        Action::Fsync(handle) => {
            let (ino, fh) = *handles.get(handle).ok_or(Errno::EBADF)?;
            ops.fsync(ino, fh).map(|_| Outcome::Ok)
        }
        Action::Close(handle) => {
            let (ino, fh) = handles.remove(handle).ok_or(Errno::EBADF)?;
            ops.release(ino, fh).map(|_| Outcome::Ok)
        }
        Action::Rename(a, b) => {
            let (pa, na) = ops.resolve_parent(a)?;
            let (pb, nb) = ops.resolve_parent(b)?;
            ops.rename(pa, na, pb, nb).map(|_| Outcome::Ok)
        }
        Action::Link(a, b) => {
            let ino = ops.resolve(a)?;
            let (pb, nb) = ops.resolve_parent(b)?;
            Ok(Outcome::Ino(ops.link(ino, pb, nb)?.ino()))
        }
        Action::Symlink { target, path } => {
            let (parent, name) = ops.resolve_parent(path)?;
            Ok(Outcome::Ino(ops.symlink(parent, name, target)?.ino()))
        }
        Action::Truncate { path, size } => {
            let ino = ops.resolve(path)?;
            ops.setattr(
                ino,
                SetAttr {
                    size: Some(*size),
                    ..Default::default()
                },
            )
            .map(|_| Outcome::Ok)
        }
        Action::Sync => ops.sync().map(|_| Outcome::Ok),
    })();
    r.unwrap_or_else(Outcome::Err)
}

/// Runs a script, one OS thread per script thread. In strict mode the first
/// error reply stops every thread.
pub fn run<D: Driver + ?Sized>(d: &D, script: &Script, strict: bool) -> RunResult {
    let mut by_thread: BTreeMap<u32, Vec<&Step>> = BTreeMap::new();
    for st in &script.steps {
        by_thread.entry(st.thread).or_default().push(st);
    }
    let stop = AtomicBool::new(false);
    let mut steps: Vec<StepResult> = thread::scope(|s| {
        let workers: Vec<_> = by_thread
            .values()
            .map(|list| {
                let stop = &stop;
                s.spawn(move || {
                    let mut handles = HashMap::new();
                    let mut out = Vec::new();
                    for st in list {
                        if stop.load(Ordering::Relaxed) {
                            break;
                        }
                        let outcome = exec_step(d, st, &mut handles);
                        if strict && matches!(outcome, Outcome::Err(_)) {
                            stop.store(true, Ordering::Relaxed);
                        }
                        out.push(StepResult {
                            line: st.line,
                            thread: st.thread,
                            pid: st.pid,
                            op: st.action.name(),
                            outcome,
                        });
                    }
                    // Leave nothing open behind.
                    let ops = Ops::new(d, 0);
                    for (ino, fh) in handles.into_values() {
                        let _ = ops.release(ino, fh);
                    }
                    out
                })
            })
            .collect();
        workers.into_iter().flat_map(|w| w.join().expect("script thread panicked")).collect()
    });
    steps.sort_by_key(|s| s.line);
    let aborted = if strict {
        steps.iter().find_map(|s| match s.outcome {
            Outcome::Err(e) => Some((s.line, e)),
            _ => None,
        })
    } else {
        None
    };
    RunResult { steps, aborted }
}
