//! Path-level helpers over the request interface.

use bentoframe_core::fsapi::*;
use bentoframe_core::Errno;

/// Something that answers requests: a live connection or a bare instance.
pub trait Driver: Sync {
    fn call(&self, pid: u32, op: FsOp) -> FsReply;
}

impl Driver for Connection {
    fn call(&self, pid: u32, op: FsOp) -> FsReply {
        self.dispatch(&self.request(0, 0, pid, op))
    }
}

/// Calls an instance directly, with no gate in between.
pub struct Direct<'a>(pub &'a dyn FileSystem);

impl Driver for Direct<'_> {
    fn call(&self, pid: u32, op: FsOp) -> FsReply {
        run_op(self.0, &RequestContext::root(pid), &op)
    }
}

pub const ROOT: u64 = 1;

fn unexpected(op: &str, r: FsReply) -> Errno {
    match r {
        FsReply::Err(e) => e,
        other => {
            log::error!("{op}: unexpected reply {other:?}");
            Errno::EIO
        }
    }
}

/// Typed wrappers for one caller pid.
pub struct Ops<'d, D: Driver + ?Sized> {
    pub d: &'d D,
    pub pid: u32,
}

impl<'d, D: Driver + ?Sized> Ops<'d, D> {
    pub fn new(d: &'d D, pid: u32) -> Self {
        Ops { d, pid }
    }

    pub fn lookup(&self, parent: u64, name: &str) -> Result<Entry, Errno> {
        match self.d.call(self.pid, FsOp::Lookup { parent, name: name.into() }) {
            FsReply::Entry(e) => Ok(e),
            r => Err(unexpected("lookup", r)),
        }
    }

    /// Walks `path` from the root without following symlinks.
    pub fn resolve(&self, path: &str) -> Result<u64, Errno> {
        let mut ino = ROOT;
        for c in components(path) {
            ino = self.lookup(ino, c)?.ino();
        }
        Ok(ino)
    }

    /// Parent inode and final component of `path`.
    pub fn resolve_parent<'p>(&self, path: &'p str) -> Result<(u64, &'p str), Errno> {
        let parts = components(path);
        let Some((name, dirs)) = parts.split_last() else {
            return Err(Errno::EINVAL);
        };
        let mut ino = ROOT;
        for c in dirs {
            ino = self.lookup(ino, c)?.ino();
        }
        Ok((ino, name))
    }

    pub fn getattr(&self, ino: u64) -> Result<FileAttr, Errno> {
        match self.d.call(self.pid, FsOp::Getattr { ino }) {
            FsReply::Attr { attr, .. } => Ok(attr),
            r => Err(unexpected("getattr", r)),
        }
    }

    pub fn setattr(&self, ino: u64, attr: SetAttr) -> Result<FileAttr, Errno> {
        match self.d.call(self.pid, FsOp::Setattr { ino, fh: None, attr }) {
            FsReply::Attr { attr, .. } => Ok(attr),
            r => Err(unexpected("setattr", r)),
        }
    }

    pub fn mkdir(&self, parent: u64, name: &str) -> Result<Entry, Errno> {
        match self.d.call(self.pid, FsOp::Mkdir { parent, name: name.into(), mode: 0o755 }) {
            FsReply::Entry(e) => Ok(e),
            r => Err(unexpected("mkdir", r)),
        }
    }

    pub fn create(&self, parent: u64, name: &str, flags: u32) -> Result<(Entry, Opened), Errno> {
        let op = FsOp::Create { parent, name: name.into(), mode: S_IFREG | 0o644, flags };
        match self.d.call(self.pid, op) {
            FsReply::Created(e, o) => Ok((e, o)),
            r => Err(unexpected("create", r)),
        }
    }

    pub fn symlink(&self, parent: u64, name: &str, link: &str) -> Result<Entry, Errno> {
        match self.d.call(self.pid, FsOp::Symlink { parent, name: name.into(), link: link.into() }) {
            FsReply::Entry(e) => Ok(e),
            r => Err(unexpected("symlink", r)),
        }
    }

    pub fn link(&self, ino: u64, newparent: u64, newname: &str) -> Result<Entry, Errno> {
        match self.d.call(self.pid, FsOp::Link { ino, newparent, newname: newname.into() }) {
            FsReply::Entry(e) => Ok(e),
            r => Err(unexpected("link", r)),
        }
    }

    pub fn readlink(&self, ino: u64) -> Result<Vec<u8>, Errno> {
        match self.d.call(self.pid, FsOp::Readlink { ino }) {
            FsReply::Data(d) => Ok(d),
            r => Err(unexpected("readlink", r)),
        }
    }

    pub fn unit(&self, op: FsOp) -> Result<(), Errno> {
        let name = op.name();
        match self.d.call(self.pid, op) {
            FsReply::Ok => Ok(()),
            r => Err(unexpected(name, r)),
        }
    }

    pub fn unlink(&self, parent: u64, name: &str) -> Result<(), Errno> {
        self.unit(FsOp::Unlink { parent, name: name.into() })
    }

    pub fn rmdir(&self, parent: u64, name: &str) -> Result<(), Errno> {
        self.unit(FsOp::Rmdir { parent, name: name.into() })
    }

    pub fn rename(&self, parent: u64, name: &str, newparent: u64, newname: &str) -> Result<(), Errno> {
        self.unit(FsOp::Rename {
            parent,
            name: name.into(),
            newparent,
            newname: newname.into(),
            flags: 0,
        })
    }

    pub fn open(&self, ino: u64, flags: u32) -> Result<Opened, Errno> {
        match self.d.call(self.pid, FsOp::Open { ino, flags }) {
            FsReply::Open(o) => Ok(o),
            r => Err(unexpected("open", r)),
        }
    }

    pub fn opendir(&self, ino: u64) -> Result<Opened, Errno> {
        match self.d.call(self.pid, FsOp::Opendir { ino, flags: 0 }) {
            FsReply::Open(o) => Ok(o),
            r => Err(unexpected("opendir", r)),
        }
    }

    pub fn release(&self, ino: u64, fh: u64) -> Result<(), Errno> {
        self.unit(FsOp::Release { ino, fh, flags: 0 })
    }

    pub fn releasedir(&self, ino: u64, fh: u64) -> Result<(), Errno> {
        self.unit(FsOp::Releasedir { ino, fh })
    }

    pub fn fsync(&self, ino: u64, fh: u64) -> Result<(), Errno> {
        self.unit(FsOp::Fsync { ino, fh, datasync: false })
    }

    pub fn fsyncdir(&self, ino: u64, fh: u64) -> Result<(), Errno> {
        self.unit(FsOp::Fsyncdir { ino, fh, datasync: false })
    }

    pub fn write(&self, ino: u64, fh: u64, offset: u64, data: &[u8]) -> Result<u32, Errno> {
        let op = FsOp::Write { ino, fh, offset, data: data.to_vec(), flags: 0 };
        match self.d.call(self.pid, op) {
            FsReply::Written(n) => Ok(n),
            r => Err(unexpected("write", r)),
        }
    }

    /// Writes everything, issuing more requests after short writes.
    pub fn write_all(&self, ino: u64, fh: u64, offset: u64, data: &[u8]) -> Result<(), Errno> {
        let mut done = 0;
        while done < data.len() {
            let n = self.write(ino, fh, offset + done as u64, &data[done..])? as usize;
            if n == 0 {
                return Err(Errno::EIO);
            }
            done += n;
        }
        Ok(())
    }

    pub fn read(&self, ino: u64, fh: u64, offset: u64, size: u32) -> Result<Vec<u8>, Errno> {
        match self.d.call(self.pid, FsOp::Read { ino, fh, offset, size }) {
            FsReply::Data(d) => Ok(d),
            r => Err(unexpected("read", r)),
        }
    }

    /// Reads from `offset` until end of file.
    pub fn read_to_end(&self, ino: u64, fh: u64, offset: u64) -> Result<Vec<u8>, Errno> {
        let mut out = Vec::new();
        loop {
            let chunk = self.read(ino, fh, offset + out.len() as u64, 1 << 20)?;
            if chunk.is_empty() {
                return Ok(out);
            }
            out.extend_from_slice(&chunk);
        }
    }

    /// All entries of a directory except `.` and `..`.
    pub fn list(&self, ino: u64) -> Result<Vec<DirEntry>, Errno> {
        let o = self.opendir(ino)?;
        let mut out = Vec::new();
        let mut offset = 0;
        let res = loop {
            match self.d.call(self.pid, FsOp::Readdir { ino, fh: o.fh, offset }) {
                FsReply::DirEntries(batch) => {
                    let Some(last) = batch.last() else { break Ok(()) };
                    offset = last.next_offset;
                    out.extend(batch.into_iter().filter(|e| e.name != "." && e.name != ".."));
                }
                r => break Err(unexpected("readdir", r)),
            }
        };
        self.releasedir(ino, o.fh)?;
        res.map(|_| out)
    }

    pub fn statfs(&self) -> Result<Statfs, Errno> {
        match self.d.call(self.pid, FsOp::Statfs { ino: ROOT }) {
            FsReply::Statfs(s) => Ok(s),
            r => Err(unexpected("statfs", r)),
        }
    }

    /// Commits everything through a handle on the root directory.
    pub fn sync(&self) -> Result<(), Errno> {
        let o = self.opendir(ROOT)?;
        let r = self.fsyncdir(ROOT, o.fh);
        self.releasedir(ROOT, o.fh)?;
        r
    }
}

pub fn components(path: &str) -> Vec<&str> {
    path.split('/').filter(|c| !c.is_empty()).collect()
}

/// Deterministic test data.
pub fn pattern(len: usize, seed: u64) -> Vec<u8> {
    let mut x = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    (0..len)
        .map(|_| {
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
            (x >> 24) as u8
        })
        .collect()
}
