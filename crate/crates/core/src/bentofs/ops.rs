//! File operations on a mounted instance.
//!
//! Every mutating call opens its transaction before taking any inode lock.
//! Inode locks are taken in ascending inode order; when a name has to be
//! resolved before the full lock set is known, the resolution is repeated
//! under the final locks.

use std::collections::BTreeMap;
use std::sync::atomic::Ordering;

use crate::errno::Errno;
use crate::fsapi::{
    DirEntry, Entry, FileAttr, FileKind, Opened, RequestContext, SetAttr, Statfs, O_ACCMODE, O_APPEND,
    O_RDONLY, O_TRUNC, O_WRONLY, RENAME_EXCHANGE, RENAME_NOREPLACE, R_OK, W_OK, X_OK,
};
use crate::provenance::{ProvKind, ProvRecord, RwMode, MAX_RECORD_LEN};

use super::core::{FsCore, OpenFile, ReadDir, WriteDir};
use super::dirtree;
use super::layout::{
    DiskInode, InodeKind, BLOCK_SIZE, INODES_PER_BLOCK, INODE_SIZE, MAX_FILE_SIZE, MAX_NAME_LEN, PROV_LOG_INO,
    ROOT_INO,
};
use super::tx::{journal_err, InodeGuard, Tx};

type R<T> = Result<T, Errno>;

const CR_CREATE: u32 = 12;
const CR_MKDIR: u32 = 16;
const CR_LINK: u32 = 10;
const CR_UNLINK: u32 = 6;
const CR_RENAME: u32 = 20;
const CR_SETATTR: u32 = 4;
/// Credits for one provenance record: up to two data blocks, pointer
/// blocks, bitmaps and the log inode.
const CR_PROV: u32 = 12;
/// Blocks one provenance record may allocate.
const RESERVE_PROV: u64 = 5;
/// Blocks a directory insert may allocate: a new leaf and a pointer block.
const RESERVE_DIR_INSERT: u64 = 2;
pub(crate) const CR_WRITE: u32 = 48;
pub(crate) const CR_FREE: u32 = 32;
pub(crate) const READDIR_BATCH: usize = 128;

fn attr_of(ino: u64, d: &DiskInode) -> FileAttr {
    FileAttr {
        ino,
        size: d.size,
        blocks: d.size.div_ceil(BLOCK_SIZE as u64) * (BLOCK_SIZE as u64 / 512),
        kind: d.kind.file_kind().unwrap_or(FileKind::RegularFile),
        perm: d.perm,
        nlink: u32::from(d.nlink),
        uid: d.uid,
        gid: d.gid,
        atime: d.atime,
        mtime: d.mtime,
        ctime: d.ctime,
    }
}

fn entry_of(ino: u64, d: &DiskInode) -> Entry {
    Entry {
        attr: attr_of(ino, d),
        generation: u64::from(d.generation),
    }
}

fn is_dot(name: &str) -> bool {
    name == "." || name == ".."
}

/// Locks held by one operation, keyed by inode.
pub(crate) struct Locked {
    guards: BTreeMap<u64, InodeGuard>,
}

impl Locked {
    fn get(&mut self, ino: u64) -> &mut InodeGuard {
        self.guards.get_mut(&ino).expect("inode not in lock set")
    }
}

impl FsCore {
    fn credits(&self, base: u32, records: u32) -> u32 {
        base + if self.prov.is_some() { CR_PROV * records } else { 0 }
    }

    fn prov_reserve(&self, records: u64) -> u64 {
        if self.prov.is_some() {
            RESERVE_PROV * records
        } else {
            0
        }
    }

    fn lock_set(&self, inos: &[u64]) -> R<Locked> {
        let mut sorted = inos.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let mut guards = BTreeMap::new();
        for ino in sorted {
            guards.insert(ino, self.lock_ino(ino)?);
        }
        Ok(Locked { guards })
    }

    fn dir_lookup(&self, d: &DiskInode, name: &str) -> R<Option<u64>> {
        if d.kind != InodeKind::Directory {
            return Err(Errno::ENOTDIR);
        }
        dirtree::lookup(&mut ReadDir { core: self, d }, name.as_bytes())
    }

    /// Locks `parent` and whatever `name` currently resolves to in it.
    fn lock_parent_child(&self, parent: u64, name: &str) -> R<(Locked, Option<u64>)> {
        loop {
            let found = {
                let p = self.lock_ino(parent)?;
                self.dir_lookup(&p.disk, name)?
            };
            let Some(child) = found else {
                let locked = self.lock_set(&[parent])?;
                // Re-check under the lock we return.
                let mut l = locked;
                if self.dir_lookup(&l.get(parent).disk, name)?.is_none() {
                    return Ok((l, None));
                }
                continue;
            };
            let mut l = match self.lock_set(&[parent, child]) {
                Ok(l) => l,
                Err(Errno::ENOENT) if self.lock_ino(parent).is_ok() => continue,
                Err(e) => return Err(e),
            };
            if self.dir_lookup(&l.get(parent).disk, name)? == Some(child) {
                return Ok((l, Some(child)));
            }
        }
    }

    pub(crate) fn prov_log(&self, tx: &mut Tx<'_>, ctx: &RequestContext, mut rec: ProvRecord) -> R<()> {
        let Some(prov) = &self.prov else {
            return Ok(());
        };
        let mut next = prov.next_seq.lock();
        rec.seq = *next;
        rec.pid = ctx.pid;
        rec.uid = ctx.uid;
        rec.gid = ctx.gid;
        let bytes = rec.encode();
        debug_assert!(bytes.len() <= MAX_RECORD_LEN);
        let obj = match self.iget(PROV_LOG_INO) {
            Ok(o) => o,
            Err(Errno::ENOENT) => {
                self.claim_inode(tx, PROV_LOG_INO)?;
                let now = self.now();
                let d = DiskInode {
                    kind: InodeKind::RegularFile,
                    nlink: 1,
                    perm: 0o600,
                    atime: now,
                    mtime: now,
                    ctime: now,
                    ..DiskInode::default()
                };
                tx.write_inode(PROV_LOG_INO, &d)?;
                self.iput_new(PROV_LOG_INO, d)
            }
            Err(e) => return Err(e),
        };
        let mut g = obj.state.lock();
        let mut d = g.disk.clone();
        let off = d.size;
        let n = self.write_data(tx, &mut d, off, &bytes)?;
        if n != bytes.len() {
            log::error!("provenance append ran out of transaction credits");
            return Err(Errno::EIO);
        }
        tx.write_inode(PROV_LOG_INO, &d)?;
        g.disk = d;
        *next += 1;
        Ok(())
    }

    fn handle(&self, fh: u64, ino: u64) -> R<OpenFile> {
        match self.handles.lock().get(&fh) {
            Some(h) if h.ino == ino => Ok(*h),
            _ => Err(Errno::EBADF),
        }
    }

    pub(crate) fn handle_check(&self, ino: u64, fh: u64) -> R<()> {
        self.handle(fh, ino).map(|_| ())
    }

    fn new_handle(&self, ino: u64, flags: u32, is_dir: bool) -> u64 {
        let fh = self.next_fh.fetch_add(1, Ordering::Relaxed);
        self.handles.lock().insert(fh, OpenFile { ino, flags, is_dir });
        fh
    }

    /// Frees an inode with no links and no open handles, in as many
    /// transactions as its size requires.
    pub(crate) fn maybe_free(&self, ino: u64) -> R<()> {
        loop {
            let mut tx = Tx::begin(self, CR_FREE)?;
            let mut g = match self.lock_ino(ino) {
                Ok(g) => g,
                Err(Errno::ENOENT) => return Ok(()),
                Err(e) => return Err(e),
            };
            if g.disk.nlink > 0 || g.opens > 0 {
                return Ok(());
            }
            let mut d = g.disk.clone();
            let done = self.shrink(&mut tx, &mut d, 0)?;
            if done && tx.remaining() >= 2 {
                self.free_inode_bit(&mut tx, ino)?;
                let freed = DiskInode {
                    generation: d.generation,
                    ..DiskInode::default()
                };
                tx.write_inode(ino, &freed)?;
                g.disk = freed;
                g.freed = true;
                drop(g);
                self.ievict(ino);
                log::debug!("freed inode {ino}");
                return Ok(());
            }
            tx.write_inode(ino, &d)?;
            g.disk = d;
        }
    }

    /// Frees inodes left with no links by a crash before their release.
    pub(crate) fn cleanup_orphans(&self) -> R<usize> {
        let mut orphans = Vec::new();
        let table_blocks = self.sb.inode_count() / INODES_PER_BLOCK;
        for blk in 0..table_blocks {
            let b = u64::from(self.sb.inode_table_start) + blk;
            let bh = self.dev.bread(b).map_err(super::tx::dev_err)?;
            for i in 0..INODES_PER_BLOCK as usize {
                let ino = blk * INODES_PER_BLOCK + i as u64 + 1;
                if let Some(d) = DiskInode::decode(&bh.data()[i * INODE_SIZE..(i + 1) * INODE_SIZE]) {
                    if d.kind != InodeKind::Free && d.nlink == 0 && ino != PROV_LOG_INO {
                        orphans.push(ino);
                    }
                }
            }
        }
        for &ino in &orphans {
            log::info!("freeing orphan inode {ino}");
            self.maybe_free(ino)?;
        }
        Ok(orphans.len())
    }

    pub(crate) fn op_lookup(&self, parent: u64, name: &str) -> R<Entry> {
        if name.len() > MAX_NAME_LEN {
            return Err(Errno::ENAMETOOLONG);
        }
        let child = {
            let p = self.lock_ino(parent)?;
            self.dir_lookup(&p.disk, name)?.ok_or(Errno::ENOENT)?
        };
        let mut c = self.lock_ino(child)?;
        c.lookups += 1;
        Ok(entry_of(child, &c.disk))
    }

    pub(crate) fn op_forget(&self, ino: u64, nlookup: u64) -> R<()> {
        if let Ok(mut g) = self.lock_ino(ino) {
            g.lookups = g.lookups.saturating_sub(nlookup);
        }
        Ok(())
    }

    pub(crate) fn op_getattr(&self, ino: u64) -> R<FileAttr> {
        let g = self.lock_ino(ino)?;
        Ok(attr_of(ino, &g.disk))
    }

    pub(crate) fn op_setattr(&self, ino: u64, attr: &SetAttr) -> R<FileAttr> {
        if let Some(size) = attr.size {
            if size > MAX_FILE_SIZE {
                return Err(Errno::EFBIG);
            }
        }
        let mut tx = Tx::begin(self, CR_SETATTR.max(if attr.size.is_some() { CR_FREE } else { 0 }))?;
        let mut g = self.lock_ino(ino)?;
        let mut d = g.disk.clone();
        if let Some(size) = attr.size {
            match d.kind {
                InodeKind::Directory => return Err(Errno::EISDIR),
                InodeKind::RegularFile => {}
                _ => return Err(Errno::EINVAL),
            }
            let now = self.now();
            d.mtime = now;
            d.ctime = now;
            if size >= d.size {
                d.size = size;
            } else {
                while !self.shrink(&mut tx, &mut d, size)? {
                    tx.write_inode(ino, &d)?;
                    g.disk = d.clone();
                    drop(g);
                    drop(tx);
                    tx = Tx::begin(self, CR_FREE)?;
                    g = self.lock_ino(ino)?;
                    d = g.disk.clone();
                    if d.size <= size {
                        break;
                    }
                }
            }
        }
        if let Some(m) = attr.mode {
            d.perm = m & 0o7777;
        }
        if let Some(u) = attr.uid {
            d.uid = u;
        }
        if let Some(gid) = attr.gid {
            d.gid = gid;
        }
        if let Some(t) = attr.atime {
            d.atime = t;
        }
        if let Some(t) = attr.mtime {
            d.mtime = t;
        }
        d.ctime = self.now();
        tx.write_inode(ino, &d)?;
        g.disk = d;
        Ok(attr_of(ino, &g.disk))
    }

    pub(crate) fn op_readlink(&self, ino: u64) -> R<Vec<u8>> {
        let g = self.lock_ino(ino)?;
        if g.disk.kind != InodeKind::Symlink {
            return Err(Errno::EINVAL);
        }
        self.read_data(&g.disk, 0, g.disk.size)
    }

    /// Creates a file, directory or symlink, optionally opening it.
    pub(crate) fn op_create_node(
        &self,
        ctx: &RequestContext,
        parent: u64,
        name: &str,
        kind: InodeKind,
        perm: u16,
        target: Option<&[u8]>,
        open_flags: Option<u32>,
    ) -> R<(Entry, Option<Opened>)> {
        dirtree::check_name(name.as_bytes())?;
        if is_dot(name) {
            return Err(Errno::EEXIST);
        }
        if let Some(t) = target {
            if t.is_empty() {
                return Err(Errno::ENOENT);
            }
            if t.len() > BLOCK_SIZE {
                return Err(Errno::ENAMETOOLONG);
            }
        }
        let records = 1 + u32::from(open_flags.is_some());
        let base = if kind == InodeKind::Directory { CR_MKDIR } else { CR_CREATE };
        let mut tx = Tx::begin(self, self.credits(base, records))?;
        let own_blocks = match kind {
            InodeKind::Directory => 2,
            InodeKind::Symlink => 1,
            _ => 0,
        };
        tx.reserve(RESERVE_DIR_INSERT + own_blocks + self.prov_reserve(u64::from(records)))?;
        let mut l = self.lock_set(&[parent])?;
        let p = l.get(parent);
        if p.disk.kind != InodeKind::Directory {
            return Err(Errno::ENOTDIR);
        }
        if p.disk.nlink == 0 {
            return Err(Errno::ENOENT);
        }
        if self.dir_lookup(&p.disk, name)?.is_some() {
            return Err(Errno::EEXIST);
        }
        if kind == InodeKind::Directory && p.disk.nlink == u16::MAX {
            return Err(Errno::EMLINK);
        }
        let ino = self.alloc_inode(&mut tx)?;
        let mut pd = p.disk.clone();
        if let Err(e) = dirtree::insert(&mut WriteDir { tx: &mut tx, d: &mut pd }, name.as_bytes(), ino) {
            self.free_inode_bit(&mut tx, ino)?;
            return Err(e);
        }
        let now = self.now();
        let mut d = DiskInode {
            kind,
            nlink: if kind == InodeKind::Directory { 2 } else { 1 },
            perm: perm & 0o7777,
            uid: ctx.uid,
            gid: ctx.gid,
            atime: now,
            mtime: now,
            ctime: now,
            generation: self.read_disk_inode(ino)?.generation.wrapping_add(1),
            ..DiskInode::default()
        };
        match kind {
            InodeKind::Directory => {
                dirtree::init(&mut WriteDir { tx: &mut tx, d: &mut d }, ino, parent)?;
                pd.nlink += 1;
            }
            InodeKind::Symlink => {
                let t = target.unwrap_or_default();
                if self.write_data(&mut tx, &mut d, 0, t)? != t.len() {
                    return Err(Errno::EIO);
                }
            }
            _ => {}
        }
        tx.write_inode(ino, &d)?;
        pd.mtime = now;
        pd.ctime = now;
        tx.write_inode(parent, &pd)?;
        l.get(parent).disk = pd;

        let rec_kind = if kind == InodeKind::Symlink { ProvKind::Symlink } else { ProvKind::Create };
        self.prov_log(
            &mut tx,
            ctx,
            ProvRecord {
                parent,
                name: name.to_string(),
                flags: open_flags.unwrap_or(0),
                ..ProvRecord::new(rec_kind, ctx.pid, ino)
            },
        )?;
        let obj = self.iput_new(ino, d.clone());
        let mut st = obj.state.lock();
        st.lookups += 1;
        let opened = match open_flags {
            Some(flags) => {
                st.opens += 1;
                let fh = self.new_handle(ino, flags, false);
                self.prov_log(
                    &mut tx,
                    ctx,
                    ProvRecord {
                        flags,
                        fh,
                        rw_mode: Some(RwMode::from_flags(flags)),
                        ..ProvRecord::new(ProvKind::Open, ctx.pid, ino)
                    },
                )?;
                Some(Opened { fh, flags })
            }
            None => None,
        };
        Ok((entry_of(ino, &st.disk), opened))
    }

    pub(crate) fn op_link(&self, ino: u64, newparent: u64, newname: &str) -> R<Entry> {
        dirtree::check_name(newname.as_bytes())?;
        if is_dot(newname) {
            return Err(Errno::EEXIST);
        }
        let mut tx = Tx::begin(self, CR_LINK)?;
        tx.reserve(RESERVE_DIR_INSERT)?;
        let mut l = self.lock_set(&[ino, newparent])?;
        if l.get(ino).disk.kind == InodeKind::Directory {
            return Err(Errno::EPERM);
        }
        if l.get(ino).disk.nlink == 0 {
            return Err(Errno::ENOENT);
        }
        if l.get(ino).disk.nlink == u16::MAX {
            return Err(Errno::EMLINK);
        }
        let np = l.get(newparent);
        if np.disk.nlink == 0 {
            return Err(Errno::ENOENT);
        }
        if self.dir_lookup(&np.disk, newname)?.is_some() {
            return Err(Errno::EEXIST);
        }
        let now = self.now();
        let mut pd = np.disk.clone();
        dirtree::insert(&mut WriteDir { tx: &mut tx, d: &mut pd }, newname.as_bytes(), ino)?;
        pd.mtime = now;
        pd.ctime = now;
        tx.write_inode(newparent, &pd)?;
        l.get(newparent).disk = pd;
        let t = l.get(ino);
        t.disk.nlink += 1;
        t.disk.ctime = now;
        t.lookups += 1;
        let d = t.disk.clone();
        tx.write_inode(ino, &d)?;
        Ok(entry_of(ino, &d))
    }

    /// Shared body of unlink and rmdir.
    pub(crate) fn op_remove(&self, ctx: &RequestContext, parent: u64, name: &str, dir: bool) -> R<()> {
        if name == "." {
            return Err(Errno::EINVAL);
        }
        if name == ".." {
            return Err(if dir { Errno::ENOTEMPTY } else { Errno::EISDIR });
        }
        if name.len() > MAX_NAME_LEN {
            return Err(Errno::ENAMETOOLONG);
        }
        let free_now = {
            let mut tx = Tx::begin(self, self.credits(CR_UNLINK, 1))?;
            tx.reserve(self.prov_reserve(1))?;
            let (mut l, child) = self.lock_parent_child(parent, name)?;
            let child = child.ok_or(Errno::ENOENT)?;
            let ckind = l.get(child).disk.kind;
            if dir {
                if ckind != InodeKind::Directory {
                    return Err(Errno::ENOTDIR);
                }
                if child == ROOT_INO {
                    return Err(Errno::EPERM);
                }
                let cd = l.get(child).disk.clone();
                if !dirtree::is_empty(&mut ReadDir { core: self, d: &cd })? {
                    return Err(Errno::ENOTEMPTY);
                }
            } else if ckind == InodeKind::Directory {
                return Err(Errno::EISDIR);
            }
            let now = self.now();
            let mut pd = l.get(parent).disk.clone();
            dirtree::remove(&mut WriteDir { tx: &mut tx, d: &mut pd }, name.as_bytes())?;
            if dir {
                pd.nlink -= 1;
            }
            pd.mtime = now;
            pd.ctime = now;
            tx.write_inode(parent, &pd)?;
            l.get(parent).disk = pd;
            let c = l.get(child);
            c.disk.nlink = if dir { 0 } else { c.disk.nlink - 1 };
            c.disk.ctime = now;
            let cd = c.disk.clone();
            let free_now = cd.nlink == 0 && c.opens == 0;
            tx.write_inode(child, &cd)?;
            self.prov_log(
                &mut tx,
                ctx,
                ProvRecord {
                    parent,
                    name: name.to_string(),
                    deleted: cd.nlink == 0,
                    ..ProvRecord::new(ProvKind::Unlink, ctx.pid, child)
                },
            )?;
            free_now.then_some(child)
        };
        if let Some(child) = free_now {
            self.maybe_free(child)?;
        }
        Ok(())
    }

    /// True if `anc` is `dir` or one of its ancestors. Callers hold the
    /// rename lock so the directory tree cannot change shape meanwhile.
    fn is_ancestor(&self, anc: u64, mut dir: u64) -> R<bool> {
        for _ in 0..self.sb.inode_count() {
            if dir == anc {
                return Ok(true);
            }
            if dir == ROOT_INO {
                return Ok(false);
            }
            let up = {
                let g = self.lock_ino(dir)?;
                self.dir_lookup(&g.disk, "..")?.ok_or(Errno::EIO)?
            };
            dir = up;
        }
        log::error!("directory ancestry loop at inode {dir}");
        Err(Errno::EIO)
    }

    pub(crate) fn op_rename(
        &self,
        ctx: &RequestContext,
        parent: u64,
        name: &str,
        newparent: u64,
        newname: &str,
        flags: u32,
    ) -> R<()> {
        if flags & RENAME_EXCHANGE != 0 || flags & !(RENAME_NOREPLACE | RENAME_EXCHANGE) != 0 {
            return Err(Errno::EINVAL);
        }
        if is_dot(name) || is_dot(newname) {
            return Err(Errno::EINVAL);
        }
        dirtree::check_name(newname.as_bytes())?;
        if name.len() > MAX_NAME_LEN {
            return Err(Errno::ENAMETOOLONG);
        }
        let _tree = (parent != newparent).then(|| self.rename_lock.lock());
        let free_after = {
            let mut tx = Tx::begin(self, self.credits(CR_RENAME, 2))?;
            tx.reserve(RESERVE_DIR_INSERT + self.prov_reserve(2))?;
            let l = loop {
                let (src, dst) = {
                    let mut l = self.lock_set(&[parent, newparent])?;
                    let src = self.dir_lookup(&l.get(parent).disk, name)?.ok_or(Errno::ENOENT)?;
                    let dst = self.dir_lookup(&l.get(newparent).disk, newname)?;
                    (src, dst)
                };
                if parent != newparent {
                    let src_is_dir = self.lock_ino(src)?.disk.kind == InodeKind::Directory;
                    if src_is_dir && self.is_ancestor(src, newparent)? {
                        return Err(Errno::EINVAL);
                    }
                }
                let mut inos = vec![parent, newparent, src];
                inos.extend(dst);
                let mut l = match self.lock_set(&inos) {
                    Ok(l) => l,
                    Err(Errno::ENOENT) => continue,
                    Err(e) => return Err(e),
                };
                if self.dir_lookup(&l.get(parent).disk, name)? == Some(src)
                    && self.dir_lookup(&l.get(newparent).disk, newname)? == dst
                {
                    break (l, src, dst);
                }
            };
            let (mut l, src, dst) = l;
            if dst.is_some() && flags & RENAME_NOREPLACE != 0 {
                return Err(Errno::EEXIST);
            }
            if dst == Some(src) {
                return Ok(());
            }
            if l.get(newparent).disk.nlink == 0 {
                return Err(Errno::ENOENT);
            }
            let src_dir = l.get(src).disk.kind == InodeKind::Directory;
            if let Some(dst) = dst {
                let dd = l.get(dst).disk.clone();
                let dst_dir = dd.kind == InodeKind::Directory;
                if src_dir && !dst_dir {
                    return Err(Errno::ENOTDIR);
                }
                if !src_dir && dst_dir {
                    return Err(Errno::EISDIR);
                }
                if dst_dir && !dirtree::is_empty(&mut ReadDir { core: self, d: &dd })? {
                    return Err(Errno::ENOTEMPTY);
                }
            } else if src_dir && parent != newparent && l.get(newparent).disk.nlink == u16::MAX {
                return Err(Errno::EMLINK);
            }
            let now = self.now();
            // Insert or replace first: an insert can fail for lack of space
            // before anything has been modified.
            let mut npd = l.get(newparent).disk.clone();
            match dst {
                Some(_) => {
                    dirtree::replace(&mut WriteDir { tx: &mut tx, d: &mut npd }, newname.as_bytes(), src)?;
                }
                None => {
                    dirtree::insert(&mut WriteDir { tx: &mut tx, d: &mut npd }, newname.as_bytes(), src)?;
                }
            }
            l.get(newparent).disk = npd;
            let mut pd = l.get(parent).disk.clone();
            dirtree::remove(&mut WriteDir { tx: &mut tx, d: &mut pd }, name.as_bytes())?;
            l.get(parent).disk = pd;
            if src_dir && parent != newparent {
                let mut sd = l.get(src).disk.clone();
                dirtree::replace(&mut WriteDir { tx: &mut tx, d: &mut sd }, b"..", newparent)?;
                l.get(src).disk = sd;
                l.get(parent).disk.nlink -= 1;
                l.get(newparent).disk.nlink += 1;
            }
            let mut free_after = None;
            if let Some(dst) = dst {
                let dg = l.get(dst);
                if dg.disk.kind == InodeKind::Directory {
                    dg.disk.nlink = 0;
                } else {
                    dg.disk.nlink -= 1;
                }
                dg.disk.ctime = now;
                if dg.disk.nlink == 0 && dg.opens == 0 {
                    free_after = Some(dst);
                }
                if src_dir {
                    // The replaced directory's ".." no longer counts.
                    l.get(newparent).disk.nlink -= 1;
                }
            }
            l.get(src).disk.ctime = now;
            for p in [parent, newparent] {
                l.get(p).disk.mtime = now;
                l.get(p).disk.ctime = now;
            }
            let mut touched = vec![parent, newparent, src];
            touched.extend(dst);
            touched.sort_unstable();
            touched.dedup();
            for ino in touched {
                let d = l.get(ino).disk.clone();
                tx.write_inode(ino, &d)?;
            }
            self.prov_log(
                &mut tx,
                ctx,
                ProvRecord {
                    parent,
                    name: name.to_string(),
                    newparent,
                    newname: newname.to_string(),
                    ..ProvRecord::new(ProvKind::Rename, ctx.pid, src)
                },
            )?;
            if let Some(dst) = dst {
                let deleted = l.get(dst).disk.nlink == 0;
                self.prov_log(
                    &mut tx,
                    ctx,
                    ProvRecord {
                        parent: newparent,
                        name: newname.to_string(),
                        deleted,
                        ..ProvRecord::new(ProvKind::Unlink, ctx.pid, dst)
                    },
                )?;
            }
            free_after
        };
        if let Some(ino) = free_after {
            self.maybe_free(ino)?;
        }
        Ok(())
    }

    pub(crate) fn op_open(&self, ctx: &RequestContext, ino: u64, flags: u32) -> R<Opened> {
        let writable = flags & O_ACCMODE != O_RDONLY;
        let mut tx = if self.prov.is_some() || (writable && flags & O_TRUNC != 0) {
            let mut tx = Tx::begin(self, self.credits(CR_FREE, 1))?;
            tx.reserve(self.prov_reserve(1))?;
            Some(tx)
        } else {
            None
        };
        let mut g = self.lock_ino(ino)?;
        match g.disk.kind {
            InodeKind::Directory if writable => return Err(Errno::EISDIR),
            InodeKind::Symlink => return Err(Errno::ELOOP),
            _ => {}
        }
        if writable && flags & O_TRUNC != 0 && g.disk.size > 0 {
            // Truncation may span transactions; open completes in the last.
            let mut d = g.disk.clone();
            d.mtime = self.now();
            d.ctime = d.mtime;
            loop {
                let t = tx.as_mut().expect("truncating open has a transaction");
                let done = self.shrink(t, &mut d, 0)?;
                t.write_inode(ino, &d)?;
                g.disk = d.clone();
                if done {
                    break;
                }
                drop(g);
                drop(tx.take());
                let mut t = Tx::begin(self, self.credits(CR_FREE, 1))?;
                t.reserve(self.prov_reserve(1))?;
                tx = Some(t);
                g = self.lock_ino(ino)?;
                d = g.disk.clone();
            }
        }
        g.opens += 1;
        let fh = self.new_handle(ino, flags, false);
        if let Some(t) = tx.as_mut() {
            let r = self.prov_log(
                t,
                ctx,
                ProvRecord {
                    flags,
                    fh,
                    rw_mode: Some(RwMode::from_flags(flags)),
                    ..ProvRecord::new(ProvKind::Open, ctx.pid, ino)
                },
            );
            if let Err(e) = r {
                g.opens -= 1;
                self.handles.lock().remove(&fh);
                return Err(e);
            }
        }
        Ok(Opened { fh, flags })
    }

    pub(crate) fn op_read(&self, ino: u64, fh: u64, offset: u64, size: u32) -> R<Vec<u8>> {
        let h = self.handle(fh, ino)?;
        if h.is_dir {
            return Err(Errno::EISDIR);
        }
        if h.flags & O_ACCMODE == O_WRONLY {
            return Err(Errno::EBADF);
        }
        let g = self.lock_ino_any(ino)?;
        if g.disk.kind == InodeKind::Directory {
            return Err(Errno::EISDIR);
        }
        self.read_data(&g.disk, offset, u64::from(size))
    }

    pub(crate) fn op_write(&self, ino: u64, fh: u64, offset: u64, data: &[u8]) -> R<u32> {
        let h = self.handle(fh, ino)?;
        if h.is_dir || h.flags & O_ACCMODE == O_RDONLY {
            return Err(Errno::EBADF);
        }
        if data.len() > u32::MAX as usize {
            return Err(Errno::EINVAL);
        }
        let append = h.flags & O_APPEND != 0;
        if !append && offset.saturating_add(data.len() as u64) > MAX_FILE_SIZE {
            return Err(Errno::EFBIG);
        }
        if data.is_empty() {
            return Ok(0);
        }
        let mut done = 0usize;
        let mut start = offset;
        while done < data.len() {
            let mut tx = Tx::begin(self, CR_WRITE)?;
            let mut g = self.lock_ino_any(ino)?;
            if append && done == 0 {
                start = g.disk.size;
                if start.saturating_add(data.len() as u64) > MAX_FILE_SIZE {
                    return Err(Errno::EFBIG);
                }
            }
            let mut d = g.disk.clone();
            let n = match self.write_data(&mut tx, &mut d, start + done as u64, &data[done..]) {
                Ok(n) => n,
                Err(e) if done > 0 => {
                    log::debug!("short write on inode {ino}: {e}");
                    break;
                }
                Err(e) => return Err(e),
            };
            let now = self.now();
            d.mtime = now;
            d.ctime = now;
            tx.write_inode(ino, &d)?;
            g.disk = d;
            if n == 0 {
                break;
            }
            done += n;
        }
        Ok(done as u32)
    }

    /// Locks an inode even if it is unlinked, as long as it has not been
    /// released to the allocator.
    fn lock_ino_any(&self, ino: u64) -> R<InodeGuard> {
        self.lock_ino(ino)
    }

    pub(crate) fn op_release(&self, ctx: &RequestContext, ino: u64, fh: u64, dir: bool) -> R<()> {
        let h = self.handle(fh, ino)?;
        if h.is_dir != dir {
            return Err(Errno::EBADF);
        }
        let log_close = self.prov.is_some() && !dir;
        let free_now = {
            let mut tx = if log_close {
                let mut t = Tx::begin(self, self.credits(0, 1))?;
                t.reserve(self.prov_reserve(1))?;
                Some(t)
            } else {
                None
            };
            let mut g = self.lock_ino(ino)?;
            if self.handles.lock().remove(&fh).is_none() {
                return Err(Errno::EBADF);
            }
            g.opens = g.opens.saturating_sub(1);
            if let Some(t) = tx.as_mut() {
                self.prov_log(
                    t,
                    ctx,
                    ProvRecord {
                        fh,
                        flags: h.flags,
                        ..ProvRecord::new(ProvKind::Close, ctx.pid, ino)
                    },
                )?;
            }
            g.disk.nlink == 0 && g.opens == 0
        };
        if free_now {
            self.maybe_free(ino)?;
        }
        Ok(())
    }

    pub(crate) fn op_fsync(&self, ino: u64, fh: u64) -> R<()> {
        self.handle(fh, ino)?;
        self.journal.force_commit().map_err(journal_err)?;
        Ok(())
    }

    pub(crate) fn op_opendir(&self, ino: u64, flags: u32) -> R<Opened> {
        let mut g = self.lock_ino(ino)?;
        if g.disk.kind != InodeKind::Directory {
            return Err(Errno::ENOTDIR);
        }
        g.opens += 1;
        let fh = self.new_handle(ino, flags, true);
        Ok(Opened { fh, flags })
    }

    pub(crate) fn op_readdir(&self, ino: u64, fh: u64, offset: u64) -> R<Vec<DirEntry>> {
        let h = self.handle(fh, ino)?;
        if !h.is_dir {
            return Err(Errno::ENOTDIR);
        }
        let batch = {
            let g = self.lock_ino(ino)?;
            if g.disk.nlink == 0 {
                // Removed while open: nothing left to list.
                return Ok(Vec::new());
            }
            dirtree::entries_after(&mut ReadDir { core: self, d: &g.disk }, offset, READDIR_BATCH)?
        };
        let mut out = Vec::with_capacity(batch.len());
        for (rec, cookie) in batch {
            let name = String::from_utf8_lossy(&rec.name).into_owned();
            let kind = if is_dot(&name) {
                FileKind::Directory
            } else {
                match self.lock_ino(rec.ino) {
                    Ok(g) => g.disk.kind.file_kind().unwrap_or(FileKind::RegularFile),
                    Err(Errno::ENOENT) => continue,
                    Err(e) => return Err(e),
                }
            };
            out.push(DirEntry {
                ino: rec.ino,
                kind,
                name,
                next_offset: cookie,
            });
        }
        Ok(out)
    }

    pub(crate) fn op_statfs(&self) -> R<Statfs> {
        let a = self.alloc.lock();
        Ok(Statfs {
            blocks: self.sb.total_blocks() - self.sb.data_start(),
            bfree: a.c.free_blocks,
            files: self.sb.inode_count(),
            ffree: a.c.free_inodes,
            bsize: BLOCK_SIZE as u32,
            namelen: MAX_NAME_LEN as u32,
        })
    }

    pub(crate) fn op_access(&self, ctx: &RequestContext, ino: u64, mask: u32) -> R<()> {
        let g = self.lock_ino(ino)?;
        let perm = u32::from(g.disk.perm);
        if ctx.uid == 0 {
            // Root may do anything except execute a file with no x bit.
            if mask & X_OK != 0 && g.disk.kind != InodeKind::Directory && perm & 0o111 == 0 {
                return Err(Errno::EACCES);
            }
            return Ok(());
        }
        let bits = if ctx.uid == g.disk.uid {
            (perm >> 6) & 7
        } else if ctx.gid == g.disk.gid {
            (perm >> 3) & 7
        } else {
            perm & 7
        };
        let want = mask & (R_OK | W_OK | X_OK);
        if bits & want == want {
            Ok(())
        } else {
            Err(Errno::EACCES)
        }
    }
}
