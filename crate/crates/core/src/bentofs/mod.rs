//! Bento-fs: an xv6-style journaling file system with double-indirect
//! blocks, hashed directories and live-upgrade support, plus its
//! provenance-tracking variant.

mod core;
pub mod dirtree;
pub mod fsck;
pub mod layout;
mod ops;
mod tx;

use std::any::Any;
use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;
use thiserror::Error;

use crate::blockdev::{BlockDevice, DeviceError, DeviceOptions};
use crate::errno::Errno;
use crate::fsapi::{
    DirEntry, Entry, FcInfo, FileAttr, FileSystem, Opened, RefusalKind, RequestContext, SetAttr, Statfs,
    TransferIn, TransferOut, TransferRefusal, S_IFMT, S_IFREG,
};
use crate::journal::{Journal, JournalConfig, JournalError};
use crate::provenance::{prov_parse, ProvError};

pub use self::core::{system_clock, Clock, OpenFile};
use self::core::{FsCore, ProvState};
use self::dirtree::MemDirStore;
use self::layout::{
    set_bit, DiskInode, InodeKind, Superblock, BLOCK_SIZE, INODE_SIZE, MIN_FS_JOURNAL_LEN, PROV_LOG_INO,
    ROOT_INO, SUPERBLOCK_BLOCK,
};
pub use self::tx::AllocCursors;
use self::tx::{dev_err, Allocator};

pub const DEFAULT_FS_JOURNAL_LEN: u64 = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Plain Bento-fs.
    Plain,
    /// Bento-prov: logs lifecycle and access events to inode 2.
    Prov,
}

impl Variant {
    /// Transfer capsule version this variant produces; it accepts any
    /// version up to this one.
    pub fn capsule_version(self) -> u32 {
        match self {
            Variant::Plain => 0,
            Variant::Prov => 1,
        }
    }

    pub fn fs_name(self) -> &'static str {
        match self {
            Variant::Plain => "bentofs",
            Variant::Prov => "bentoprov",
        }
    }
}

#[derive(Clone, Debug)]
pub struct MkfsOptions {
    /// Defaults to one inode per four blocks.
    pub inode_count: Option<u64>,
    pub journal_len: u64,
}

impl Default for MkfsOptions {
    fn default() -> Self {
        MkfsOptions {
            inode_count: None,
            journal_len: DEFAULT_FS_JOURNAL_LEN,
        }
    }
}

#[derive(Debug, Error)]
pub enum MkfsError {
    #[error("device of {blocks} blocks is too small for this geometry")]
    DeviceTooSmall { blocks: u64 },
    #[error("journal of {0} blocks is below the minimum of {MIN_FS_JOURNAL_LEN}")]
    JournalTooSmall(u64),
    #[error("block size {0} unsupported (must be {BLOCK_SIZE})")]
    BlockSize(usize),
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error(transparent)]
    Journal(#[from] JournalError),
}

#[derive(Debug, Error)]
pub enum MountError {
    #[error("bad superblock magic")]
    BadMagic,
    #[error("corrupt superblock: {0}")]
    Corrupt(String),
    #[error("block size {0} unsupported (must be {BLOCK_SIZE})")]
    BlockSize(usize),
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error(transparent)]
    Journal(#[from] JournalError),
    #[error("mount failed: {0}")]
    Fs(Errno),
    #[error(transparent)]
    Provenance(#[from] ProvError),
}

impl MountError {
    pub fn errno(&self) -> Errno {
        match self {
            MountError::BadMagic | MountError::Corrupt(_) | MountError::BlockSize(_) => Errno::EINVAL,
            MountError::Fs(e) => *e,
            _ => Errno::EIO,
        }
    }
}

/// Formats `dev` with an empty file system. The result depends only on the
/// device size and options.
pub fn mkfs(dev: &BlockDevice, opts: &MkfsOptions) -> Result<Superblock, MkfsError> {
    if dev.block_size() != BLOCK_SIZE {
        return Err(MkfsError::BlockSize(dev.block_size()));
    }
    if opts.journal_len < MIN_FS_JOURNAL_LEN {
        return Err(MkfsError::JournalTooSmall(opts.journal_len));
    }
    let total = dev.block_count();
    let inodes = opts.inode_count.unwrap_or(total / 4);
    let sb = Superblock::plan(total, inodes, opts.journal_len).ok_or(MkfsError::DeviceTooSmall { blocks: total })?;
    let zero = vec![0u8; BLOCK_SIZE];
    dev.write_uncached(0, &zero)?;
    dev.write_uncached(SUPERBLOCK_BLOCK, &sb.encode())?;
    Journal::format(dev, sb.journal_start(), sb.journal_len())?;

    // Root directory: index block and one leaf at the start of the data region.
    let mut root_dir = MemDirStore::default();
    dirtree::init(&mut root_dir, ROOT_INO, ROOT_INO).expect("empty root directory");
    let data0 = sb.data_start();
    let mut root = DiskInode {
        kind: InodeKind::Directory,
        nlink: 2,
        perm: 0o755,
        size: (root_dir.blocks.len() * BLOCK_SIZE) as u64,
        generation: 1,
        ..DiskInode::default()
    };
    for (i, _) in root_dir.blocks.iter().enumerate() {
        root.direct[i] = (data0 + i as u64) as u32;
    }
    let used_end = data0 + root_dir.blocks.len() as u64;

    let mut bitmaps: HashMap<u64, Vec<u8>> = HashMap::new();
    for b in 0..used_end {
        let (bb, bit) = sb.block_bit(b);
        set_bit(bitmaps.entry(bb).or_insert_with(|| zero.clone()), bit, true);
    }
    let (ib, ibit) = sb.inode_bit(ROOT_INO);
    set_bit(bitmaps.entry(ib).or_insert_with(|| zero.clone()), ibit, true);
    let (itb, ioff) = sb.inode_location(ROOT_INO);
    let mut itable_block = zero.clone();
    root.encode_into(&mut itable_block[ioff..ioff + INODE_SIZE]);

    let meta_start = u64::from(sb.inode_bitmap_start);
    for b in meta_start..data0 {
        let data = if b == itb {
            &itable_block
        } else {
            bitmaps.get(&b).unwrap_or(&zero)
        };
        dev.write_uncached(b, data)?;
    }
    for (i, blk) in root_dir.blocks.iter().enumerate() {
        dev.write_uncached(data0 + i as u64, blk)?;
    }
    dev.flush()?;
    log::info!(
        "mkfs: {} blocks, {} inodes, journal {} blocks, data from {}",
        sb.total_blocks,
        sb.inode_count,
        sb.journal_len,
        sb.data_start
    );
    Ok(sb)
}

/// Reads and checks the superblock without mounting.
pub fn read_superblock(dev: &BlockDevice) -> Result<Superblock, MountError> {
    if dev.block_size() != BLOCK_SIZE {
        return Err(MountError::BlockSize(dev.block_size()));
    }
    let raw = dev.read_uncached(SUPERBLOCK_BLOCK)?;
    let sb = Superblock::decode(&raw).ok_or(MountError::BadMagic)?;
    sb.validate(dev.block_count()).map_err(MountError::Corrupt)?;
    Ok(sb)
}

#[derive(Clone)]
pub struct MountOptions {
    pub journal: JournalConfig,
    /// Timestamp source; defaults to the system clock.
    pub clock: Option<Clock>,
    pub cache_capacity: usize,
}

impl Default for MountOptions {
    fn default() -> Self {
        MountOptions {
            journal: JournalConfig::default(),
            clock: None,
            cache_capacity: DeviceOptions::default().cache_capacity,
        }
    }
}

impl std::fmt::Debug for MountOptions {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MountOptions")
            .field("journal", &self.journal)
            .field("clock", &self.clock.is_some())
            .field("cache_capacity", &self.cache_capacity)
            .finish()
    }
}

/// Live state handed from one instance to the next during an upgrade.
pub struct BentoCapsule {
    pub format_version: u32,
    pub device: BlockDevice,
    pub journal: Arc<Journal>,
    pub superblock: Superblock,
    pub cursors: AllocCursors,
    /// Next provenance sequence number; absent from version 0 capsules.
    pub prov_next_seq: Option<u64>,
    /// Unlinked inodes kept alive by open handles, with their handle counts.
    pub deferred_free: Vec<(u64, u32)>,
    pub handles: Vec<(u64, OpenFile)>,
    pub lookups: Vec<(u64, u64)>,
    pub next_fh: u64,
}

impl std::fmt::Debug for BentoCapsule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BentoCapsule")
            .field("format_version", &self.format_version)
            .field("cursors", &self.cursors)
            .field("prov_next_seq", &self.prov_next_seq)
            .field("deferred_free", &self.deferred_free)
            .field("handles", &self.handles.len())
            .field("next_fh", &self.next_fh)
            .finish()
    }
}

/// A Bento-fs instance, mounted or not.
pub struct BentoFs {
    variant: Variant,
    opts: MountOptions,
    /// Device to mount when no path is given.
    pending: Option<BlockDevice>,
    core: Option<FsCore>,
}

impl BentoFs {
    pub fn new(variant: Variant, opts: MountOptions) -> Self {
        BentoFs {
            variant,
            opts,
            pending: None,
            core: None,
        }
    }

    /// An instance that mounts `dev` on init instead of opening a path.
    pub fn with_device(variant: Variant, dev: BlockDevice, opts: MountOptions) -> Self {
        BentoFs {
            variant,
            opts,
            pending: Some(dev),
            core: None,
        }
    }

    /// Mounts `dev` directly, outside any dispatcher.
    pub fn mount(variant: Variant, dev: BlockDevice, opts: MountOptions) -> Result<Self, MountError> {
        let mut fs = BentoFs::new(variant, opts);
        fs.mount_device(dev)?;
        Ok(fs)
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn is_mounted(&self) -> bool {
        self.core.is_some()
    }

    fn mount_device(&mut self, dev: BlockDevice) -> Result<(), MountError> {
        let sb = read_superblock(&dev)?;
        let journal = Arc::new(Journal::open(
            dev.clone(),
            sb.journal_start(),
            sb.journal_len(),
            self.opts.journal.clone(),
        )?);
        let core = self.build_core(dev, journal, sb, None, None);
        let cursors = core.scan_cursors().map_err(MountError::Fs)?;
        core.alloc.lock().c = cursors;
        if self.variant == Variant::Prov {
            let next = next_prov_seq(&core)?;
            *core.prov.as_ref().unwrap().next_seq.lock() = next;
        }
        let orphans = core.cleanup_orphans().map_err(MountError::Fs)?;
        if orphans > 0 {
            log::info!("freed {orphans} orphan inodes at mount");
        }
        self.core = Some(core);
        Ok(())
    }

    fn build_core(
        &self,
        dev: BlockDevice,
        journal: Arc<Journal>,
        sb: Superblock,
        cursors: Option<AllocCursors>,
        prov_seq: Option<u64>,
    ) -> FsCore {
        FsCore {
            dev,
            journal,
            sb,
            alloc: Mutex::new(Allocator {
                c: cursors.unwrap_or_default(),
                reserved: 0,
            }),
            icache: Mutex::new(HashMap::new()),
            handles: Mutex::new(HashMap::new()),
            next_fh: AtomicU64::new(1),
            rename_lock: Mutex::new(()),
            prov: (self.variant == Variant::Prov).then(|| ProvState {
                next_seq: Mutex::new(prov_seq.unwrap_or(1)),
            }),
            clock: self.opts.clock.clone().unwrap_or_else(system_clock),
        }
    }

    fn core(&self) -> Result<&FsCore, Errno> {
        self.core.as_ref().ok_or(Errno::ESHUTDOWN)
    }

    /// Commits, checkpoints and flushes everything, then detaches.
    pub fn unmount(&mut self) -> Result<(), Errno> {
        let Some(core) = self.core.take() else {
            return Ok(());
        };
        core.journal.force_commit().map_err(tx::journal_err)?;
        core.journal.close().map_err(tx::journal_err)?;
        core.dev.sync_all().map_err(dev_err)?;
        core.dev.flush().map_err(dev_err)?;
        self.pending = Some(core.dev.clone());
        Ok(())
    }

    pub fn device(&self) -> Option<BlockDevice> {
        self.core.as_ref().map(|c| c.dev.clone())
    }

    pub fn journal(&self) -> Option<Arc<Journal>> {
        self.core.as_ref().map(|c| c.journal.clone())
    }

    pub fn superblock(&self) -> Option<Superblock> {
        self.core.as_ref().map(|c| c.sb)
    }

    pub fn open_handle_count(&self) -> usize {
        self.core.as_ref().map_or(0, |c| c.handles.lock().len())
    }

    /// Every block inode `ino` currently references, pointer blocks
    /// included.
    pub fn mapped_blocks(&self, ino: u64) -> Result<Vec<u64>, Errno> {
        let core = self.core()?;
        let g = core.lock_ino(ino)?;
        core.mapped_blocks_of(&g.disk)
    }

    /// Contents of the provenance log, empty if it does not exist yet.
    pub fn prov_log_bytes(&self) -> Result<Vec<u8>, Errno> {
        read_prov_log(self.core()?)
    }

    fn capsule(&self, core: FsCore) -> BentoCapsule {
        let handles: Vec<(u64, OpenFile)> = {
            let mut v: Vec<_> = core.handles.lock().iter().map(|(k, v)| (*k, *v)).collect();
            v.sort_by_key(|(fh, _)| *fh);
            v
        };
        let mut deferred_free = Vec::new();
        let mut lookups = Vec::new();
        for (ino, obj) in core.icache.lock().iter() {
            let st = obj.state.lock();
            if st.freed {
                continue;
            }
            if st.disk.nlink == 0 && st.opens > 0 {
                deferred_free.push((*ino, st.opens));
            }
            if st.lookups > 0 {
                lookups.push((*ino, st.lookups));
            }
        }
        deferred_free.sort_unstable();
        lookups.sort_unstable();
        let cursors = core.alloc.lock().c;
        let prov_next_seq = core.prov.as_ref().map(|p| *p.next_seq.lock());
        BentoCapsule {
            format_version: self.variant.capsule_version(),
            device: core.dev,
            journal: core.journal,
            superblock: core.sb,
            cursors,
            prov_next_seq,
            deferred_free,
            handles,
            lookups,
            next_fh: core.next_fh.load(Ordering::Relaxed),
        }
    }

    fn adopt(&mut self, cap: BentoCapsule) -> Result<(), (RefusalKind, BentoCapsule)> {
        let accepted = self.variant.capsule_version();
        if cap.format_version > accepted {
            return Err((
                RefusalKind::VersionMismatch {
                    found: cap.format_version,
                    accepted,
                },
                cap,
            ));
        }
        let core = self.build_core(
            cap.device.clone(),
            cap.journal.clone(),
            cap.superblock,
            Some(cap.cursors),
            cap.prov_next_seq,
        );
        if self.variant == Variant::Prov && cap.prov_next_seq.is_none() {
            match next_prov_seq(&core) {
                Ok(n) => *core.prov.as_ref().unwrap().next_seq.lock() = n,
                Err(e) => return Err((RefusalKind::Refused(format!("provenance log unreadable: {e}")), cap)),
            }
        }
        core.next_fh.store(cap.next_fh, Ordering::Relaxed);
        for (fh, h) in &cap.handles {
            match core.iget(h.ino) {
                Ok(obj) => obj.state.lock().opens += 1,
                Err(e) => {
                    return Err((
                        RefusalKind::Refused(format!("handle {fh} refers to inode {}: {e}", h.ino)),
                        cap,
                    ))
                }
            }
            core.handles.lock().insert(*fh, *h);
        }
        for (ino, n) in &cap.lookups {
            if let Ok(obj) = core.iget(*ino) {
                obj.state.lock().lookups = *n;
            }
        }
        for (ino, count) in &cap.deferred_free {
            let opens = core.iget(*ino).map(|o| o.state.lock().opens).unwrap_or(0);
            if opens != *count {
                log::warn!("deferred inode {ino}: capsule says {count} handles, table has {opens}");
            }
        }
        self.core = Some(core);
        Ok(())
    }
}

fn read_prov_log(core: &FsCore) -> Result<Vec<u8>, Errno> {
    match core.lock_ino(PROV_LOG_INO) {
        Ok(g) => core.read_data(&g.disk, 0, g.disk.size),
        Err(Errno::ENOENT) => Ok(Vec::new()),
        Err(e) => Err(e),
    }
}

fn next_prov_seq(core: &FsCore) -> Result<u64, MountError> {
    let bytes = read_prov_log(core).map_err(MountError::Fs)?;
    let parsed = prov_parse(&bytes)?;
    Ok(parsed.records.last().map_or(1, |r| r.seq + 1))
}

impl Drop for BentoFs {
    fn drop(&mut self) {
        if self.core.is_some() {
            if let Err(e) = self.unmount() {
                log::error!("unmount on drop failed: {e}");
            }
        }
    }
}

type R<T> = Result<T, Errno>;

impl FileSystem for BentoFs {
    fn init(&mut self, _ctx: &RequestContext, devname: &str, fc: &FcInfo) -> R<()> {
        if self.core.is_some() {
            return Err(Errno::EINVAL);
        }
        let dev = match self.pending.take() {
            Some(d) => d,
            None => BlockDevice::open(
                Path::new(devname),
                fc.block_size.unwrap_or(BLOCK_SIZE),
                DeviceOptions {
                    cache_capacity: self.opts.cache_capacity,
                },
            )
            .map_err(|e| {
                log::error!("cannot open {devname}: {e}");
                Errno::EIO
            })?,
        };
        self.mount_device(dev).map_err(|e| {
            log::error!("mount of {devname} failed: {e}");
            e.errno()
        })
    }

    fn destroy(&mut self, _ctx: &RequestContext) {
        if let Err(e) = self.unmount() {
            log::error!("destroy: {e}");
        }
    }

    fn update_prepare(&mut self) -> Option<TransferOut> {
        let core = self.core.take()?;
        Some(Box::new(self.capsule(core)))
    }

    fn update_transfer(&mut self, _ctx: &RequestContext, state: Option<TransferIn>) -> Result<(), TransferRefusal> {
        let Some(state) = state else {
            let Some(dev) = self.pending.take() else {
                return Err(TransferRefusal {
                    kind: RefusalKind::Refused("no device to mount".into()),
                    capsule: None,
                });
            };
            return self.mount_device(dev).map_err(|e| TransferRefusal {
                kind: RefusalKind::Refused(e.to_string()),
                capsule: None,
            });
        };
        let cap = match state.downcast::<BentoCapsule>() {
            Ok(c) => *c,
            Err(other) => {
                return Err(TransferRefusal {
                    kind: RefusalKind::Refused("not a Bento-fs capsule".into()),
                    capsule: Some(other),
                })
            }
        };
        self.adopt(cap).map_err(|(kind, cap)| TransferRefusal {
            kind,
            capsule: Some(Box::new(cap)),
        })
    }

    fn lookup(&self, _ctx: &RequestContext, parent: u64, name: &str) -> R<Entry> {
        self.core()?.op_lookup(parent, name)
    }
    fn forget(&self, _ctx: &RequestContext, ino: u64, nlookup: u64) -> R<()> {
        self.core()?.op_forget(ino, nlookup)
    }
    fn getattr(&self, _ctx: &RequestContext, ino: u64) -> R<FileAttr> {
        self.core()?.op_getattr(ino)
    }
    fn setattr(&self, _ctx: &RequestContext, ino: u64, _fh: Option<u64>, attr: &SetAttr) -> R<FileAttr> {
        self.core()?.op_setattr(ino, attr)
    }
    fn readlink(&self, _ctx: &RequestContext, ino: u64) -> R<Vec<u8>> {
        self.core()?.op_readlink(ino)
    }
    fn mknod(&self, ctx: &RequestContext, parent: u64, name: &str, mode: u32, _rdev: u32) -> R<Entry> {
        let t = mode & S_IFMT;
        if t != 0 && t != S_IFREG {
            return Err(Errno::EPERM);
        }
        let (e, _) =
            self.core()?
                .op_create_node(ctx, parent, name, InodeKind::RegularFile, mode as u16, None, None)?;
        Ok(e)
    }
    fn mkdir(&self, ctx: &RequestContext, parent: u64, name: &str, mode: u32) -> R<Entry> {
        let (e, _) = self
            .core()?
            .op_create_node(ctx, parent, name, InodeKind::Directory, mode as u16, None, None)?;
        Ok(e)
    }
    fn unlink(&self, ctx: &RequestContext, parent: u64, name: &str) -> R<()> {
        self.core()?.op_remove(ctx, parent, name, false)
    }
    fn rmdir(&self, ctx: &RequestContext, parent: u64, name: &str) -> R<()> {
        self.core()?.op_remove(ctx, parent, name, true)
    }
    fn symlink(&self, ctx: &RequestContext, parent: u64, name: &str, link: &str) -> R<Entry> {
        let (e, _) = self.core()?.op_create_node(
            ctx,
            parent,
            name,
            InodeKind::Symlink,
            0o777,
            Some(link.as_bytes()),
            None,
        )?;
        Ok(e)
    }
    fn rename(
        &self,
        ctx: &RequestContext,
        parent: u64,
        name: &str,
        newparent: u64,
        newname: &str,
        flags: u32,
    ) -> R<()> {
        self.core()?.op_rename(ctx, parent, name, newparent, newname, flags)
    }
    fn link(&self, _ctx: &RequestContext, ino: u64, newparent: u64, newname: &str) -> R<Entry> {
        self.core()?.op_link(ino, newparent, newname)
    }
    fn open(&self, ctx: &RequestContext, ino: u64, flags: u32) -> R<Opened> {
        self.core()?.op_open(ctx, ino, flags)
    }
    fn read(&self, _ctx: &RequestContext, ino: u64, fh: u64, offset: u64, size: u32) -> R<Vec<u8>> {
        self.core()?.op_read(ino, fh, offset, size)
    }
    fn write(&self, _ctx: &RequestContext, ino: u64, fh: u64, offset: u64, data: &[u8], _flags: u32) -> R<u32> {
        self.core()?.op_write(ino, fh, offset, data)
    }
    fn flush(&self, _ctx: &RequestContext, ino: u64, fh: u64) -> R<()> {
        self.core()?.handle_check(ino, fh)
    }
    fn release(&self, ctx: &RequestContext, ino: u64, fh: u64, _flags: u32) -> R<()> {
        self.core()?.op_release(ctx, ino, fh, false)
    }
    fn fsync(&self, _ctx: &RequestContext, ino: u64, fh: u64, _datasync: bool) -> R<()> {
        self.core()?.op_fsync(ino, fh)
    }
    fn opendir(&self, _ctx: &RequestContext, ino: u64, flags: u32) -> R<Opened> {
        self.core()?.op_opendir(ino, flags)
    }
    fn readdir(&self, _ctx: &RequestContext, ino: u64, fh: u64, offset: u64) -> R<Vec<DirEntry>> {
        self.core()?.op_readdir(ino, fh, offset)
    }
    fn releasedir(&self, ctx: &RequestContext, ino: u64, fh: u64) -> R<()> {
        self.core()?.op_release(ctx, ino, fh, true)
    }
    fn fsyncdir(&self, _ctx: &RequestContext, ino: u64, fh: u64, _datasync: bool) -> R<()> {
        self.core()?.op_fsync(ino, fh)
    }
    fn statfs(&self, _ctx: &RequestContext, _ino: u64) -> R<Statfs> {
        self.core()?.op_statfs()
    }
    fn access(&self, ctx: &RequestContext, ino: u64, mask: u32) -> R<()> {
        self.core()?.op_access(ctx, ino, mask)
    }
    fn create(&self, ctx: &RequestContext, parent: u64, name: &str, mode: u32, flags: u32) -> R<(Entry, Opened)> {
        let (e, o) = self.core()?.op_create_node(
            ctx,
            parent,
            name,
            InodeKind::RegularFile,
            mode as u16,
            None,
            Some(flags),
        )?;
        Ok((e, o.expect("create opens the file")))
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

impl BentoFs {
    /// Downcasts a dispatcher-held instance.
    pub fn from_dyn(fs: &dyn FileSystem) -> Option<&BentoFs> {
        fs.as_any().downcast_ref::<BentoFs>()
    }
}

impl std::fmt::Debug for BentoFs {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BentoFs")
            .field("variant", &self.variant)
            .field("mounted", &self.core.is_some())
            .finish()
    }
}
