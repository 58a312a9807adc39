//! Shared state of a mounted instance: block mapping, file data, truncation
//! and directory block stores.

use std::collections::HashMap;
use std::sync::atomic::AtomicU64;
use std::sync::Arc;

use parking_lot::Mutex;

use crate::blockdev::BlockDevice;
use crate::errno::Errno;
use crate::fsapi::Timespec;
use crate::journal::Journal;

use super::dirtree::DirStore;
use super::layout::{
    block_path, ptr_at, set_ptr, BlockPath, DiskInode, Superblock, BLOCK_SIZE, MAX_FILE_BLOCKS, NDIRECT,
    PTRS_PER_BLOCK,
};
use super::tx::{dev_err, Allocator, InodeObj, Tx};

const BS: u64 = BLOCK_SIZE as u64;

/// Source of inode timestamps.
pub type Clock = Arc<dyn Fn() -> Timespec + Send + Sync>;

pub fn system_clock() -> Clock {
    Arc::new(|| {
        let d = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .unwrap_or_default();
        Timespec::new(d.as_secs(), d.subsec_nanos())
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OpenFile {
    pub ino: u64,
    pub flags: u32,
    pub is_dir: bool,
}

pub(crate) struct ProvState {
    /// Sequence number of the next record; the lock also serializes appends.
    pub(crate) next_seq: Mutex<u64>,
}

pub(crate) struct FsCore {
    pub(crate) dev: BlockDevice,
    pub(crate) journal: Arc<Journal>,
    pub(crate) sb: Superblock,
    pub(crate) alloc: Mutex<Allocator>,
    pub(crate) icache: Mutex<HashMap<u64, Arc<InodeObj>>>,
    pub(crate) handles: Mutex<HashMap<u64, OpenFile>>,
    pub(crate) next_fh: AtomicU64,
    /// Held across directory renames so the ancestry check sees a stable tree.
    pub(crate) rename_lock: Mutex<()>,
    pub(crate) prov: Option<ProvState>,
    pub(crate) clock: Clock,
}

impl FsCore {
    pub(crate) fn now(&self) -> Timespec {
        (self.clock)()
    }

    fn read_ptr(&self, b: u64, idx: usize) -> Result<u64, Errno> {
        let bh = self.dev.bread(b).map_err(dev_err)?;
        Ok(u64::from(ptr_at(bh.data(), idx)))
    }

    fn checked(&self, b: u64) -> Result<Option<u64>, Errno> {
        if b == 0 {
            Ok(None)
        } else if self.sb.is_data_block(b) {
            Ok(Some(b))
        } else {
            log::error!("block pointer {b} outside the data region");
            Err(Errno::EIO)
        }
    }

    /// Device block holding file block `fb`, if mapped.
    pub(crate) fn bmap(&self, d: &DiskInode, fb: u64) -> Result<Option<u64>, Errno> {
        let Some(path) = block_path(fb) else {
            return Ok(None);
        };
        let b = match path {
            BlockPath::Direct(i) => u64::from(d.direct[i]),
            BlockPath::Indirect(i) => match self.checked(u64::from(d.indirect))? {
                None => 0,
                Some(ind) => self.read_ptr(ind, i)?,
            },
            BlockPath::Double(i, j) => match self.checked(u64::from(d.dindirect))? {
                None => 0,
                Some(dind) => match self.checked(self.read_ptr(dind, i)?)? {
                    None => 0,
                    Some(l1) => self.read_ptr(l1, j)?,
                },
            },
        };
        self.checked(b)
    }

    /// Maps file block `fb`, allocating it and any pointer blocks on the way.
    /// Returns the block and whether it was newly allocated; a new block's
    /// contents are stale and must be overwritten by the caller.
    pub(crate) fn bmap_alloc(&self, tx: &mut Tx<'_>, d: &mut DiskInode, fb: u64) -> Result<(u64, bool), Errno> {
        if let Some(b) = self.bmap(d, fb)? {
            return Ok((b, false));
        }
        let path = block_path(fb).ok_or(Errno::EFBIG)?;
        let need = 1 + match path {
            BlockPath::Direct(_) => 0,
            BlockPath::Indirect(_) => u64::from(d.indirect == 0),
            BlockPath::Double(i, _) => {
                if d.dindirect == 0 {
                    2
                } else {
                    u64::from(self.read_ptr(u64::from(d.dindirect), i)? == 0)
                }
            }
        };
        tx.ensure_reserved(need)?;
        let b = match path {
            BlockPath::Direct(i) => {
                let b = self.alloc_block(tx)?;
                d.direct[i] = b as u32;
                b
            }
            BlockPath::Indirect(i) => {
                if d.indirect == 0 {
                    let ib = self.alloc_block(tx)?;
                    tx.zero(ib)?;
                    d.indirect = ib as u32;
                }
                let b = self.alloc_block(tx)?;
                tx.modify(u64::from(d.indirect), |x| set_ptr(x, i, b as u32))?;
                b
            }
            BlockPath::Double(i, j) => {
                if d.dindirect == 0 {
                    let db = self.alloc_block(tx)?;
                    tx.zero(db)?;
                    d.dindirect = db as u32;
                }
                let dind = u64::from(d.dindirect);
                let mut l1 = self.read_ptr(dind, i)?;
                if l1 == 0 {
                    l1 = self.alloc_block(tx)?;
                    tx.zero(l1)?;
                    tx.modify(dind, |x| set_ptr(x, i, l1 as u32))?;
                }
                let b = self.alloc_block(tx)?;
                tx.modify(l1, |x| set_ptr(x, j, b as u32))?;
                b
            }
        };
        Ok((b, true))
    }

    /// Reads up to `len` bytes at `off`; holes read as zeros.
    pub(crate) fn read_data(&self, d: &DiskInode, off: u64, len: u64) -> Result<Vec<u8>, Errno> {
        if off >= d.size {
            return Ok(Vec::new());
        }
        let end = d.size.min(off.saturating_add(len));
        let mut out = Vec::with_capacity((end - off) as usize);
        let mut pos = off;
        while pos < end {
            let fb = pos / BS;
            let within = (pos % BS) as usize;
            let n = ((BS - pos % BS).min(end - pos)) as usize;
            match self.bmap(d, fb)? {
                Some(b) => {
                    let bh = self.dev.bread(b).map_err(dev_err)?;
                    out.extend_from_slice(&bh.data()[within..within + n]);
                }
                None => out.resize(out.len() + n, 0),
            }
            pos += n as u64;
        }
        Ok(out)
    }

    /// Writes as much of `data` at `off` as this transaction's credits
    /// allow and returns the byte count. Updates `d.size` but does not write
    /// the inode.
    pub(crate) fn write_data(
        &self,
        tx: &mut Tx<'_>,
        d: &mut DiskInode,
        off: u64,
        data: &[u8],
    ) -> Result<usize, Errno> {
        // One block can cost a data block, two pointer blocks, their bitmap
        // blocks and the inode.
        const PER_BLOCK: u32 = 8;
        let mut done = 0;
        while done < data.len() && tx.remaining() >= PER_BLOCK {
            let pos = off + done as u64;
            let fb = pos / BS;
            let within = (pos % BS) as usize;
            let n = (BLOCK_SIZE - within).min(data.len() - done);
            let chunk = &data[done..done + n];
            let (b, fresh) = match self.bmap_alloc(tx, d, fb) {
                Ok(x) => x,
                Err(e) if done > 0 && e == Errno::ENOSPC => break,
                Err(e) => return Err(e),
            };
            if n == BLOCK_SIZE {
                tx.overwrite(b, chunk)?;
            } else if fresh {
                let mut buf = vec![0; BLOCK_SIZE];
                buf[within..within + n].copy_from_slice(chunk);
                tx.overwrite(b, &buf)?;
            } else {
                tx.modify(b, |x| x[within..within + n].copy_from_slice(chunk))?;
            }
            done += n;
            d.size = d.size.max(pos + n as u64);
        }
        Ok(done)
    }

    /// Frees blocks beyond `new_size`, working back from the end, until done
    /// or the transaction runs low on credits. Returns true when the inode
    /// has reached `new_size`. The inode is not written.
    pub(crate) fn shrink(&self, tx: &mut Tx<'_>, d: &mut DiskInode, new_size: u64) -> Result<bool, Errno> {
        if new_size >= d.size {
            return Ok(true);
        }
        let keep = new_size.div_ceil(BS);
        if new_size % BS != 0 {
            if let Some(b) = self.bmap(d, keep - 1)? {
                let from = (new_size % BS) as usize;
                tx.modify(b, |x| x[from..].fill(0))?;
            }
        }
        let n = NDIRECT as u64;
        let ppb = PTRS_PER_BLOCK;
        let mut fb = d.size.div_ceil(BS).min(MAX_FILE_BLOCKS);
        while fb > keep {
            if tx.remaining() < 6 {
                d.size = d.size.min(fb * BS);
                return Ok(false);
            }
            let x = fb - 1;
            match block_path(x).expect("file block within the cap") {
                BlockPath::Direct(i) => {
                    if d.direct[i] != 0 {
                        self.free_block(tx, u64::from(d.direct[i]))?;
                        d.direct[i] = 0;
                    }
                    fb = x;
                }
                BlockPath::Indirect(i) => {
                    let ind = u64::from(d.indirect);
                    if ind == 0 {
                        fb = n;
                        continue;
                    }
                    let b = self.read_ptr(ind, i)?;
                    if b != 0 {
                        self.free_block(tx, b)?;
                        tx.modify(ind, |p| set_ptr(p, i, 0))?;
                    }
                    if i == 0 {
                        self.free_block(tx, ind)?;
                        d.indirect = 0;
                    }
                    fb = x;
                }
                BlockPath::Double(i, j) => {
                    let dind = u64::from(d.dindirect);
                    if dind == 0 {
                        fb = n + ppb;
                        continue;
                    }
                    let l1 = self.read_ptr(dind, i)?;
                    if l1 != 0 {
                        let b = self.read_ptr(l1, j)?;
                        if b != 0 {
                            self.free_block(tx, b)?;
                            tx.modify(l1, |p| set_ptr(p, j, 0))?;
                        }
                    }
                    let level_done = l1 == 0 || j == 0;
                    if level_done {
                        if l1 != 0 {
                            self.free_block(tx, l1)?;
                            tx.modify(dind, |p| set_ptr(p, i, 0))?;
                        }
                        if i == 0 {
                            self.free_block(tx, dind)?;
                            d.dindirect = 0;
                        }
                    }
                    fb = if l1 == 0 { x - j as u64 } else { x };
                }
            }
        }
        d.size = new_size;
        Ok(true)
    }

    /// Every block the inode references, pointer blocks included.
    pub(crate) fn mapped_blocks_of(&self, d: &DiskInode) -> Result<Vec<u64>, Errno> {
        let mut out: Vec<u64> = d.direct.iter().filter(|&&p| p != 0).map(|&p| u64::from(p)).collect();
        if let Some(ind) = self.checked(u64::from(d.indirect))? {
            out.push(ind);
            out.extend(self.nonzero_ptrs(ind)?);
        }
        if let Some(dind) = self.checked(u64::from(d.dindirect))? {
            out.push(dind);
            for l1 in self.nonzero_ptrs(dind)? {
                out.push(l1);
                out.extend(self.nonzero_ptrs(l1)?);
            }
        }
        Ok(out)
    }

    fn nonzero_ptrs(&self, b: u64) -> Result<Vec<u64>, Errno> {
        let bh = self.dev.bread(b).map_err(dev_err)?;
        let mut out = Vec::new();
        for i in 0..PTRS_PER_BLOCK as usize {
            if let Some(p) = self.checked(u64::from(ptr_at(bh.data(), i)))? {
                out.push(p);
            }
        }
        Ok(out)
    }
}

/// Read-only view of a directory's blocks.
pub(crate) struct ReadDir<'c> {
    pub(crate) core: &'c FsCore,
    pub(crate) d: &'c DiskInode,
}

impl DirStore for ReadDir<'_> {
    fn nblocks(&self) -> u64 {
        self.d.size / BS
    }
    fn read_block(&mut self, fb: u64) -> Result<Vec<u8>, Errno> {
        let b = self.core.bmap(self.d, fb)?.ok_or(Errno::EIO)?;
        Ok(self.core.dev.bread(b).map_err(dev_err)?.data().to_vec())
    }
    fn write_block(&mut self, _fb: u64, _data: &[u8]) -> Result<(), Errno> {
        Err(Errno::EROFS)
    }
    fn append_block(&mut self, _data: &[u8]) -> Result<u64, Errno> {
        Err(Errno::EROFS)
    }
}

/// Directory blocks modified inside a transaction. The caller writes the
/// inode afterwards.
pub(crate) struct WriteDir<'t, 'a> {
    pub(crate) tx: &'t mut Tx<'a>,
    pub(crate) d: &'t mut DiskInode,
}

impl DirStore for WriteDir<'_, '_> {
    fn nblocks(&self) -> u64 {
        self.d.size / BS
    }
    fn read_block(&mut self, fb: u64) -> Result<Vec<u8>, Errno> {
        let core = self.tx.core;
        let b = core.bmap(self.d, fb)?.ok_or(Errno::EIO)?;
        Ok(core.dev.bread(b).map_err(dev_err)?.data().to_vec())
    }
    fn write_block(&mut self, fb: u64, data: &[u8]) -> Result<(), Errno> {
        let core = self.tx.core;
        let b = core.bmap(self.d, fb)?.ok_or(Errno::EIO)?;
        self.tx.overwrite(b, data)
    }
    fn append_block(&mut self, data: &[u8]) -> Result<u64, Errno> {
        let core = self.tx.core;
        let fb = self.nblocks();
        let (b, _) = core.bmap_alloc(self.tx, self.d, fb)?;
        self.tx.overwrite(b, data)?;
        self.d.size += BS;
        Ok(fb)
    }
}
