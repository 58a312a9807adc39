//! Per-operation transactions, block/inode allocation and the inode cache.

use std::sync::Arc;

use parking_lot::{ArcMutexGuard, Mutex, RawMutex};

use crate::blockdev::DeviceError;
use crate::errno::Errno;
use crate::journal::{JournalError, TransactionHandle};

use super::core::FsCore;
use super::layout::{bit_is_set, set_bit, DiskInode, InodeKind, BITS_PER_BLOCK, INODE_SIZE, PROV_LOG_INO};

pub(crate) fn dev_err(e: DeviceError) -> Errno {
    log::error!("device error: {e}");
    Errno::EIO
}

pub(crate) fn journal_err(e: JournalError) -> Errno {
    match e {
        JournalError::Shutdown => Errno::ESHUTDOWN,
        e => {
            log::error!("journal error: {e}");
            Errno::EIO
        }
    }
}

/// One operation's view of the running journal transaction.
pub(crate) struct Tx<'a> {
    pub(crate) core: &'a FsCore,
    h: TransactionHandle,
    /// Free blocks set aside for this operation.
    reserved: u64,
}

impl Drop for Tx<'_> {
    fn drop(&mut self) {
        if self.reserved > 0 {
            self.core.alloc.lock().reserved -= self.reserved;
        }
    }
}

impl<'a> Tx<'a> {
    pub(crate) fn begin(core: &'a FsCore, credits: u32) -> Result<Tx<'a>, Errno> {
        let credits = credits.min(core.journal.capacity() as u32);
        let h = core.journal.begin_op(credits).map_err(journal_err)?;
        Ok(Tx { core, h, reserved: 0 })
    }

    /// Sets aside `n` free blocks so that later allocations in this
    /// operation cannot fail for lack of space.
    pub(crate) fn reserve(&mut self, n: u64) -> Result<(), Errno> {
        let mut a = self.core.alloc.lock();
        if a.c.free_blocks < a.reserved + n {
            return Err(Errno::ENOSPC);
        }
        a.reserved += n;
        self.reserved += n;
        Ok(())
    }

    /// Tops up this operation's reservation to at least `n` blocks.
    pub(crate) fn ensure_reserved(&mut self, n: u64) -> Result<(), Errno> {
        if self.reserved < n {
            self.reserve(n - self.reserved)?;
        }
        Ok(())
    }

    /// Credits not yet spent on distinct blocks.
    pub(crate) fn remaining(&self) -> u32 {
        self.h.credits() - self.h.used()
    }

    /// Applies `f` to block `b` under a write lease and captures the result.
    pub(crate) fn modify<R>(&mut self, b: u64, f: impl FnOnce(&mut [u8]) -> R) -> Result<R, Errno> {
        let mut bh = self.core.dev.getblk(b).map_err(dev_err)?;
        let r = f(bh.data_mut());
        self.core
            .journal
            .journal_write(&mut self.h, &mut bh)
            .map_err(journal_err)?;
        Ok(r)
    }

    pub(crate) fn overwrite(&mut self, b: u64, data: &[u8]) -> Result<(), Errno> {
        self.modify(b, |d| d.copy_from_slice(data))
    }

    pub(crate) fn zero(&mut self, b: u64) -> Result<(), Errno> {
        self.modify(b, |d| d.fill(0))
    }

    /// Declares block `b` freed by this operation.
    pub(crate) fn forget(&mut self, b: u64) -> Result<(), Errno> {
        self.core.journal.forget(&mut self.h, b).map_err(journal_err)
    }

    pub(crate) fn write_inode(&mut self, ino: u64, disk: &DiskInode) -> Result<(), Errno> {
        let (b, off) = self.core.sb.inode_location(ino);
        self.modify(b, |d| disk.encode_into(&mut d[off..off + INODE_SIZE]))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AllocCursors {
    pub block_cursor: u64,
    pub inode_cursor: u64,
    pub free_blocks: u64,
    pub free_inodes: u64,
}

/// Next-fit allocator over the on-disk bitmaps.
pub(crate) struct Allocator {
    pub(crate) c: AllocCursors,
    /// Blocks promised to running operations.
    pub(crate) reserved: u64,
}

impl FsCore {
    /// Counts free blocks and inodes by scanning the bitmaps.
    pub(crate) fn scan_cursors(&self) -> Result<AllocCursors, Errno> {
        let sb = &self.sb;
        let mut free_blocks = 0;
        for blk in 0..sb.block_bitmap_blocks() {
            let lo = sb.data_start().max(blk * BITS_PER_BLOCK);
            let hi = sb.total_blocks().min((blk + 1) * BITS_PER_BLOCK);
            if lo >= hi {
                continue;
            }
            let bh = self.dev.bread(u64::from(sb.block_bitmap_start) + blk).map_err(dev_err)?;
            free_blocks += (lo..hi)
                .filter(|&b| !bit_is_set(bh.data(), sb.block_bit(b).1))
                .count() as u64;
        }
        let mut free_inodes = 0;
        for blk in 0..sb.inode_bitmap_blocks() {
            let bh = self.dev.bread(u64::from(sb.inode_bitmap_start) + blk).map_err(dev_err)?;
            let first = blk * BITS_PER_BLOCK + 1;
            let last = sb.inode_count().min(first + BITS_PER_BLOCK - 1);
            free_inodes += (first..=last)
                .filter(|&ino| !bit_is_set(bh.data(), sb.inode_bit(ino).1))
                .count() as u64;
        }
        Ok(AllocCursors {
            block_cursor: sb.data_start(),
            inode_cursor: 1,
            free_blocks,
            free_inodes,
        })
    }

    /// Allocates a data block. Its contents are whatever was there before;
    /// callers overwrite it.
    pub(crate) fn alloc_block(&self, tx: &mut Tx<'_>) -> Result<u64, Errno> {
        let sb = &self.sb;
        let mut a = self.alloc.lock();
        let from_reserve = tx.reserved > 0;
        if !from_reserve && a.c.free_blocks <= a.reserved {
            return Err(Errno::ENOSPC);
        }
        let span = sb.total_blocks() - sb.data_start();
        let start = a.c.block_cursor.clamp(sb.data_start(), sb.total_blocks() - 1);
        let mut scanned = 0;
        let mut b = start;
        while scanned < span {
            let (bb, bit) = sb.block_bit(b);
            let found = {
                let bh = self.dev.bread(bb).map_err(dev_err)?;
                let data = bh.data();
                let block_end = sb
                    .total_blocks()
                    .min((bb - u64::from(sb.block_bitmap_start) + 1) * BITS_PER_BLOCK);
                let mut x = b;
                let mut bit = bit;
                let mut hit = None;
                while x < block_end {
                    if bit % 8 == 0 && data[bit / 8] == 0xff && x + 8 <= block_end {
                        x += 8;
                        bit += 8;
                        scanned += 8;
                        continue;
                    }
                    if !bit_is_set(data, bit) {
                        hit = Some(x);
                        break;
                    }
                    x += 1;
                    bit += 1;
                    scanned += 1;
                }
                if hit.is_none() {
                    b = if block_end >= sb.total_blocks() { sb.data_start() } else { block_end };
                }
                hit
            };
            if let Some(x) = found {
                let (bb, bit) = sb.block_bit(x);
                tx.modify(bb, |d| set_bit(d, bit, true))?;
                a.c.free_blocks -= 1;
                if from_reserve {
                    a.reserved -= 1;
                    tx.reserved -= 1;
                }
                a.c.block_cursor = if x + 1 >= sb.total_blocks() { sb.data_start() } else { x + 1 };
                return Ok(x);
            }
        }
        Err(Errno::ENOSPC)
    }

    pub(crate) fn free_block(&self, tx: &mut Tx<'_>, b: u64) -> Result<(), Errno> {
        debug_assert!(self.sb.is_data_block(b), "freeing non-data block {b}");
        let (bb, bit) = self.sb.block_bit(b);
        let mut a = self.alloc.lock();
        tx.modify(bb, |d| set_bit(d, bit, false))?;
        tx.forget(b)?;
        a.c.free_blocks += 1;
        Ok(())
    }

    /// Allocates an inode number, skipping the provenance log's reserved
    /// number. The inode record itself is written by the caller.
    pub(crate) fn alloc_inode(&self, tx: &mut Tx<'_>) -> Result<u64, Errno> {
        let sb = &self.sb;
        let mut a = self.alloc.lock();
        let n = sb.inode_count();
        let mut ino = a.c.inode_cursor.clamp(1, n);
        for _ in 0..n {
            if ino != PROV_LOG_INO {
                let (bb, bit) = sb.inode_bit(ino);
                let free = {
                    let bh = self.dev.bread(bb).map_err(dev_err)?;
                    !bit_is_set(bh.data(), bit)
                };
                if free {
                    tx.modify(bb, |d| set_bit(d, bit, true))?;
                    a.c.free_inodes -= 1;
                    a.c.inode_cursor = if ino == n { 1 } else { ino + 1 };
                    return Ok(ino);
                }
            }
            ino = if ino == n { 1 } else { ino + 1 };
        }
        Err(Errno::ENOSPC)
    }

    /// Claims a specific inode number (the provenance log).
    pub(crate) fn claim_inode(&self, tx: &mut Tx<'_>, ino: u64) -> Result<bool, Errno> {
        let (bb, bit) = self.sb.inode_bit(ino);
        let mut a = self.alloc.lock();
        let was_free = tx.modify(bb, |d| {
            let free = !bit_is_set(d, bit);
            set_bit(d, bit, true);
            free
        })?;
        if was_free {
            a.c.free_inodes -= 1;
        }
        Ok(was_free)
    }

    pub(crate) fn free_inode_bit(&self, tx: &mut Tx<'_>, ino: u64) -> Result<(), Errno> {
        let (bb, bit) = self.sb.inode_bit(ino);
        let mut a = self.alloc.lock();
        tx.modify(bb, |d| set_bit(d, bit, false))?;
        a.c.free_inodes += 1;
        Ok(())
    }

    pub(crate) fn read_disk_inode(&self, ino: u64) -> Result<DiskInode, Errno> {
        let (b, off) = self.sb.inode_location(ino);
        let bh = self.dev.bread(b).map_err(dev_err)?;
        DiskInode::decode(&bh.data()[off..off + INODE_SIZE]).ok_or_else(|| {
            log::error!("inode {ino} has an invalid kind");
            Errno::EIO
        })
    }

    /// Cached in-memory inode. Fails with `ENOENT` for a free inode.
    pub(crate) fn iget(&self, ino: u64) -> Result<Arc<InodeObj>, Errno> {
        if !self.sb.is_valid_ino(ino) {
            return Err(Errno::ENOENT);
        }
        let mut cache = self.icache.lock();
        if let Some(obj) = cache.get(&ino) {
            return Ok(obj.clone());
        }
        let disk = self.read_disk_inode(ino)?;
        if disk.kind == InodeKind::Free {
            return Err(Errno::ENOENT);
        }
        let obj = Arc::new(InodeObj {
            state: Arc::new(Mutex::new(InodeState {
                disk,
                opens: 0,
                lookups: 0,
                freed: false,
            })),
        });
        cache.insert(ino, obj.clone());
        Ok(obj)
    }

    /// Inserts a freshly initialized inode into the cache.
    pub(crate) fn iput_new(&self, ino: u64, disk: DiskInode) -> Arc<InodeObj> {
        let obj = Arc::new(InodeObj {
            state: Arc::new(Mutex::new(InodeState {
                disk,
                opens: 0,
                lookups: 0,
                freed: false,
            })),
        });
        self.icache.lock().insert(ino, obj.clone());
        obj
    }

    pub(crate) fn ievict(&self, ino: u64) {
        self.icache.lock().remove(&ino);
    }

    /// Locks one inode, failing with `ENOENT` if it has been freed.
    pub(crate) fn lock_ino(&self, ino: u64) -> Result<InodeGuard, Errno> {
        let g = self.iget(ino)?.state.lock_arc();
        if g.freed {
            return Err(Errno::ENOENT);
        }
        Ok(InodeGuard { g })
    }
}

pub(crate) struct InodeObj {
    pub(crate) state: Arc<Mutex<InodeState>>,
}

pub(crate) struct InodeState {
    pub(crate) disk: DiskInode,
    /// Open file handles referring to this inode.
    pub(crate) opens: u32,
    pub(crate) lookups: u64,
    /// Set once the inode has been released to the allocator.
    pub(crate) freed: bool,
}

pub(crate) struct InodeGuard {
    pub(crate) g: ArcMutexGuard<RawMutex, InodeState>,
}

impl std::ops::Deref for InodeGuard {
    type Target = InodeState;
    fn deref(&self) -> &InodeState {
        &self.g
    }
}

impl std::ops::DerefMut for InodeGuard {
    fn deref_mut(&mut self) -> &mut InodeState {
        &mut self.g
    }
}
