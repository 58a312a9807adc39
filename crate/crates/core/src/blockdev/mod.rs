//! Block device over a disk-image file (or an in-memory image) with a buffer
//! cache handing out leased [`BufferHead`]s.
//!
//! Leases follow reader-writer rules per block: any number of read leases
//! (`bread`) or a single write lease (`getblk`). When the last lease on a block
//! ends the entry becomes evictable; dirty entries are written back before
//! eviction. Blocks pinned by the journal are never evicted nor written back by
//! the cache, since their home location must not be updated before commit.

mod image;
mod trace;

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io;
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{
    ArcRwLockReadGuard, ArcRwLockWriteGuard, Mutex, RawRwLock, RwLock,
};
use thiserror::Error;

use crate::hash::fnv1a64;

pub use image::MemImage;
pub use trace::{ReplayError, TraceEvent, TraceMode, TraceParseError, WriteTrace};

pub const DEFAULT_BLOCK_SIZE: usize = 4096;
pub const DEFAULT_CACHE_CAPACITY: usize = 1024;

#[derive(Debug, Error)]
pub enum DeviceError {
    #[error("image length {len} is not a nonzero multiple of block size {block_size}")]
    BadImage { len: u64, block_size: usize },
    #[error("block size {0} is not a power of two")]
    BadBlockSize(usize),
    #[error("block {blockno} out of range (device has {block_count} blocks)")]
    OutOfRange { blockno: u64, block_count: u64 },
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

#[derive(Clone, Debug)]
pub struct DeviceOptions {
    pub cache_capacity: usize,
}

impl Default for DeviceOptions {
    fn default() -> Self {
        DeviceOptions {
            cache_capacity: DEFAULT_CACHE_CAPACITY,
        }
    }
}

/// Counters of image-level I/O.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DeviceStats {
    pub image_reads: u64,
    pub image_writes: u64,
    pub flushes: u64,
}

enum Storage {
    File(File),
    Memory(RwLock<MemImage>),
}

struct EntryData {
    bytes: Box<[u8]>,
    dirty: bool,
    loaded: bool,
}

struct Entry {
    data: Arc<RwLock<EntryData>>,
}

struct Slot {
    entry: Arc<Entry>,
    leases: usize,
    pins: usize,
    tick: Option<u64>,
}

#[derive(Default)]
struct CacheInner {
    slots: HashMap<u64, Slot>,
    lru: BTreeMap<u64, u64>,
    next_tick: u64,
}

#[derive(Default)]
struct TraceState {
    mode: Option<TraceMode>,
    events: Vec<TraceEvent>,
    overlay: Option<HashMap<u64, Arc<[u8]>>>,
}

struct DeviceInner {
    path: Option<PathBuf>,
    block_size: usize,
    block_count: u64,
    capacity: usize,
    storage: Storage,
    cache: Mutex<CacheInner>,
    // Serializes image mutation with trace recording so that events are
    // appended in exactly the order the image sees them.
    trace: Mutex<TraceState>,
    image_reads: AtomicU64,
    image_writes: AtomicU64,
    flushes: AtomicU64,
}

/// Shared handle to a block device and its buffer cache.
#[derive(Clone)]
pub struct BlockDevice {
    inner: Arc<DeviceInner>,
}

impl std::fmt::Debug for BlockDevice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BlockDevice")
            .field("path", &self.inner.path)
            .field("block_size", &self.inner.block_size)
            .field("block_count", &self.inner.block_count)
            .finish()
    }
}

/// Creates (or truncates) a zero-filled image file.
pub fn create_image(path: &Path, block_size: usize, block_count: u64) -> Result<(), DeviceError> {
    let f = OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(true)
        .open(path)?;
    f.set_len(block_size as u64 * block_count)?;
    Ok(())
}

/// Opens a disk-image file as a block device.
pub fn open_device(path: impl AsRef<Path>, block_size: usize) -> Result<BlockDevice, DeviceError> {
    BlockDevice::open(path, block_size, DeviceOptions::default())
}

impl BlockDevice {
    pub fn open(
        path: impl AsRef<Path>,
        block_size: usize,
        opts: DeviceOptions,
    ) -> Result<BlockDevice, DeviceError> {
        check_block_size(block_size)?;
        let path = path.as_ref();
        let file = OpenOptions::new().read(true).write(true).open(path)?;
        let len = file.metadata()?.len();
        if len == 0 || len % block_size as u64 != 0 {
            return Err(DeviceError::BadImage { len, block_size });
        }
        Ok(Self::build(
            Some(path.to_path_buf()),
            block_size,
            len / block_size as u64,
            Storage::File(file),
            opts,
        ))
    }

    pub fn memory(image: MemImage, opts: DeviceOptions) -> Result<BlockDevice, DeviceError> {
        check_block_size(image.block_size())?;
        if image.block_count() == 0 {
            return Err(DeviceError::BadImage {
                len: 0,
                block_size: image.block_size(),
            });
        }
        Ok(Self::build(
            None,
            image.block_size(),
            image.block_count(),
            Storage::Memory(RwLock::new(image)),
            opts,
        ))
    }

    fn build(
        path: Option<PathBuf>,
        block_size: usize,
        block_count: u64,
        storage: Storage,
        opts: DeviceOptions,
    ) -> BlockDevice {
        BlockDevice {
            inner: Arc::new(DeviceInner {
                path,
                block_size,
                block_count,
                capacity: opts.cache_capacity.max(1),
                storage,
                cache: Mutex::new(CacheInner::default()),
                trace: Mutex::new(TraceState::default()),
                image_reads: AtomicU64::new(0),
                image_writes: AtomicU64::new(0),
                flushes: AtomicU64::new(0),
            }),
        }
    }

    pub fn path(&self) -> Option<&Path> {
        self.inner.path.as_deref()
    }

    pub fn block_size(&self) -> usize {
        self.inner.block_size
    }

    pub fn block_count(&self) -> u64 {
        self.inner.block_count
    }

    pub fn same_device(&self, other: &BlockDevice) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }

    pub fn stats(&self) -> DeviceStats {
        DeviceStats {
            image_reads: self.inner.image_reads.load(Ordering::Relaxed),
            image_writes: self.inner.image_writes.load(Ordering::Relaxed),
            flushes: self.inner.flushes.load(Ordering::Relaxed),
        }
    }

    fn check_range(&self, blockno: u64) -> Result<(), DeviceError> {
        if blockno >= self.inner.block_count {
            Err(DeviceError::OutOfRange {
                blockno,
                block_count: self.inner.block_count,
            })
        } else {
            Ok(())
        }
    }

    // ---- cached access -------------------------------------------------

    /// Read lease on a block.
    pub fn bread(&self, blockno: u64) -> Result<BufferHead, DeviceError> {
        self.check_range(blockno)?;
        let entry = self.acquire_slot(blockno);
        let guard = entry.data.read_arc();
        let guard = if guard.loaded {
            guard
        } else {
            drop(guard);
            let mut w = entry.data.write_arc();
            if let Err(e) = self.load(blockno, &mut w) {
                drop(w);
                self.release_slot(blockno);
                return Err(e);
            }
            ArcRwLockWriteGuard::downgrade(w)
        };
        Ok(BufferHead {
            dev: self.clone(),
            blockno,
            lease: Some(Lease::Read(guard)),
        })
    }

    /// Write lease on a block; blocks while any other lease is live.
    pub fn getblk(&self, blockno: u64) -> Result<BufferHead, DeviceError> {
        self.check_range(blockno)?;
        let entry = self.acquire_slot(blockno);
        let mut guard = entry.data.write_arc();
        if !guard.loaded {
            if let Err(e) = self.load(blockno, &mut guard) {
                drop(guard);
                self.release_slot(blockno);
                return Err(e);
            }
        }
        Ok(BufferHead {
            dev: self.clone(),
            blockno,
            lease: Some(Lease::Write(guard)),
        })
    }

    fn load(&self, blockno: u64, data: &mut EntryData) -> Result<(), DeviceError> {
        if !data.loaded {
            self.read_image(blockno, &mut data.bytes)?;
            data.loaded = true;
            data.dirty = false;
        }
        Ok(())
    }

    fn acquire_slot(&self, blockno: u64) -> Arc<Entry> {
        let mut cache = self.inner.cache.lock();
        let bs = self.inner.block_size;
        let CacheInner { slots, lru, .. } = &mut *cache;
        let slot = slots.entry(blockno).or_insert_with(|| Slot {
            entry: Arc::new(Entry {
                data: Arc::new(RwLock::new(EntryData {
                    bytes: vec![0; bs].into_boxed_slice(),
                    dirty: false,
                    loaded: false,
                })),
            }),
            leases: 0,
            pins: 0,
            tick: None,
        });
        slot.leases += 1;
        if let Some(t) = slot.tick.take() {
            lru.remove(&t);
        }
        slot.entry.clone()
    }

    fn release_slot(&self, blockno: u64) {
        let mut cache = self.inner.cache.lock();
        if let Some(slot) = cache.slots.get_mut(&blockno) {
            slot.leases -= 1;
        }
        self.make_evictable(&mut cache, blockno);
        self.evict_excess(&mut cache);
    }

    fn make_evictable(&self, cache: &mut CacheInner, blockno: u64) {
        let tick = cache.next_tick;
        let CacheInner { slots, lru, .. } = cache;
        if let Some(slot) = slots.get_mut(&blockno) {
            if slot.leases == 0 && slot.pins == 0 && slot.tick.is_none() {
                slot.tick = Some(tick);
                lru.insert(tick, blockno);
                cache.next_tick += 1;
            }
        }
    }

    fn evict_excess(&self, cache: &mut CacheInner) {
        while cache.slots.len() > self.inner.capacity {
            let Some((_, blockno)) = cache.lru.pop_first() else {
                // Everything is leased or pinned; the cache grows past capacity
                // until something is released.
                return;
            };
            let slot = cache.slots.remove(&blockno).expect("lru entry without slot");
            let data = slot.entry.data.read();
            if data.dirty {
                if let Err(e) = self.write_image(blockno, &data.bytes) {
                    log::error!("write-back of block {blockno} during eviction failed: {e}");
                }
            }
        }
    }

    /// Number of cached blocks.
    pub fn cached_blocks(&self) -> usize {
        self.inner.cache.lock().slots.len()
    }

    pub fn is_cached(&self, blockno: u64) -> bool {
        self.inner.cache.lock().slots.contains_key(&blockno)
    }

    /// Drops every clean, unleased, unpinned entry.
    pub fn drop_clean_cache(&self) {
        let mut cache = self.inner.cache.lock();
        let victims: Vec<u64> = cache
            .slots
            .iter()
            .filter(|(_, s)| s.leases == 0 && s.pins == 0 && !s.entry.data.read().dirty)
            .map(|(b, _)| *b)
            .collect();
        for b in victims {
            if let Some(s) = cache.slots.remove(&b) {
                if let Some(t) = s.tick {
                    cache.lru.remove(&t);
                }
            }
        }
    }

    /// Marks a leased block as owned by the journal: it will not be evicted or
    /// written back until every pin is dropped with [`unpin`](Self::unpin).
    pub(crate) fn pin(&self, blockno: u64) {
        let mut cache = self.inner.cache.lock();
        let slot = cache
            .slots
            .get_mut(&blockno)
            .expect("pin of a block without a live cache entry");
        slot.pins += 1;
        if let Some(t) = slot.tick.take() {
            cache.lru.remove(&t);
        }
    }

    pub(crate) fn unpin(&self, blockno: u64) {
        let mut cache = self.inner.cache.lock();
        if let Some(slot) = cache.slots.get_mut(&blockno) {
            debug_assert!(slot.pins > 0);
            slot.pins = slot.pins.saturating_sub(1);
        }
        self.make_evictable(&mut cache, blockno);
        self.evict_excess(&mut cache);
    }

    /// Writes a leased buffer to the image and flushes, if it is dirty.
    pub fn sync_dirty_buffer(&self, bh: &mut BufferHead) -> Result<(), DeviceError> {
        let Some(Lease::Write(guard)) = bh.lease.as_mut() else {
            panic!("sync_dirty_buffer requires a write lease");
        };
        if guard.dirty {
            self.write_image(bh.blockno, &guard.bytes)?;
            self.flush()?;
            guard.dirty = false;
        }
        Ok(())
    }

    /// Writes all dirty, unpinned cache entries in ascending block order,
    /// followed by a single flush. The caller must not hold any lease.
    pub fn sync_all(&self) -> Result<(), DeviceError> {
        let mut targets: Vec<(u64, Arc<Entry>)> = {
            let mut cache = self.inner.cache.lock();
            let CacheInner { slots, lru, .. } = &mut *cache;
            slots
                .iter_mut()
                .filter(|(_, s)| s.pins == 0)
                .map(|(b, s)| {
                    s.leases += 1;
                    if let Some(t) = s.tick.take() {
                        lru.remove(&t);
                    }
                    (*b, s.entry.clone())
                })
                .collect()
        };
        targets.sort_by_key(|(b, _)| *b);
        let mut result = Ok(());
        for (blockno, entry) in &targets {
            let mut data = entry.data.write();
            let pinned = self
                .inner
                .cache
                .lock()
                .slots
                .get(blockno)
                .is_some_and(|s| s.pins > 0);
            if data.dirty && !pinned && result.is_ok() {
                result = self.write_image(*blockno, &data.bytes);
                if result.is_ok() {
                    data.dirty = false;
                }
            }
        }
        for (blockno, _) in &targets {
            self.release_slot(*blockno);
        }
        result?;
        self.flush()
    }

    // ---- uncached access -----------------------------------------------

    /// Reads a block from the image, bypassing the cache.
    pub fn read_uncached(&self, blockno: u64) -> Result<Vec<u8>, DeviceError> {
        self.check_range(blockno)?;
        let mut buf = vec![0; self.inner.block_size];
        self.read_image(blockno, &mut buf)?;
        Ok(buf)
    }

    /// Writes a block to the image without going through the cache. A clean,
    /// idle cached copy of the block is invalidated; leased, pinned or dirty
    /// entries are left alone because they are newer than `data`.
    pub fn write_uncached(&self, blockno: u64, data: &[u8]) -> Result<(), DeviceError> {
        self.check_range(blockno)?;
        assert_eq!(data.len(), self.inner.block_size);
        {
            let mut cache = self.inner.cache.lock();
            let stale = cache.slots.get(&blockno).is_some_and(|s| {
                s.leases == 0 && s.pins == 0 && !s.entry.data.read().dirty
            });
            if stale {
                let s = cache.slots.remove(&blockno).unwrap();
                if let Some(t) = s.tick {
                    cache.lru.remove(&t);
                }
            }
        }
        self.write_image(blockno, data)
    }

    /// Durability flush of the image.
    pub fn flush(&self) -> Result<(), DeviceError> {
        let mut trace = self.inner.trace.lock();
        if trace.mode.is_some() {
            trace.events.push(TraceEvent::Flush);
        }
        self.inner.flushes.fetch_add(1, Ordering::Relaxed);
        if trace.overlay.is_none() {
            if let Storage::File(f) = &self.inner.storage {
                f.sync_data()?;
            }
        }
        Ok(())
    }

    fn read_image(&self, blockno: u64, buf: &mut [u8]) -> Result<(), DeviceError> {
        self.inner.image_reads.fetch_add(1, Ordering::Relaxed);
        {
            let trace = self.inner.trace.lock();
            if let Some(b) = trace.overlay.as_ref().and_then(|o| o.get(&blockno)) {
                buf.copy_from_slice(b);
                return Ok(());
            }
        }
        match &self.inner.storage {
            Storage::File(f) => f.read_exact_at(buf, blockno * self.inner.block_size as u64)?,
            Storage::Memory(m) => m.read().read_into(blockno, buf),
        }
        Ok(())
    }

    fn write_image(&self, blockno: u64, data: &[u8]) -> Result<(), DeviceError> {
        let mut trace = self.inner.trace.lock();
        if let Some(mode) = trace.mode {
            let shared: Option<Arc<[u8]>> = (mode == TraceMode::Full).then(|| Arc::from(data));
            trace.events.push(TraceEvent::WriteBlock {
                blockno,
                digest: fnv1a64(data),
                data: shared,
            });
        }
        self.inner.image_writes.fetch_add(1, Ordering::Relaxed);
        if let Some(overlay) = trace.overlay.as_mut() {
            overlay.insert(blockno, Arc::from(data));
            return Ok(());
        }
        match &self.inner.storage {
            Storage::File(f) => f.write_all_at(data, blockno * self.inner.block_size as u64)?,
            Storage::Memory(m) => m.write().write(blockno, data),
        }
        Ok(())
    }

    // ---- tracing and crash injection -----------------------------------

    /// Starts (or restarts) recording of image writes and flushes.
    pub fn start_trace(&self, mode: TraceMode) {
        let mut t = self.inner.trace.lock();
        t.mode = Some(mode);
        t.events.clear();
    }

    /// Stops recording and returns the trace.
    pub fn take_trace(&self) -> WriteTrace {
        let mut t = self.inner.trace.lock();
        t.mode = None;
        WriteTrace {
            events: std::mem::take(&mut t.events),
        }
    }

    pub fn trace_len(&self) -> usize {
        self.inner.trace.lock().events.len()
    }

    /// Freezes the image: later writes are still traced and visible to reads
    /// through this device, but the backing image is no longer modified.
    pub fn freeze(&self) {
        let mut t = self.inner.trace.lock();
        if t.overlay.is_none() {
            t.overlay = Some(HashMap::new());
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.inner.trace.lock().overlay.is_some()
    }

    /// Image contents as seen by this device (frozen overlay included),
    /// ignoring anything that exists only in the cache.
    pub fn snapshot(&self) -> Result<MemImage, DeviceError> {
        let bs = self.inner.block_size;
        let mut img = match &self.inner.storage {
            Storage::Memory(m) => m.read().clone(),
            Storage::File(f) => {
                let mut img = MemImage::zeroed(bs, self.inner.block_count);
                let mut buf = vec![0; bs];
                for b in 0..self.inner.block_count {
                    f.read_exact_at(&mut buf, b * bs as u64)?;
                    if buf.iter().any(|&x| x != 0) {
                        img.write(b, &buf);
                    }
                }
                img
            }
        };
        if let Some(o) = &self.inner.trace.lock().overlay {
            for (b, d) in o {
                img.write_shared(*b, d.clone());
            }
        }
        Ok(img)
    }
}

fn check_block_size(block_size: usize) -> Result<(), DeviceError> {
    if block_size < 512 || !block_size.is_power_of_two() {
        return Err(DeviceError::BadBlockSize(block_size));
    }
    Ok(())
}

enum Lease {
    Read(ArcRwLockReadGuard<RawRwLock, EntryData>),
    Write(ArcRwLockWriteGuard<RawRwLock, EntryData>),
}

/// A leased view of one cached block. The lease ends on [`release`] or drop.
///
/// [`release`]: BufferHead::release
pub struct BufferHead {
    dev: BlockDevice,
    blockno: u64,
    lease: Option<Lease>,
}

impl BufferHead {
    pub fn blockno(&self) -> u64 {
        self.blockno
    }

    pub fn is_writable(&self) -> bool {
        matches!(self.lease, Some(Lease::Write(_)))
    }

    pub fn is_dirty(&self) -> bool {
        match &self.lease {
            Some(Lease::Read(g)) => g.dirty,
            Some(Lease::Write(g)) => g.dirty,
            None => false,
        }
    }

    pub fn data(&self) -> &[u8] {
        match self.lease.as_ref().expect("buffer already released") {
            Lease::Read(g) => &g.bytes,
            Lease::Write(g) => &g.bytes,
        }
    }

    /// Mutable access; marks the buffer dirty. Panics on a read lease.
    pub fn data_mut(&mut self) -> &mut [u8] {
        match self.lease.as_mut().expect("buffer already released") {
            Lease::Write(g) => {
                g.dirty = true;
                &mut g.bytes
            }
            Lease::Read(_) => panic!("data_mut on a read-only buffer lease"),
        }
    }

    /// Hands responsibility for writing this block to the journal: clears the
    /// dirty flag and, if `pin` is set, pins the cache entry.
    pub(crate) fn hand_to_journal(&mut self, pin: bool) {
        if let Some(Lease::Write(g)) = self.lease.as_mut() {
            g.dirty = false;
        }
        if pin {
            self.dev.pin(self.blockno);
        }
    }

    /// Ends the lease. Idempotent.
    pub fn release(&mut self) {
        if let Some(lease) = self.lease.take() {
            drop(lease);
            self.dev.release_slot(self.blockno);
        }
    }
}

impl Drop for BufferHead {
    fn drop(&mut self) {
        self.release();
    }
}
