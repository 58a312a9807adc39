//! Write-ahead data journal with compound transactions.
//!
//! Operations join the running transaction through [`Journal::begin_op`],
//! capture every block they modify with [`Journal::journal_write`] and detach
//! with [`Journal::end_op`]. A background committer writes the compound
//! transaction to the log once all of its handles have ended and it is either
//! idle, a quarter of the log in size, or forced. Home locations are written
//! only at checkpoint, from the committed copies.
//!
//! The log is circular. Checkpoints run when space is needed and retire the
//! oldest records first, so recent records stay in the log for a while; a
//! block freed in a later committed transaction is never written home.
//!
//! Commit order on the device: descriptor and data copies, flush, commit
//! block, flush. Checkpoint: home writes, flush, journal superblock, flush.

mod format;
mod recovery;

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex, MutexGuard};
use thiserror::Error;

use crate::blockdev::{BlockDevice, BufferHead, DeviceError};

pub use format::{
    record_checksum, CommitBlock, Descriptor, JournalSuperblock, JSB_MAGIC, RECORD_MAGIC,
};
pub use recovery::{recover, RecoveryReport};

pub const MIN_JOURNAL_LEN: u64 = 8;
pub const DEFAULT_JOURNAL_LEN: u64 = 256;
pub const DEFAULT_COMMIT_IDLE: Duration = Duration::from_millis(10);

#[derive(Debug, Error)]
pub enum JournalError {
    #[error("journal region of {0} blocks is too small (minimum {MIN_JOURNAL_LEN})")]
    RegionTooSmall(u64),
    #[error("journal region of {0} blocks exceeds what one descriptor block can map")]
    RegionTooLarge(u64),
    #[error("journal region has no valid journal superblock")]
    NotFormatted,
    #[error("journal superblock records length {recorded}, expected {expected}")]
    LengthMismatch { recorded: u64, expected: u64 },
    #[error("{credits} credits exceed the journal's transaction capacity of {capacity}")]
    CreditsExceedJournal { credits: u32, capacity: u64 },
    #[error("handle already captured its {credits} credited blocks")]
    CreditOverflow { credits: u32 },
    #[error("transaction handle is closed")]
    HandleClosed,
    #[error("journal is shut down")]
    Shutdown,
    #[error("journal failed: {0}")]
    Failed(String),
    #[error(transparent)]
    Device(#[from] DeviceError),
}

#[derive(Clone, Debug)]
pub struct JournalConfig {
    /// Commit a transaction once it has had no handle activity for this long.
    /// `None` commits only when forced, when a quarter of the log is used, or
    /// when space runs out.
    pub commit_idle: Option<Duration>,
    /// When false, every `journal_write` goes straight to its home location
    /// with a flush. Test hook for validating the crash tester.
    pub enabled: bool,
}

impl Default for JournalConfig {
    fn default() -> Self {
        JournalConfig {
            commit_idle: Some(DEFAULT_COMMIT_IDLE),
            enabled: true,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct JournalStats {
    pub next_seq: u32,
    pub last_committed: u32,
    pub commits: u64,
    pub checkpoints: u64,
    /// Log blocks held by committed, not yet checkpointed records.
    pub log_used: u64,
    pub live_records: usize,
}

#[derive(Clone)]
enum Capture {
    Data(Arc<[u8]>),
    Forget,
}

struct Running {
    id: u64,
    handles: usize,
    reserved: u64,
    blocks: BTreeMap<u64, Capture>,
    logged: u64,
    pinned: HashSet<u64>,
    closing: bool,
    last_activity: Instant,
}

impl Running {
    fn footprint(&self) -> u64 {
        self.logged + self.reserved + 2
    }
}

struct Committed {
    seq: u32,
    /// Log position of the descriptor block.
    pos: u64,
    writes: Vec<(u64, Arc<[u8]>)>,
    forgets: Vec<u64>,
}

impl Committed {
    fn log_blocks(&self) -> u64 {
        self.writes.len() as u64 + 2
    }
}

struct State {
    running: Option<Running>,
    next_txn_id: u64,
    done_txn: u64,
    committing: Option<u64>,
    next_seq: u32,
    last_committed: u32,
    committed: VecDeque<Committed>,
    /// Log position where the next record goes. Grows without wrapping;
    /// block numbers are taken modulo the log size.
    head: u64,
    log_used: u64,
    /// Free log blocks the next checkpoint must leave.
    checkpoint_need: Option<u64>,
    checkpoint_running: bool,
    checkpoints: u64,
    commits: u64,
    shutdown: bool,
    failed: Option<String>,
}

struct Shared {
    dev: BlockDevice,
    start: u64,
    length: u64,
    config: JournalConfig,
    state: Mutex<State>,
    cond: Condvar,
}

impl Shared {
    /// Largest credit count one handle may reserve.
    fn capacity(&self) -> u64 {
        self.length - 3
    }

    fn log_len(&self) -> u64 {
        self.length - 1
    }

    fn request_checkpoint(&self, st: &mut State, need: u64) {
        let need = need.min(self.log_len());
        st.checkpoint_need = Some(st.checkpoint_need.map_or(need, |n| n.max(need)));
    }
}

/// An open reservation of block credits in the running transaction.
pub struct TransactionHandle {
    shared: Arc<Shared>,
    txn: u64,
    credits: u32,
    used: u32,
    captured: HashSet<u64>,
    closed: bool,
}

impl std::fmt::Debug for TransactionHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TransactionHandle")
            .field("txn", &self.txn)
            .field("credits", &self.credits)
            .field("used", &self.used)
            .field("closed", &self.closed)
            .finish()
    }
}

impl TransactionHandle {
    pub fn txn_id(&self) -> u64 {
        self.txn
    }

    pub fn credits(&self) -> u32 {
        self.credits
    }

    pub fn used(&self) -> u32 {
        self.used
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    fn end(&mut self) {
        if self.closed {
            return;
        }
        self.closed = true;
        if !self.shared.config.enabled {
            return;
        }
        let mut st = self.shared.state.lock();
        if let Some(t) = st.running.as_mut().filter(|t| t.id == self.txn) {
            t.handles -= 1;
            t.reserved -= u64::from(self.credits);
            t.last_activity = Instant::now();
        }
        drop(st);
        self.shared.cond.notify_all();
    }
}

impl Drop for TransactionHandle {
    fn drop(&mut self) {
        self.end();
    }
}

pub struct Journal {
    shared: Arc<Shared>,
    worker: Mutex<Option<JoinHandle<()>>>,
}

impl std::fmt::Debug for Journal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Journal")
            .field("start", &self.shared.start)
            .field("length", &self.shared.length)
            .field("stats", &self.stats())
            .finish()
    }
}

fn check_geometry(dev: &BlockDevice, length: u64) -> Result<(), JournalError> {
    if length < MIN_JOURNAL_LEN {
        return Err(JournalError::RegionTooSmall(length));
    }
    if length - 3 > Descriptor::max_targets(dev.block_size()) as u64 {
        return Err(JournalError::RegionTooLarge(length));
    }
    Ok(())
}

impl Journal {
    /// Zeroes a journal region and writes a superblock with sequence 1.
    pub fn format(dev: &BlockDevice, start: u64, length: u64) -> Result<(), JournalError> {
        check_geometry(dev, length)?;
        let bs = dev.block_size();
        let zero = vec![0; bs];
        for b in start + 1..start + length {
            dev.write_uncached(b, &zero)?;
        }
        dev.write_uncached(
            start,
            &JournalSuperblock {
                next_seq: 1,
                length: length as u32,
                tail: 0,
            }
            .encode(bs),
        )?;
        dev.flush()?;
        Ok(())
    }

    /// Opens the journal, replaying committed records first. A region with
    /// no journal superblock is formatted.
    pub fn open(
        dev: BlockDevice,
        start: u64,
        length: u64,
        config: JournalConfig,
    ) -> Result<Journal, JournalError> {
        check_geometry(&dev, length)?;
        let (next_seq, head) = match recover(&dev, start, length) {
            Ok(r) => (r.next_seq, r.head),
            Err(JournalError::NotFormatted) => {
                Self::format(&dev, start, length)?;
                (1, 0)
            }
            Err(e) => return Err(e),
        };
        let shared = Arc::new(Shared {
            dev,
            start,
            length,
            state: Mutex::new(State {
                running: None,
                next_txn_id: 1,
                done_txn: 0,
                committing: None,
                next_seq,
                last_committed: next_seq.wrapping_sub(1),
                committed: VecDeque::new(),
                head,
                log_used: 0,
                checkpoint_need: None,
                checkpoint_running: false,
                checkpoints: 0,
                commits: 0,
                shutdown: false,
                failed: None,
            }),
            cond: Condvar::new(),
            config,
        });
        let worker = if shared.config.enabled {
            let s = shared.clone();
            Some(
                std::thread::Builder::new()
                    .name("journal-commit".into())
                    .spawn(move || committer(s))
                    .expect("spawn journal committer"),
            )
        } else {
            None
        };
        Ok(Journal {
            shared,
            worker: Mutex::new(worker),
        })
    }

    pub fn device(&self) -> &BlockDevice {
        &self.shared.dev
    }

    pub fn start(&self) -> u64 {
        self.shared.start
    }

    pub fn length(&self) -> u64 {
        self.shared.length
    }

    pub fn is_enabled(&self) -> bool {
        self.shared.config.enabled
    }

    pub fn capacity(&self) -> u64 {
        self.shared.capacity()
    }

    pub fn stats(&self) -> JournalStats {
        let st = self.shared.state.lock();
        JournalStats {
            next_seq: st.next_seq,
            last_committed: st.last_committed,
            commits: st.commits,
            checkpoints: st.checkpoints,
            log_used: st.log_used,
            live_records: st.committed.len(),
        }
    }

    fn check_failed(st: &State) -> Result<(), JournalError> {
        match &st.failed {
            Some(e) => Err(JournalError::Failed(e.clone())),
            None => Ok(()),
        }
    }

    /// Joins the running transaction with `credits` block credits, waiting
    /// for log space if necessary.
    pub fn begin_op(&self, credits: u32) -> Result<TransactionHandle, JournalError> {
        let sh = &self.shared;
        let capacity = sh.capacity();
        if credits == 0 || u64::from(credits) > capacity {
            return Err(JournalError::CreditsExceedJournal { credits, capacity });
        }
        let mut handle = TransactionHandle {
            shared: sh.clone(),
            txn: 0,
            credits,
            used: 0,
            captured: HashSet::new(),
            closed: false,
        };
        if !sh.config.enabled {
            return Ok(handle);
        }
        let usable = sh.log_len();
        let mut st = sh.state.lock();
        loop {
            Self::check_failed(&st)?;
            if st.shutdown {
                return Err(JournalError::Shutdown);
            }
            if st.running.as_ref().is_some_and(|t| t.closing) {
                sh.cond.wait(&mut st);
                continue;
            }
            let running_fp = st.running.as_ref().map_or(2, Running::footprint);
            if st.log_used + running_fp + u64::from(credits) <= usable {
                break;
            }
            match st.running.as_mut() {
                Some(t) if t.handles > 0 || !t.blocks.is_empty() => t.closing = true,
                _ => {
                    let need = (2 + u64::from(credits)).max(usable / 4);
                    sh.request_checkpoint(&mut st, need);
                }
            }
            sh.cond.notify_all();
            sh.cond.wait(&mut st);
        }
        let id = match st.running.as_mut() {
            Some(t) => t.id,
            None => {
                let id = st.next_txn_id;
                st.next_txn_id += 1;
                st.running = Some(Running {
                    id,
                    handles: 0,
                    reserved: 0,
                    blocks: BTreeMap::new(),
                    logged: 0,
                    pinned: HashSet::new(),
                    closing: false,
                    last_activity: Instant::now(),
                });
                id
            }
        };
        let t = st.running.as_mut().unwrap();
        t.handles += 1;
        t.reserved += u64::from(credits);
        t.last_activity = Instant::now();
        handle.txn = id;
        Ok(handle)
    }

    /// Captures the current contents of a write-leased buffer in the handle's
    /// transaction. The block is not written in place until checkpoint.
    pub fn journal_write(
        &self,
        h: &mut TransactionHandle,
        bh: &mut BufferHead,
    ) -> Result<(), JournalError> {
        if h.closed {
            return Err(JournalError::HandleClosed);
        }
        assert!(bh.is_writable(), "journal_write needs a write lease");
        let blockno = bh.blockno();
        if !h.captured.contains(&blockno) {
            if h.used >= h.credits {
                return Err(JournalError::CreditOverflow { credits: h.credits });
            }
            h.used += 1;
            h.captured.insert(blockno);
        }
        let sh = &self.shared;
        if !sh.config.enabled {
            sh.dev.sync_dirty_buffer(bh)?;
            return Ok(());
        }
        let data: Arc<[u8]> = Arc::from(bh.data());
        let mut st = sh.state.lock();
        Self::check_failed(&st)?;
        let t = st
            .running
            .as_mut()
            .filter(|t| t.id == h.txn)
            .expect("open handle without its running transaction");
        let first = t.pinned.insert(blockno);
        bh.hand_to_journal(first);
        if !matches!(t.blocks.insert(blockno, Capture::Data(data)), Some(Capture::Data(_))) {
            t.logged += 1;
        }
        t.last_activity = Instant::now();
        if t.logged + 2 >= sh.length / 4 && !t.closing {
            t.closing = true;
            drop(st);
            sh.cond.notify_all();
        }
        Ok(())
    }

    /// Records that `blockno` was freed by this handle's operation. If the
    /// block's latest captured contents are not yet committed they are
    /// discarded, and committed copies are not checkpointed to the home
    /// location once the free itself is committed.
    pub fn forget(&self, h: &mut TransactionHandle, blockno: u64) -> Result<(), JournalError> {
        if h.closed {
            return Err(JournalError::HandleClosed);
        }
        let sh = &self.shared;
        if !sh.config.enabled {
            return Ok(());
        }
        let mut st = sh.state.lock();
        let t = st
            .running
            .as_mut()
            .filter(|t| t.id == h.txn)
            .expect("open handle without its running transaction");
        if let Some(Capture::Data(_)) = t.blocks.insert(blockno, Capture::Forget) {
            t.logged -= 1;
        }
        Ok(())
    }

    /// Detaches the handle from its transaction.
    pub fn end_op(&self, mut h: TransactionHandle) {
        h.end();
    }

    /// Waits until everything captured so far is durably committed and
    /// returns the last committed sequence.
    pub fn force_commit(&self) -> Result<u32, JournalError> {
        let sh = &self.shared;
        if !sh.config.enabled {
            sh.dev.flush()?;
            return Ok(0);
        }
        let mut st = sh.state.lock();
        let target = match st.running.as_mut() {
            Some(t) if !t.blocks.is_empty() => {
                t.closing = true;
                Some(t.id)
            }
            _ => st.committing,
        };
        sh.cond.notify_all();
        if let Some(target) = target {
            while st.done_txn < target && st.failed.is_none() {
                sh.cond.wait(&mut st);
            }
        }
        Self::check_failed(&st)?;
        Ok(st.last_committed)
    }

    /// Writes every committed record to its home location and empties the log.
    pub fn checkpoint(&self) -> Result<(), JournalError> {
        let sh = &self.shared;
        if !sh.config.enabled {
            return Ok(());
        }
        let mut st = sh.state.lock();
        let target = st.checkpoints + if st.checkpoint_running { 2 } else { 1 };
        sh.request_checkpoint(&mut st, u64::MAX);
        sh.cond.notify_all();
        while st.checkpoints < target && st.failed.is_none() && !st.shutdown {
            sh.cond.wait(&mut st);
        }
        Self::check_failed(&st)
    }

    /// Commits, checkpoints and stops the committer. Idempotent.
    pub fn close(&self) -> Result<(), JournalError> {
        let Some(worker) = self.worker.lock().take() else {
            return Ok(());
        };
        let res = self
            .force_commit()
            .and_then(|_| self.checkpoint())
            .and_then(|_| Ok(self.shared.dev.flush()?));
        self.shared.state.lock().shutdown = true;
        self.shared.cond.notify_all();
        let _ = worker.join();
        res
    }
}

impl Drop for Journal {
    fn drop(&mut self) {
        if let Err(e) = self.close() {
            log::error!("journal close on drop failed: {e}");
        }
    }
}

fn committer(sh: Arc<Shared>) {
    let mut st = sh.state.lock();
    loop {
        let now = Instant::now();
        let ready = st.running.as_ref().is_some_and(|t| {
            t.handles == 0
                && (t.closing
                    || (!t.blocks.is_empty()
                        && sh
                            .config
                            .commit_idle
                            .is_some_and(|idle| now.duration_since(t.last_activity) >= idle)))
        });
        if ready && st.failed.is_none() {
            let t = st.running.take().unwrap();
            commit(&sh, &mut st, t);
            sh.cond.notify_all();
            continue;
        }
        if st.failed.is_none() {
            if let Some(need) = st.checkpoint_need.take() {
                checkpoint(&sh, &mut st, need);
                sh.cond.notify_all();
                continue;
            }
        }
        if st.shutdown {
            return;
        }
        let wait = match (&st.running, sh.config.commit_idle) {
            (Some(t), Some(idle)) if !t.blocks.is_empty() => {
                idle.saturating_sub(now.duration_since(t.last_activity)) + Duration::from_micros(200)
            }
            _ => Duration::from_millis(50),
        };
        sh.cond.wait_for(&mut st, wait);
    }
}

fn commit(sh: &Shared, st: &mut MutexGuard<'_, State>, t: Running) {
    let mut writes = Vec::with_capacity(t.logged as usize);
    let mut forgets = Vec::new();
    for (b, c) in &t.blocks {
        match c {
            Capture::Data(d) => writes.push((*b, d.clone())),
            Capture::Forget => forgets.push(*b),
        }
    }
    // Blocks captured and then freed within the transaction never reach the log.
    for b in &t.pinned {
        if matches!(t.blocks.get(b), Some(Capture::Forget)) {
            sh.dev.unpin(*b);
        }
    }
    if writes.is_empty() {
        if !forgets.is_empty() {
            match st.committed.back_mut() {
                Some(last) => last.forgets.extend(forgets),
                None => log::debug!("dropping forget-only transaction {}", t.id),
            }
        }
        st.done_txn = t.id;
        return;
    }
    let seq = st.next_seq;
    st.next_seq = seq.wrapping_add(1);
    let pos = st.head;
    st.head += writes.len() as u64 + 2;
    st.log_used += writes.len() as u64 + 2;
    st.committing = Some(t.id);
    let res = MutexGuard::unlocked(st, || write_record(sh, pos, seq, &writes));
    st.committing = None;
    st.done_txn = t.id;
    match res {
        Ok(()) => {
            st.last_committed = seq;
            st.commits += 1;
            st.committed.push_back(Committed {
                seq,
                pos,
                writes,
                forgets,
            });
        }
        Err(e) => {
            log::error!("journal commit of sequence {seq} failed: {e}");
            st.failed = Some(e.to_string());
        }
    }
}

fn write_record(
    sh: &Shared,
    pos: u64,
    seq: u32,
    writes: &[(u64, Arc<[u8]>)],
) -> Result<(), DeviceError> {
    let bs = sh.dev.block_size();
    let block = |i: u64| recovery::log_block(sh.start, sh.length, pos + i);
    let desc = Descriptor {
        sequence: seq,
        targets: writes.iter().map(|(b, _)| *b as u32).collect(),
    }
    .encode(bs);
    sh.dev.write_uncached(block(0), &desc)?;
    for (i, (_, d)) in writes.iter().enumerate() {
        sh.dev.write_uncached(block(1 + i as u64), d)?;
    }
    sh.dev.flush()?;
    let checksum = record_checksum(&desc, writes.iter().map(|(_, d)| &d[..]));
    sh.dev.write_uncached(
        block(1 + writes.len() as u64),
        &CommitBlock {
            sequence: seq,
            checksum,
        }
        .encode(bs),
    )?;
    sh.dev.flush()
}

/// Retires the oldest committed records until at least `need` log blocks are
/// free. A block is written home from a retired record only if no later
/// committed record writes or frees it.
fn checkpoint(sh: &Shared, st: &mut MutexGuard<'_, State>, need: u64) {
    let log_len = sh.log_len();
    let mut count = 0;
    let mut free = log_len - st.log_used;
    while free < need && count < st.committed.len() {
        free += st.committed[count].log_blocks();
        count += 1;
    }
    if count == 0 {
        st.checkpoints += 1;
        return;
    }
    st.checkpoint_running = true;
    let mut last_touch: HashMap<u64, usize> = HashMap::new();
    for (i, rec) in st.committed.iter().enumerate() {
        for b in rec.writes.iter().map(|w| &w.0).chain(&rec.forgets) {
            last_touch.insert(*b, i);
        }
    }
    let mut home: BTreeMap<u64, Arc<[u8]>> = BTreeMap::new();
    for (i, rec) in st.committed.iter().take(count).enumerate() {
        for (b, d) in &rec.writes {
            if last_touch[b] == i {
                home.insert(*b, d.clone());
            }
        }
    }
    let (next_seq, tail) = match st.committed.get(count) {
        Some(rec) => (rec.seq, rec.pos),
        None => (st.next_seq, st.head),
    };
    let res = MutexGuard::unlocked(st, || -> Result<(), DeviceError> {
        for (b, d) in &home {
            sh.dev.write_uncached(*b, d)?;
        }
        sh.dev.flush()?;
        sh.dev.write_uncached(
            sh.start,
            &JournalSuperblock {
                next_seq,
                length: sh.length as u32,
                tail: (tail % log_len) as u32,
            }
            .encode(sh.dev.block_size()),
        )?;
        sh.dev.flush()
    });
    st.checkpoint_running = false;
    st.checkpoints += 1;
    match res {
        Ok(()) => {
            let retired: Vec<Committed> = st.committed.drain(..count).collect();
            for rec in &retired {
                st.log_used -= rec.log_blocks();
                for (b, _) in &rec.writes {
                    sh.dev.unpin(*b);
                }
            }
        }
        Err(e) => {
            log::error!("journal checkpoint failed: {e}");
            st.failed = Some(e.to_string());
        }
    }
}
